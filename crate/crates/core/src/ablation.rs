//! Named training variants and their side-by-side comparison.

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::selfpaced::Criteria;
use crate::trainer::{self, Mode, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoIndep,
    NoComp,
    /// No reliability filtering at all.
    NoBoth,
    /// Each sample is contrasted only against its own prototype family.
    NoUnified,
    /// No filtering, and outliers never enter the loss.
    ClustersOnly,
    /// Ground-truth target identities instead of clustering.
    Oracle,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoIndep,
        Variant::NoComp,
        Variant::NoBoth,
        Variant::NoUnified,
        Variant::ClustersOnly,
        Variant::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIndep => "no_indep",
            Variant::NoComp => "no_comp",
            Variant::NoBoth => "no_both",
            Variant::NoUnified => "no_unified",
            Variant::ClustersOnly => "no_selfpaced_clusters_only",
            Variant::Oracle => "oracle",
        }
    }

    /// `base` with the variant's switches applied. Oracle keeps source data
    /// only when `base` trains with it.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoIndep => cfg.criteria.independence = false,
            Variant::NoComp => cfg.criteria.compactness = false,
            Variant::NoBoth => cfg.criteria = Criteria::NONE,
            Variant::NoUnified => cfg.unified = false,
            Variant::ClustersOnly => {
                cfg.criteria = Criteria::NONE;
                cfg.drop_outliers = true;
            }
            Variant::Oracle => cfg.mode = Mode::Oracle,
        }
        cfg
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub outcome: TrainOutcome,
}

pub const COMPARISON_HEADER: &str = "variant,map,top1,top5,top10,nmi_clustered,nmi_all,final_clusters,final_outliers";

/// Trains every variant from the same seed. Oracle drops the source data
/// when `base` is unsupervised.
pub fn run_variants(
    base: &TrainConfig,
    variants: &[Variant],
    source: &[SampleRecord],
    target: &[SampleRecord],
) -> Result<Vec<VariantResult>> {
    variants
        .iter()
        .map(|&variant| {
            let cfg = variant.apply(base);
            let src: &[SampleRecord] = if base.mode == Mode::Unsupervised { &[] } else { source };
            log::info!("training variant {}", variant.name());
            Ok(VariantResult {
                variant,
                outcome: trainer::train(&cfg, src, target)?,
            })
        })
        .collect()
}

pub fn comparison_csv(results: &[VariantResult]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:?}"));
    for r in results {
        let last = r.outcome.reports.last();
        match &r.outcome.target_eval {
            Some(e) => out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{},{},",
                r.variant.name(),
                e.map,
                e.cmc[0],
                e.cmc[1],
                e.cmc[2],
                opt(e.nmi.map(|n| n.clustered)),
                opt(e.nmi.map(|n| n.all)),
            )),
            None => out.push_str(&format!("{},,,,,,,", r.variant.name())),
        }
        match last {
            Some(l) => out.push_str(&format!("{},{}\n", l.n_clusters_kept, l.n_outliers)),
            None => out.push_str(",\n"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn switches() {
        let base = TrainConfig::default();
        let c = Variant::ClustersOnly.apply(&base);
        assert!(c.drop_outliers && c.criteria == Criteria::NONE);
        assert!(!Variant::NoUnified.apply(&base).unified);
        assert_eq!(Variant::Oracle.apply(&base).mode, Mode::Oracle);
        assert_eq!(Variant::Full.apply(&base), base);
    }
}

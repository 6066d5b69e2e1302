//! Hybrid memory: source class centroids `w`, target instance features `v`
//! and the current target cluster sets from which cluster centroids are
//! derived on demand.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::data::{split_by_pseudo_label, Assignment, PseudoLabelState};
use crate::error::{Error, Result};
use crate::feature::{mean, FeatureVector};

/// Default momentum for both source centroids and target instances.
pub const DEFAULT_MOMENTUM: f64 = 0.2;

/// Unit vectors whose norm is this close to one are left bit-identical by
/// re-normalization, so momentum 1 is an exact no-op.
const RENORM_SLACK: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct HybridMemory {
    w: Vec<FeatureVector>,
    v: Vec<FeatureVector>,
    clusters: BTreeMap<usize, Vec<usize>>,
    membership: Vec<Option<usize>>,
    pub m_s: f64,
    pub m_t: f64,
    /// Re-normalize `w` and `v` after every momentum update.
    pub renorm: bool,
}

fn renormalize(f: &mut FeatureVector) {
    let n = f.norm();
    if (n - 1.0).abs() > RENORM_SLACK {
        f.normalize_or_jitter();
    }
}

fn blend(old: &mut FeatureVector, new: &[f64], m: f64) {
    if m == 1.0 {
        return;
    }
    if m == 0.0 {
        old.as_mut_slice().copy_from_slice(new);
        return;
    }
    old.as_mut_slice()
        .iter_mut()
        .zip(new)
        .for_each(|(o, n)| *o = m * *o + (1.0 - m) * n);
}

impl HybridMemory {
    /// `source` pairs each source feature with its dense class index in
    /// `0..n_classes`; `w_k` becomes the normalized class mean. Target
    /// features are stored verbatim.
    pub fn init(
        source: &[(FeatureVector, usize)],
        n_classes: usize,
        target: Vec<FeatureVector>,
        m_s: f64,
        m_t: f64,
    ) -> Result<Self> {
        for m in [m_s, m_t] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
            }
        }
        let mut by_class: Vec<Vec<&[f64]>> = vec![Vec::new(); n_classes];
        for (f, k) in source {
            let slot = by_class
                .get_mut(*k)
                .ok_or_else(|| Error::MemoryInit(format!("class {k} >= {n_classes}")))?;
            slot.push(f.as_slice());
        }
        let w = by_class
            .into_iter()
            .enumerate()
            .map(|(k, rows)| {
                if rows.is_empty() {
                    return Err(Error::MemoryInit(format!("source class {k} has no samples")));
                }
                let mut c = FeatureVector::new(mean(rows));
                if c.norm() == 0.0 {
                    return Err(Error::MemoryInit(format!(
                        "source class {k} has a zero mean feature"
                    )));
                }
                renormalize(&mut c);
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_t = target.len();
        Ok(HybridMemory {
            w,
            v: target,
            clusters: BTreeMap::new(),
            membership: vec![None; n_t],
            m_s,
            m_t,
            renorm: true,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.w.len()
    }

    pub fn n_instances(&self) -> usize {
        self.v.len()
    }

    pub fn class_centroids(&self) -> &[FeatureVector] {
        &self.w
    }

    pub fn instances(&self) -> &[FeatureVector] {
        &self.v
    }

    pub fn clusters(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.clusters
    }

    pub fn cluster_of(&self, i: usize) -> Option<usize> {
        self.membership[i]
    }

    /// Normalized mean of the member instance features, computed from the
    /// current `v` on every call.
    pub fn cluster_centroid(&self, id: usize) -> Result<FeatureVector> {
        let members = self.clusters.get(&id).ok_or(Error::UnknownCluster(id))?;
        assert!(members.len() >= 2, "cluster {id} has fewer than two members");
        let mut c = FeatureVector::new(mean(members.iter().map(|&i| self.v[i].as_slice())));
        renormalize(&mut c);
        Ok(c)
    }

    /// Centroids of all clusters in id order.
    pub fn cluster_centroids(&self) -> Vec<FeatureVector> {
        self.clusters
            .keys()
            .map(|&id| self.cluster_centroid(id).expect("id taken from the map"))
            .collect()
    }

    /// Momentum update of source class centroids from a mini-batch of
    /// `(feature, class)` pairs. Classes absent from the batch are untouched.
    pub fn update_class_centroids<F: AsRef<[f64]>>(&mut self, batch: &[(F, usize)]) -> Result<()> {
        let mut by_class: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for (f, k) in batch {
            if *k >= self.w.len() {
                return Err(Error::Contract(format!("class {k} >= {}", self.w.len())));
            }
            by_class.entry(*k).or_default().push(f.as_ref());
        }
        for (k, rows) in by_class {
            let m = mean(rows);
            blend(&mut self.w[k], &m, self.m_s);
            if self.renorm {
                renormalize(&mut self.w[k]);
            }
        }
        Ok(())
    }

    /// Momentum update of target instance features. Returns the ids of the
    /// clusters whose centroid changed as a result.
    pub fn update_instances<F: AsRef<[f64]>>(
        &mut self,
        batch: &[(usize, F)],
    ) -> Result<BTreeSet<usize>> {
        let mut seen = BTreeSet::new();
        for (i, _) in batch {
            if *i >= self.v.len() {
                return Err(Error::Contract(format!("instance {i} >= {}", self.v.len())));
            }
            if !seen.insert(*i) {
                return Err(Error::Contract(format!("instance {i} repeated in one update")));
            }
        }
        let mut touched = BTreeSet::new();
        for (i, f) in batch {
            blend(&mut self.v[*i], f.as_ref(), self.m_t);
            if self.renorm {
                renormalize(&mut self.v[*i]);
            }
            if let Some(c) = self.membership[*i] {
                touched.insert(c);
            }
        }
        Ok(touched)
    }

    pub fn rebuild_clusters(&mut self, state: &PseudoLabelState) -> Result<()> {
        if state.len() != self.v.len() {
            return Err(Error::Contract(format!(
                "pseudo-label state covers {} instances, memory holds {}",
                state.len(),
                self.v.len()
            )));
        }
        self.clusters = split_by_pseudo_label(state).clusters;
        self.membership = state
            .assignments()
            .iter()
            .map(|a| match a {
                Assignment::Clustered(c) => Some(*c),
                Assignment::Outlier => None,
            })
            .collect();
        Ok(())
    }

    pub fn is_normalized(&self) -> bool {
        self.w.iter().chain(&self.v).all(FeatureVector::is_unit)
    }

    /// CSV dump: `kind,index,cluster,f0..` with `kind` in {w, v} and
    /// `cluster = -1` for class centroids and outliers.
    pub fn snapshot_csv(&self) -> String {
        let dim = self.w.first().or(self.v.first()).map_or(0, |f| f.dim());
        let mut out = String::from("kind,index,cluster");
        (0..dim).for_each(|k| {
            let _ = write!(out, ",f{k}");
        });
        out.push('\n');
        let mut row = |kind: &str, i: usize, c: Option<usize>, f: &FeatureVector| {
            let c = c.map_or(-1, |c| c as i64);
            let _ = write!(out, "{kind},{i},{c}");
            f.iter().for_each(|x| {
                let _ = write!(out, ",{x:?}");
            });
            out.push('\n');
        };
        for (k, f) in self.w.iter().enumerate() {
            row("w", k, None, f);
        }
        for (i, f) in self.v.iter().enumerate() {
            row("v", i, self.membership[i], f);
        }
        out
    }
}

//! Cluster reliability: independence against a loosened clustering,
//! compactness against a tightened one, and the filtering that turns a raw
//! DBSCAN partition into the epoch's pseudo labels.

use crate::clustering::{ClusterPartition, ThreeScale};
use crate::data::{Assignment, PseudoLabelState};
use crate::error::{Error, Result};

pub const DEFAULT_KEEP_FRACTION: f64 = 0.9;

/// `|A ∩ B| / |A ∪ B|` for ascending index lists.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

fn cluster_set(p: &ClusterPartition, members: &[Vec<usize>], i: usize) -> Vec<usize> {
    match p.label(i) {
        Some(c) => members[c].clone(),
        None => vec![i],
    }
}

fn reference_iou(main: &ClusterPartition, other: &ClusterPartition, i: usize) -> Result<f64> {
    let c = main
        .label(i)
        .ok_or_else(|| Error::Contract(format!("point {i} is noise in the main partition")))?;
    let own = &main.members()[c];
    Ok(iou(own, &cluster_set(other, &other.members(), i)))
}

/// IoU of the main cluster of `i` with its cluster under the loosened
/// criterion (`{i}` if it is noise there).
pub fn independence(main: &ClusterPartition, loose: &ClusterPartition, i: usize) -> Result<f64> {
    reference_iou(main, loose, i)
}

/// IoU of the main cluster of `i` with its cluster under the tightened
/// criterion (`{i}` if it is noise there).
pub fn compactness(main: &ClusterPartition, tight: &ClusterPartition, i: usize) -> Result<f64> {
    reference_iou(main, tight, i)
}

/// Scores for every point that is clustered in the main partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityScores {
    /// Per point; equal across a main cluster.
    pub indep: Vec<Option<f64>>,
    pub comp: Vec<Option<f64>>,
}

impl ReliabilityScores {
    pub fn clustered_indep(&self) -> Vec<f64> {
        self.indep.iter().flatten().copied().collect()
    }

    pub fn mean_indep(&self) -> Option<f64> {
        mean(self.indep.iter().flatten())
    }

    pub fn mean_comp(&self) -> Option<f64> {
        mean(self.comp.iter().flatten())
    }
}

fn mean<'a>(xs: impl Iterator<Item = &'a f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Computes both scores. Independence is evaluated per main cluster as the
/// minimum member IoU, which is the common member value whenever the loose
/// partition nests the main one.
pub fn score(scales: &ThreeScale) -> ReliabilityScores {
    let n = scales.main.len();
    let main_members = scales.main.members();
    let loose_members = scales.loose.members();
    let tight_members = scales.tight.members();
    let mut indep = vec![None; n];
    let mut comp = vec![None; n];
    for members in &main_members {
        let cluster_indep = members
            .iter()
            .map(|&i| iou(members, &cluster_set(&scales.loose, &loose_members, i)))
            .fold(f64::INFINITY, f64::min);
        for &i in members {
            indep[i] = Some(cluster_indep);
            comp[i] = Some(iou(members, &cluster_set(&scales.tight, &tight_members, i)));
        }
    }
    ReliabilityScores { indep, comp }
}

/// The `(1 - keep_fraction)` quantile, lower interpolation, of the epoch-0
/// independence scores of clustered points.
pub fn calibrate_alpha(indep: &[f64], keep_fraction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::Config(format!("keep_fraction {keep_fraction} outside [0, 1]")));
    }
    if indep.is_empty() {
        return Err(Error::Calibration(
            "no clustered points before the first epoch; raise eps (d) or lower min_pts".into(),
        ));
    }
    let mut sorted = indep.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = 1.0 - keep_fraction;
    let pos = (q * (sorted.len() - 1) as f64 + 1e-9).floor() as usize;
    Ok(sorted[pos.min(sorted.len() - 1)])
}

/// Which reliability criteria are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Criteria {
    pub independence: bool,
    pub compactness: bool,
}

impl Criteria {
    pub const ALL: Criteria = Criteria {
        independence: true,
        compactness: true,
    };
    pub const NONE: Criteria = Criteria {
        independence: false,
        compactness: false,
    };
}

/// Filters the main partition:
/// clusters with independence `<= alpha` are disassembled; inside each
/// surviving cluster only points whose compactness reaches the cluster
/// maximum are kept; clusters left with fewer than two members are
/// disassembled; survivors are re-indexed densely. Everything removed, and
/// the main partition's noise, becomes an outlier.
pub fn filter_partition(
    main: &ClusterPartition,
    scores: &ReliabilityScores,
    alpha: f64,
    criteria: Criteria,
) -> Result<PseudoLabelState> {
    let mut raw: Vec<Option<usize>> = vec![None; main.len()];
    for (c, members) in main.members().iter().enumerate() {
        let score = |v: &[Option<f64>], i: usize| {
            v[i].ok_or_else(|| Error::Contract(format!("no reliability score for point {i}")))
        };
        if criteria.independence {
            let r = members
                .iter()
                .map(|&i| score(&scores.indep, i))
                .collect::<Result<Vec<f64>>>()?;
            if r.iter().any(|&x| x <= alpha) {
                continue;
            }
        }
        let keep: Vec<usize> = if criteria.compactness {
            let comp = members
                .iter()
                .map(|&i| score(&scores.comp, i))
                .collect::<Result<Vec<f64>>>()?;
            let beta = comp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            members
                .iter()
                .zip(&comp)
                .filter(|(_, &r)| r >= beta)
                .map(|(&i, _)| i)
                .collect()
        } else {
            members.clone()
        };
        for i in keep {
            raw[i] = Some(c);
        }
    }
    // from_raw_labels drops singletons and re-densifies in index order
    let state = PseudoLabelState::from_raw_labels(&raw);
    debug_assert!(state
        .assignments()
        .iter()
        .enumerate()
        .all(|(i, a)| *a == Assignment::Outlier || main.label(i).is_some()));
    Ok(state)
}

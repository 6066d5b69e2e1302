//! Retrieval metrics (mAP, CMC) and normalized mutual information.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::feature::dot;
use crate::rng::Rng;

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalItem {
    pub feature: Vec<f64>,
    pub label: u32,
    pub cam: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalSplit {
    pub query: Vec<RetrievalItem>,
    pub gallery: Vec<RetrievalItem>,
    /// Query `i` and gallery `i` are the same sample; drop that pair.
    pub shared_index: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub map: f64,
    /// Top-k accuracy for each of [`CMC_RANKS`].
    pub cmc: [f64; 3],
    pub nmi: Option<NmiScores>,
    pub n_queries: usize,
    pub n_skipped: usize,
}

impl EvalResult {
    pub fn top1(&self) -> f64 {
        self.cmc[0]
    }

    /// `metric,value` CSV rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("mAP,{:?}\n", self.map));
        for (k, v) in CMC_RANKS.iter().zip(&self.cmc) {
            out.push_str(&format!("top{k},{v:?}\n"));
        }
        if let Some(n) = &self.nmi {
            out.push_str(&format!("nmi_clustered,{:?}\n", n.clustered));
            out.push_str(&format!("nmi_all,{:?}\n", n.all));
        }
        out.push_str(&format!("n_queries,{}\n", self.n_queries));
        out.push_str(&format!("n_skipped,{}\n", self.n_skipped));
        out
    }
}

/// Average precision of a ranked relevance list; `None` without any
/// relevant item.
pub fn average_precision(flags: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Relevance flags of the gallery for query `q`, in ranked order, after the
/// same-sample and same-identity-same-camera exclusions.
pub fn ranked_flags(split: &RetrievalSplit, q: usize) -> Vec<bool> {
    let query = &split.query[q];
    let mut ranked: Vec<(f64, usize)> = split
        .gallery
        .iter()
        .enumerate()
        .filter(|(g, item)| {
            if split.shared_index && *g == q {
                return false;
            }
            !matches!((query.cam, item.cam), (Some(a), Some(b)) if a == b && item.label == query.label)
        })
        .map(|(g, item)| (dot(&query.feature, &item.feature), g))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked
        .into_iter()
        .map(|(_, g)| split.gallery[g].label == query.label)
        .collect()
}

pub fn evaluate_retrieval(split: &RetrievalSplit) -> Result<EvalResult> {
    if split.query.is_empty() || split.gallery.is_empty() {
        return Err(Error::Data("empty query or gallery".into()));
    }
    let mut aps = Vec::new();
    let mut cmc_hits = [0usize; 3];
    let mut skipped = 0;
    for q in 0..split.query.len() {
        let flags = ranked_flags(split, q);
        let Some(ap) = average_precision(&flags) else {
            skipped += 1;
            continue;
        };
        aps.push(ap);
        let first = flags.iter().position(|&f| f).expect("ap implies a hit");
        for (hit, &k) in cmc_hits.iter_mut().zip(&CMC_RANKS) {
            if first < k {
                *hit += 1;
            }
        }
    }
    let valid = aps.len();
    let frac = |h: usize| if valid == 0 { 0.0 } else { h as f64 / valid as f64 };
    Ok(EvalResult {
        map: if valid == 0 { 0.0 } else { aps.iter().sum::<f64>() / valid as f64 },
        cmc: [frac(cmc_hits[0]), frac(cmc_hits[1]), frac(cmc_hits[2])],
        nmi: None,
        n_queries: valid,
        n_skipped: skipped,
    })
}

/// Per-identity query/gallery split of sample indices: a quarter of each
/// identity (rounded, at least one when the identity has two or more
/// samples) goes to the query side.
pub fn query_gallery_indices(labels: &[u32], query_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(*l).or_default().push(i);
    }
    let mut rng = Rng::substream(seed, 9);
    let (mut query, mut gallery) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_label {
        rng.shuffle(&mut idx);
        let nq = if idx.len() < 2 {
            0
        } else {
            ((idx.len() as f64 * query_fraction).round() as usize).clamp(1, idx.len() - 1)
        };
        query.extend_from_slice(&idx[..nq]);
        gallery.extend_from_slice(&idx[nq..]);
    }
    query.sort_unstable();
    gallery.sort_unstable();
    (query, gallery)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmiScores {
    /// Over clustered points only.
    pub clustered: f64,
    /// Over all points, each outlier its own singleton cluster.
    pub all: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(U; V) / sqrt(H(U) H(V))` with natural logarithms. When either entropy
/// is zero the score is 1 for identical partitions and 0 otherwise.
pub fn nmi_of<A: Ord + Copy, B: Ord + Copy>(u: &[A], v: &[B]) -> f64 {
    assert_eq!(u.len(), v.len());
    let n = u.len();
    if n == 0 {
        return 1.0;
    }
    let mut joint: BTreeMap<(A, B), usize> = BTreeMap::new();
    let mut cu: BTreeMap<A, usize> = BTreeMap::new();
    let mut cv: BTreeMap<B, usize> = BTreeMap::new();
    for (a, b) in u.iter().zip(v) {
        *joint.entry((*a, *b)).or_default() += 1;
        *cu.entry(*a).or_default() += 1;
        *cv.entry(*b).or_default() += 1;
    }
    let nf = n as f64;
    let hu = entropy(cu.values().copied(), nf);
    let hv = entropy(cv.values().copied(), nf);
    if hu == 0.0 || hv == 0.0 {
        // identical as partitions iff every cell is a full row and column
        let identical = joint.len() == cu.len() && joint.len() == cv.len();
        return if identical { 1.0 } else { 0.0 };
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| {
            let pab = c as f64 / nf;
            pab * (pab * nf * nf / (cu[&a] as f64 * cv[&b] as f64)).ln()
        })
        .sum();
    (mi / (hu * hv).sqrt()).clamp(0.0, 1.0)
}

/// Both NMI variants for a pseudo labelling (`None` = outlier) against
/// ground truth.
pub fn nmi(pseudo: &[Option<usize>], gt: &[u32]) -> NmiScores {
    assert_eq!(pseudo.len(), gt.len());
    let (cu, cv): (Vec<usize>, Vec<u32>) = pseudo
        .iter()
        .zip(gt)
        .filter_map(|(p, g)| p.map(|p| (p, *g)))
        .unzip();
    let clustered = nmi_of(&cu, &cv);
    // outliers get ids past every cluster id
    let offset = pseudo.iter().flatten().max().map_or(0, |m| m + 1);
    let all_labels: Vec<usize> = pseudo
        .iter()
        .enumerate()
        .map(|(i, p)| p.unwrap_or(offset + i))
        .collect();
    NmiScores {
        clustered,
        all: nmi_of(&all_labels, gt),
    }
}

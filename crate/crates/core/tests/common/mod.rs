//! Brute-force oracles shared by the integration tests. Each one is written
//! from the definition, independent of the library code it checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use contramem::distance::DistanceMatrix;
use contramem::rng::Rng;

/// DBSCAN clusters as a set of sorted member lists: transitive closure of
/// the core adjacency (Floyd-Warshall style), then border attachment to the
/// lowest-index core within `eps`.
pub fn dbscan_oracle(dist: &DistanceMatrix, eps: f64, min_pts: usize) -> BTreeSet<Vec<usize>> {
    let n = dist.len();
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && dist.get(i, j) <= eps).count() >= min_pts)
        .collect();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = core[i] && core[j] && (i == j || dist.get(i, j) <= eps);
        }
    }
    for k in 0..n {
        for i in 0..n {
            if !reach[i][k] {
                continue;
            }
            for j in 0..n {
                if reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let root = |i: usize| (0..n).find(|&j| reach[i][j]).unwrap();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        if core[i] {
            groups.entry(root(i)).or_default().push(i);
        } else if let Some(c) = (0..n).find(|&j| core[j] && dist.get(i, j) <= eps) {
            groups.entry(root(c)).or_default().push(i);
        }
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect()
}

/// Euclidean distances of random 2-D points drawn from a few blobs plus
/// uniform background.
pub fn blob_instance(rng: &mut Rng, n: usize) -> DistanceMatrix {
    let n_blobs = 1 + rng.below(4);
    let centers: Vec<(f64, f64)> = (0..n_blobs).map(|_| (rng.uniform(), rng.uniform())).collect();
    let spread = 0.02 + 0.08 * rng.uniform();
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            if rng.uniform() < 0.2 {
                (rng.uniform(), rng.uniform())
            } else {
                let c = centers[rng.below(n_blobs)];
                (c.0 + spread * rng.gaussian(), c.1 + spread * rng.gaussian())
            }
        })
        .collect();
    DistanceMatrix::from_fn(n, |i, j| {
        ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt()
    })
}

/// Rank of every gallery item for a query by descending score, ties to the
/// smaller index, from pairwise comparisons.
pub fn ranks(scores: &[f64]) -> Vec<usize> {
    (0..scores.len())
        .map(|g| {
            (0..scores.len())
                .filter(|&o| scores[o] > scores[g] || (scores[o] == scores[g] && o < g))
                .count()
        })
        .collect()
}

/// AP from ranks: mean over relevant items of (relevant at or above) / rank.
pub fn ap_oracle(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let r = ranks(scores);
    let mut rel_ranks: Vec<usize> = (0..scores.len()).filter(|&g| relevant[g]).map(|g| r[g]).collect();
    if rel_ranks.is_empty() {
        return None;
    }
    rel_ranks.sort_unstable();
    let mut sum = 0.0;
    for (hits, &rank) in rel_ranks.iter().enumerate() {
        sum += (hits + 1) as f64 / (rank + 1) as f64;
    }
    Some(sum / rel_ranks.len() as f64)
}

/// NMI from an explicit contingency table with natural-log entropies and
/// sqrt normalization; 1 for identical partitions when an entropy is zero,
/// 0 for differing ones.
pub fn nmi_oracle(u: &[i64], v: &[i64]) -> f64 {
    let n = u.len() as f64;
    let us: Vec<i64> = u.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let vs: Vec<i64> = v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut table = vec![vec![0usize; vs.len()]; us.len()];
    for (a, b) in u.iter().zip(v) {
        let i = us.iter().position(|x| x == a).unwrap();
        let j = vs.iter().position(|x| x == b).unwrap();
        table[i][j] += 1;
    }
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col: Vec<f64> = (0..vs.len()).map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64).collect();
    let h = |m: &[f64]| -m.iter().map(|&c| (c / n) * (c / n).ln()).sum::<f64>();
    let (hu, hv) = (h(&row), h(&col));
    if hu == 0.0 || hv == 0.0 {
        let same = (0..u.len()).all(|i| (0..u.len()).all(|j| (u[i] == u[j]) == (v[i] == v[j])));
        return if same { 1.0 } else { 0.0 };
    }
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += (c / n) * (n * c / (row[i] * col[j])).ln();
            }
        }
    }
    mi / (hu * hv).sqrt()
}

pub fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v = rng.gaussian_vec(d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

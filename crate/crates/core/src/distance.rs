//! Pairwise cosine distances and the k-reciprocal Jaccard distance.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::feature::dot;

/// Symmetric `n x n` matrix with a zero diagonal, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds a matrix from `f(i, j)` evaluated on the upper triangle.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        DistanceMatrix { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Indices of the `k` nearest points to `i`, excluding `i`, ordered by
    /// distance with ties broken by smaller index.
    pub fn knn(&self, i: usize, k: usize) -> Vec<usize> {
        let row = self.row(i);
        let mut idx: Vec<usize> = (0..self.n).filter(|&j| j != i).collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// `d(i, j) = 1 - <f_i, f_j>`, clamped to `[0, 2]`.
pub fn cosine_distance_matrix<F: AsRef<[f64]>>(features: &[F]) -> DistanceMatrix {
    DistanceMatrix::from_fn(features.len(), |i, j| {
        (1.0 - dot(features[i].as_ref(), features[j].as_ref())).clamp(0.0, 2.0)
    })
}

/// Neighbourhood size used for desk-scale data: `min(30, ceil(n / 10))`,
/// kept inside `1..n`.
pub fn default_k(n: usize) -> usize {
    30usize.min(n.div_ceil(10)).min(n.saturating_sub(1)).max(1)
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k < 1 || k >= n {
        return Err(Error::Config(format!("k = {k} outside 1..{n}")));
    }
    Ok(())
}

fn reciprocal(knn: &[Vec<usize>], i: usize) -> Vec<usize> {
    let mut set: Vec<usize> = knn[i]
        .iter()
        .copied()
        .filter(|&j| knn[j].contains(&i))
        .collect();
    set.push(i);
    set.sort_unstable();
    set
}

/// `R(i, k) = {j : j in kNN(i, k) and i in kNN(j, k)} ∪ {i}`, each sorted.
pub fn k_reciprocal_sets(dist: &DistanceMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    check_k(dist.len(), k)?;
    let knn: Vec<Vec<usize>> = (0..dist.len()).map(|i| dist.knn(i, k)).collect();
    Ok((0..dist.len()).map(|i| reciprocal(&knn, i)).collect())
}

/// k-reciprocal sets with local query expansion: for each `q` in `R(i, k)`,
/// `R(q, ceil(k/2))` is merged in when more than two thirds of it already
/// lies in `R(i, k)`.
pub fn k_reciprocal_sets_expanded(dist: &DistanceMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let base = k_reciprocal_sets(dist, k)?;
    let half = k.div_ceil(2).max(1);
    let small = k_reciprocal_sets(dist, half)?;
    Ok(base
        .iter()
        .map(|r| {
            let mut out: BTreeSet<usize> = r.iter().copied().collect();
            for &q in r {
                let cand = &small[q];
                let overlap = cand.iter().filter(|c| r.binary_search(c).is_ok()).count();
                if 3 * overlap > 2 * cand.len() {
                    out.extend(cand);
                }
            }
            out.into_iter().collect()
        })
        .collect())
}

/// `d_J(i, j) = 1 - |R(i) ∩ R(j)| / |R(i) ∪ R(j)|`, zero diagonal.
pub fn jaccard_distance_matrix(sets: &[Vec<usize>]) -> DistanceMatrix {
    let n = sets.len();
    debug_assert!(sets.iter().enumerate().all(|(i, s)| s.contains(&i)));
    let mut postings: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, s) in sets.iter().enumerate() {
        for &e in s {
            postings[e].push(i);
        }
    }
    let mut inter = vec![0u32; n * n];
    for list in &postings {
        for &a in list {
            for &b in list {
                inter[a * n + b] += 1;
            }
        }
    }
    DistanceMatrix::from_fn(n, |i, j| {
        let c = inter[i * n + j] as f64;
        let union = sets[i].len() as f64 + sets[j].len() as f64 - c;
        1.0 - c / union
    })
}

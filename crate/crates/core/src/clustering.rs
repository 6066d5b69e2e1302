//! DBSCAN over a precomputed distance matrix.
//!
//! A point is core when at least `min_pts` *other* points lie within `eps`.
//! Clusters are the connected components of the core graph; ids follow the
//! smallest core index of each component. A non-core point within `eps` of
//! some core joins the cluster of the lowest-index such core, otherwise it
//! is noise. The result is fully deterministic.

use std::collections::BTreeSet;

use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 0.6;
pub const DEFAULT_DELTA: f64 = 0.02;
pub const DEFAULT_MIN_PTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
    pub delta: f64,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams {
            eps: DEFAULT_EPS,
            min_pts: DEFAULT_MIN_PTS,
            delta: DEFAULT_DELTA,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.min_pts < 2 {
            return Err(Error::Config(format!("min_pts must be >= 2, got {}", self.min_pts)));
        }
        if !(self.delta >= 0.0) || self.eps - self.delta <= 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= delta < eps, got eps {} delta {}",
                self.eps, self.delta
            )));
        }
        Ok(())
    }

    pub fn with_eps(self, eps: f64) -> Self {
        DbscanParams { eps, ..self }
    }
}

/// Per-point cluster id (dense from 0) or `None` for noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPartition {
    labels: Vec<Option<usize>>,
    n_clusters: usize,
}

impl ClusterPartition {
    pub fn from_labels(labels: Vec<Option<usize>>) -> Self {
        let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
        ClusterPartition { labels, n_clusters }
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn noise(&self) -> BTreeSet<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    /// Members of each cluster, ascending, indexed by cluster id.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    /// The partition as a set of member sets, ignoring ids.
    pub fn as_set_of_sets(&self) -> BTreeSet<Vec<usize>> {
        self.members().into_iter().filter(|m| !m.is_empty()).collect()
    }
}

pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_pts: usize) -> ClusterPartition {
    let n = dist.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let row = dist.row(i);
            (0..n).filter(|&j| j != i && row[j] <= eps).collect()
        })
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(next);
        stack.push(seed);
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if core[q] && labels[q].is_none() {
                    labels[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            // neighbour lists are ascending, so the first core is the lowest index
            labels[i] = neighbours[i].iter().find(|&&j| core[j]).and_then(|&j| labels[j]);
        }
    }
    ClusterPartition {
        labels,
        n_clusters: next,
    }
}

pub fn dbscan_with(dist: &DistanceMatrix, params: &DbscanParams) -> ClusterPartition {
    dbscan(dist, params.eps, params.min_pts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreeScale {
    pub main: ClusterPartition,
    pub loose: ClusterPartition,
    pub tight: ClusterPartition,
}

/// DBSCAN at `eps`, `eps + delta` and `eps - delta` with the same `min_pts`.
pub fn cluster_at_three_scales(dist: &DistanceMatrix, params: &DbscanParams) -> Result<ThreeScale> {
    params.validate()?;
    let main = dbscan(dist, params.eps, params.min_pts);
    if params.delta == 0.0 {
        return Ok(ThreeScale {
            loose: main.clone(),
            tight: main.clone(),
            main,
        });
    }
    Ok(ThreeScale {
        loose: dbscan(dist, params.eps + params.delta, params.min_pts),
        tight: dbscan(dist, params.eps - params.delta, params.min_pts),
        main,
    })
}

/// True when every cluster of `fine` lies inside a single cluster of
/// `coarse` and the noise of `coarse` is a subset of the noise of `fine`.
pub fn is_nested(fine: &ClusterPartition, coarse: &ClusterPartition) -> bool {
    let clusters_ok = fine.members().iter().all(|m| {
        let first = m.first().and_then(|&i| coarse.label(i));
        first.is_some() && m.iter().all(|&i| coarse.label(i) == first)
    });
    clusters_ok && coarse.noise().is_subset(&fine.noise())
}

use std::ops::Deref;

use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariant of encoder outputs and memory rows.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// An embedding vector. Encoder outputs and memory entries are kept at unit
/// L2 norm; the type itself does not enforce it so the literal (un-normalized)
/// memory update stays expressible.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    /// Normalizes `values`; a zero or non-finite norm is a numeric error.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let mut f = FeatureVector(values);
        f.normalize()?;
        Ok(f)
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Numeric(format!("cannot normalize vector with norm {n}")));
        }
        self.0.iter_mut().for_each(|x| *x /= n);
        Ok(())
    }

    /// Normalizes, nudging an exactly-zero vector along the first axis so the
    /// result is always a unit vector. Returns true when the jitter was needed.
    pub fn normalize_or_jitter(&mut self) -> bool {
        let n = self.norm();
        if n.is_finite() && n > 0.0 {
            self.0.iter_mut().for_each(|x| *x /= n);
            return false;
        }
        log::warn!("degenerate zero-norm prototype, jittering along axis 0");
        self.0.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = self.0.first_mut() {
            *first = 1.0;
        }
        true
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        FeatureVector(v)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Element-wise mean of equally sized rows. Panics on an empty iterator.
pub fn mean<'a, I>(rows: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for row in rows {
        if acc.is_empty() {
            acc = vec![0.0; row.len()];
        }
        acc.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        count += 1;
    }
    assert!(count > 0, "mean of zero rows");
    acc.iter_mut().for_each(|a| *a /= count as f64);
    acc
}

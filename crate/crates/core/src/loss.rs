//! Unified contrastive loss over source class centroids, target cluster
//! centroids and target outlier instances, with its gradient with respect to
//! the query feature. Prototypes are constants (no gradient).

use crate::error::{Error, Result};
use crate::feature::{dot, FeatureVector};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    SourceClass,
    TargetCluster,
    TargetOutlier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositiveRef {
    pub segment: Segment,
    pub index: usize,
}

impl PositiveRef {
    pub fn new(segment: Segment, index: usize) -> Self {
        PositiveRef { segment, index }
    }
}

/// Which kind of training sample a query feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Source,
    TargetClustered,
    TargetOutlier,
}

impl SampleKind {
    fn segment(self) -> Segment {
        match self {
            SampleKind::Source => Segment::SourceClass,
            SampleKind::TargetClustered => Segment::TargetCluster,
            SampleKind::TargetOutlier => Segment::TargetOutlier,
        }
    }
}

/// Loss switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossOptions {
    /// When false, each query only contrasts against its own segment.
    pub unified: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { unified: true }
    }
}

/// Ordered prototypes `[w_1..w_ns] ++ [c_1..c_nc] ++ [v_1..v_no]` and the
/// temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    classes: Vec<FeatureVector>,
    clusters: Vec<FeatureVector>,
    outliers: Vec<FeatureVector>,
    tau: f64,
}

impl PrototypeBank {
    pub fn new(
        classes: Vec<FeatureVector>,
        clusters: Vec<FeatureVector>,
        outliers: Vec<FeatureVector>,
        tau: f64,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        let dims: Vec<usize> = classes
            .iter()
            .chain(&clusters)
            .chain(&outliers)
            .map(FeatureVector::dim)
            .collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Contract("prototypes of differing dimension".into()));
        }
        Ok(PrototypeBank {
            classes,
            clusters,
            outliers,
            tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `(n_s, n_c, n_o)`.
    pub fn segment_lens(&self) -> (usize, usize, usize) {
        (self.classes.len(), self.clusters.len(), self.outliers.len())
    }

    pub fn len(&self) -> usize {
        self.classes.len() + self.clusters.len() + self.outliers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, s: Segment) -> &[FeatureVector] {
        match s {
            Segment::SourceClass => &self.classes,
            Segment::TargetCluster => &self.clusters,
            Segment::TargetOutlier => &self.outliers,
        }
    }

    pub fn get(&self, pos: PositiveRef) -> Option<&FeatureVector> {
        self.segment(pos.segment).get(pos.index)
    }

    /// All prototypes in bank order.
    pub fn iter(&self) -> impl Iterator<Item = &FeatureVector> {
        self.classes.iter().chain(&self.clusters).chain(&self.outliers)
    }

    /// The bank without its source segment, for training without source data.
    pub fn unsupervised(&self) -> PrototypeBank {
        PrototypeBank {
            classes: Vec::new(),
            clusters: self.clusters.clone(),
            outliers: self.outliers.clone(),
            tau: self.tau,
        }
    }
}

fn check(f: &[f64], bank: &PrototypeBank, pos: PositiveRef) -> Result<()> {
    let z = bank.get(pos).ok_or_else(|| {
        Error::Contract(format!(
            "positive {:?}[{}] outside bank segments {:?}",
            pos.segment,
            pos.index,
            bank.segment_lens()
        ))
    })?;
    if z.dim() != f.len() {
        return Err(Error::Contract(format!(
            "query of dimension {} against prototypes of dimension {}",
            f.len(),
            z.dim()
        )));
    }
    Ok(())
}

/// Loss and `dL/df` for one query.
pub fn loss_and_grad(
    f: &[f64],
    bank: &PrototypeBank,
    pos: PositiveRef,
    opts: LossOptions,
) -> Result<(f64, Vec<f64>)> {
    check(f, bank, pos)?;
    let protos: Vec<&FeatureVector> = if opts.unified {
        bank.iter().collect()
    } else {
        bank.segment(pos.segment).iter().collect()
    };
    let inv_tau = 1.0 / bank.tau;
    let logits: Vec<f64> = protos.iter().map(|z| dot(f, z) * inv_tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let z_pos = bank.get(pos).expect("checked");
    let pos_logit = dot(f, z_pos) * inv_tau;
    let loss = (max + total.ln() - pos_logit).max(0.0);

    let mut grad = vec![0.0; f.len()];
    for (z, w) in protos.iter().zip(&weights) {
        let p = w / total;
        grad.iter_mut().zip(z.iter()).for_each(|(g, zi)| *g += p * zi);
    }
    grad.iter_mut()
        .zip(z_pos.iter())
        .for_each(|(g, zi)| *g = (*g - zi) * inv_tau);
    Ok((loss, grad))
}

/// `-log softmax` of the positive among all prototypes.
pub fn unified_loss(f: &[f64], bank: &PrototypeBank, pos: PositiveRef) -> Result<f64> {
    loss_and_grad(f, bank, pos, LossOptions::default()).map(|(l, _)| l)
}

/// `(1/tau) (sum_j p_j z_j - z+)`.
pub fn unified_loss_grad(f: &[f64], bank: &PrototypeBank, pos: PositiveRef) -> Result<Vec<f64>> {
    loss_and_grad(f, bank, pos, LossOptions::default()).map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean: f64,
    /// Per-feature gradients of the mean loss.
    pub grads: Vec<Vec<f64>>,
}

/// Mean loss over a batch; gradients are scaled by `1 / batch`.
pub fn batch_loss<F: AsRef<[f64]>>(
    features: &[F],
    bank: &PrototypeBank,
    positives: &[PositiveRef],
    kinds: &[SampleKind],
    opts: LossOptions,
) -> Result<BatchLoss> {
    if features.len() != positives.len() || features.len() != kinds.len() {
        return Err(Error::Contract(format!(
            "batch of {} features with {} positives and {} kinds",
            features.len(),
            positives.len(),
            kinds.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let scale = 1.0 / features.len() as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for ((f, pos), kind) in features.iter().zip(positives).zip(kinds) {
        if kind.segment() != pos.segment {
            return Err(Error::Contract(format!(
                "{kind:?} sample with positive in {:?}",
                pos.segment
            )));
        }
        let (l, mut g) = loss_and_grad(f.as_ref(), bank, *pos, opts)?;
        sum += l;
        g.iter_mut().for_each(|x| *x *= scale);
        grads.push(g);
    }
    let mean = sum * scale;
    if !mean.is_finite() {
        return Err(Error::Numeric(format!("non-finite batch loss {mean}")));
    }
    Ok(BatchLoss { mean, grads })
}

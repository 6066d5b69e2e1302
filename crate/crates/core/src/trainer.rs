//! The alternating training loop.
//!
//! Every epoch first re-clusters the target instance memory (cosine distance,
//! k-reciprocal Jaccard distance, DBSCAN at three scales, reliability
//! filtering) and then runs mini-batches of encode, unified contrastive loss,
//! backpropagation, Adam and memory momentum updates. The pseudo labels stay
//! frozen within an epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::clustering::{cluster_at_three_scales, DbscanParams, ThreeScale};
use crate::config::{self, KvConfig};
use crate::data::{split_by_pseudo_label, Assignment, Domain, PseudoLabelState, SampleRecord};
use crate::distance::{
    cosine_distance_matrix, default_k, jaccard_distance_matrix, k_reciprocal_sets,
    k_reciprocal_sets_expanded,
};
use crate::encoder::{self, scheduled_lr, AdamState, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{self, EvalResult, NmiScores, RetrievalItem, RetrievalSplit};
use crate::feature::FeatureVector;
use crate::loss::{self, LossOptions, PositiveRef, PrototypeBank, SampleKind, Segment};
use crate::memory::{HybridMemory, DEFAULT_MOMENTUM};
use crate::rng::Rng;
use crate::selfpaced::{self, Criteria, ReliabilityScores, DEFAULT_KEEP_FRACTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Labelled source plus unlabelled target.
    Uda,
    /// Target only; the loss has no source segment.
    Unsupervised,
    /// Target ground-truth identities replace clustering. Source data is
    /// used when supplied.
    Oracle,
}

impl Mode {
    pub fn tag(self) -> &'static str {
        match self {
            Mode::Uda => "uda",
            Mode::Unsupervised => "unsup",
            Mode::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uda" => Ok(Mode::Uda),
            "unsup" | "unsupervised" => Ok(Mode::Unsupervised),
            "oracle" => Ok(Mode::Oracle),
            _ => Err(format!("unknown mode {s:?} (expected uda, unsup or oracle)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    /// `None` means `ceil(n_target / target_slots)`.
    pub iters_per_epoch: Option<usize>,
    pub lr: f64,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub m_s: f64,
    pub m_t: f64,
    pub renorm: bool,
    pub dbscan: DbscanParams,
    /// `None` means [`default_k`].
    pub k: Option<usize>,
    pub expand: bool,
    pub keep_fraction: f64,
    pub classes_per_batch: usize,
    pub instances_per_class: usize,
    pub target_slots: usize,
    /// Hidden width; 0 gives a single affine layer.
    pub hidden: usize,
    pub embed_dim: usize,
    pub criteria: Criteria,
    pub unified: bool,
    /// Train on target clusters only; outliers leave the loss and the batches.
    pub drop_outliers: bool,
    pub pretrain_epochs: usize,
    pub query_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Uda,
            seed: 1,
            epochs: 50,
            iters_per_epoch: None,
            lr: AdamState::DEFAULT_LR,
            lr_gamma: 0.1,
            weight_decay: AdamState::DEFAULT_WEIGHT_DECAY,
            tau: loss::DEFAULT_TEMPERATURE,
            m_s: DEFAULT_MOMENTUM,
            m_t: DEFAULT_MOMENTUM,
            renorm: true,
            dbscan: DbscanParams::default(),
            k: None,
            expand: false,
            keep_fraction: DEFAULT_KEEP_FRACTION,
            classes_per_batch: 16,
            instances_per_class: 4,
            target_slots: 64,
            hidden: 64,
            embed_dim: 32,
            criteria: Criteria::ALL,
            unified: true,
            drop_outliers: false,
            pretrain_epochs: 0,
            query_fraction: 0.25,
        }
    }
}

/// Documented keys of the run config file, with their defaults.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("mode", "uda | unsup | oracle (default uda)"),
    ("seed", "RNG seed (default 1)"),
    ("epochs", "training epochs (default 50)"),
    ("iters_per_epoch", "mini-batches per epoch, 0 = ceil(n_target / target_slots) (default 0)"),
    ("lr", "initial Adam learning rate (default 0.00035)"),
    ("lr_gamma", "decay factor applied every 20/50 of the run (default 0.1)"),
    ("weight_decay", "decoupled weight decay (default 0.0005)"),
    ("tau", "softmax temperature (default 0.05)"),
    ("m_s", "source centroid momentum (default 0.2)"),
    ("m_t", "target instance momentum (default 0.2)"),
    ("renorm", "re-normalize memory rows after updates (default true)"),
    ("eps", "DBSCAN neighbour distance d (default 0.6)"),
    ("delta", "loose/tight offset on d (default 0.02)"),
    ("min_pts", "DBSCAN core neighbour count (default 4)"),
    ("k", "k-reciprocal neighbourhood, 0 = min(30, ceil(n/10)) (default 0)"),
    ("expand", "half-k query expansion of k-reciprocal sets (default false)"),
    ("keep_fraction", "share of epoch-0 points above the independence threshold (default 0.9)"),
    ("classes_per_batch", "source classes per batch P (default 16)"),
    ("instances_per_class", "samples per class or cluster K (default 4)"),
    ("target_slots", "target samples per batch (default 64)"),
    ("hidden", "encoder hidden width, 0 = linear (default 64)"),
    ("embed_dim", "embedding dimension D (default 32)"),
    ("use_indep", "independence criterion (default true)"),
    ("use_comp", "compactness criterion (default true)"),
    ("unified", "contrast against all prototype families (default true)"),
    ("drop_outliers", "train on clusters only (default false)"),
    ("pretrain_epochs", "source-only warm-up epochs (default 0)"),
    ("query_fraction", "per-identity query share at evaluation (default 0.25)"),
];

impl TrainConfig {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let iters: usize = kv.take("iters_per_epoch", 0)?;
        let k: usize = kv.take("k", 0)?;
        let cfg = TrainConfig {
            mode: kv.take("mode", d.mode)?,
            seed: kv.take("seed", d.seed)?,
            epochs: kv.take("epochs", d.epochs)?,
            iters_per_epoch: (iters > 0).then_some(iters),
            lr: kv.take("lr", d.lr)?,
            lr_gamma: kv.take("lr_gamma", d.lr_gamma)?,
            weight_decay: kv.take("weight_decay", d.weight_decay)?,
            tau: kv.take("tau", d.tau)?,
            m_s: kv.take("m_s", d.m_s)?,
            m_t: kv.take("m_t", d.m_t)?,
            renorm: kv.take("renorm", d.renorm)?,
            dbscan: DbscanParams {
                eps: kv.take("eps", d.dbscan.eps)?,
                delta: kv.take("delta", d.dbscan.delta)?,
                min_pts: kv.take("min_pts", d.dbscan.min_pts)?,
            },
            k: (k > 0).then_some(k),
            expand: kv.take("expand", d.expand)?,
            keep_fraction: kv.take("keep_fraction", d.keep_fraction)?,
            classes_per_batch: kv.take("classes_per_batch", d.classes_per_batch)?,
            instances_per_class: kv.take("instances_per_class", d.instances_per_class)?,
            target_slots: kv.take("target_slots", d.target_slots)?,
            hidden: kv.take("hidden", d.hidden)?,
            embed_dim: kv.take("embed_dim", d.embed_dim)?,
            criteria: Criteria {
                independence: kv.take("use_indep", true)?,
                compactness: kv.take("use_comp", true)?,
            },
            unified: kv.take("unified", d.unified)?,
            drop_outliers: kv.take("drop_outliers", d.drop_outliers)?,
            pretrain_epochs: kv.take("pretrain_epochs", d.pretrain_epochs)?,
            query_fraction: kv.take("query_fraction", d.query_fraction)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved configuration in `key = value` form.
    pub fn to_text(&self) -> String {
        config::render([
            ("mode", self.mode.tag().to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("iters_per_epoch", self.iters_per_epoch.unwrap_or(0).to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("lr_gamma", format!("{:?}", self.lr_gamma)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("tau", format!("{:?}", self.tau)),
            ("m_s", format!("{:?}", self.m_s)),
            ("m_t", format!("{:?}", self.m_t)),
            ("renorm", self.renorm.to_string()),
            ("eps", format!("{:?}", self.dbscan.eps)),
            ("delta", format!("{:?}", self.dbscan.delta)),
            ("min_pts", self.dbscan.min_pts.to_string()),
            ("k", self.k.unwrap_or(0).to_string()),
            ("expand", self.expand.to_string()),
            ("keep_fraction", format!("{:?}", self.keep_fraction)),
            ("classes_per_batch", self.classes_per_batch.to_string()),
            ("instances_per_class", self.instances_per_class.to_string()),
            ("target_slots", self.target_slots.to_string()),
            ("hidden", self.hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("use_indep", self.criteria.independence.to_string()),
            ("use_comp", self.criteria.compactness.to_string()),
            ("unified", self.unified.to_string()),
            ("drop_outliers", self.drop_outliers.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("query_fraction", format!("{:?}", self.query_fraction)),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.dbscan.validate()?;
        if !(self.lr > 0.0) || !(self.lr_gamma > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and lr_gamma must be > 0, weight_decay >= 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(0.0..=1.0).contains(&self.m_s) || !(0.0..=1.0).contains(&self.m_t) {
            return bad("momenta must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            return bad("keep_fraction must lie in [0, 1]");
        }
        if self.classes_per_batch == 0 || self.instances_per_class == 0 || self.target_slots == 0 {
            return bad("batch counts must be positive");
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be >= 2");
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return bad("query_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        if self.hidden == 0 {
            vec![input_dim, self.embed_dim]
        } else {
            vec![input_dim, self.hidden, self.embed_dim]
        }
    }
}

/// Per-epoch diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub n_clusters_raw: usize,
    pub n_clusters_kept: usize,
    pub n_outliers: usize,
    pub mean_r_indep: Option<f64>,
    pub mean_r_comp: Option<f64>,
    pub alpha: Option<f64>,
    pub nmi: Option<NmiScores>,
}

pub const REPORT_HEADER: &str = "epoch,lr,loss,n_clusters_raw,n_clusters_kept,n_outliers,mean_r_indep,mean_r_comp,alpha,nmi_clustered,nmi_all";

impl EpochReport {
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:?}"));
        format!(
            "{},{:?},{:?},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss,
            self.n_clusters_raw,
            self.n_clusters_kept,
            self.n_outliers,
            opt(self.mean_r_indep),
            opt(self.mean_r_comp),
            opt(self.alpha),
            opt(self.nmi.map(|n| n.clustered)),
            opt(self.nmi.map(|n| n.all)),
        )
    }
}

pub fn reports_csv(reports: &[EpochReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Sample indices chosen for one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchPlan {
    /// `(source sample index, dense class)`.
    pub source: Vec<(usize, usize)>,
    /// Target instance indices; may repeat.
    pub target: Vec<usize>,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.source.is_empty() && self.target.is_empty()
    }
}

fn pick(rng: &mut Rng, members: &[usize], k: usize, out: &mut Vec<usize>) {
    if members.len() >= k {
        let mut pool = members.to_vec();
        for i in 0..k {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        out.extend_from_slice(&pool[..k]);
    } else {
        out.extend((0..k).map(|_| members[rng.below(members.len())]));
    }
}

/// Source side: `p` classes drawn without replacement, `k` samples each
/// (with replacement when a class is smaller than `k`).
pub fn sample_source(rng: &mut Rng, groups: &[Vec<usize>], p: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if groups.len() < p {
        return Err(Error::Config(format!(
            "{} source classes, but {p} are needed per batch",
            groups.len()
        )));
    }
    let mut classes: Vec<usize> = (0..groups.len()).collect();
    for i in 0..p {
        let j = i + rng.below(classes.len() - i);
        classes.swap(i, j);
    }
    let mut out = Vec::with_capacity(p * k);
    for &c in &classes[..p] {
        let mut picked = Vec::with_capacity(k);
        pick(rng, &groups[c], k, &mut picked);
        out.extend(picked.into_iter().map(|s| (s, c)));
    }
    Ok(out)
}

/// Target side: pseudo classes are visited in shuffled rounds; a cluster
/// contributes `k` members, an outlier its single sample, until `slots` are
/// filled. Further rounds only happen when the pool holds a cluster, so an
/// all-outlier pool never repeats a sample.
pub fn sample_target(
    rng: &mut Rng,
    state: &PseudoLabelState,
    k: usize,
    slots: usize,
    include_outliers: bool,
) -> Result<Vec<usize>> {
    if state.is_empty() {
        return Err(Error::Data("empty target set".into()));
    }
    let split = split_by_pseudo_label(state);
    enum Pseudo<'a> {
        Cluster(&'a [usize]),
        Instance(usize),
    }
    let mut pool: Vec<Pseudo> = split.clusters.values().map(|m| Pseudo::Cluster(m)).collect();
    if include_outliers {
        pool.extend(split.outliers.iter().map(|&i| Pseudo::Instance(i)));
    }
    let has_cluster = !split.clusters.is_empty();
    let mut out = Vec::with_capacity(slots);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    while out.len() < slots && !pool.is_empty() {
        rng.shuffle(&mut order);
        for &o in &order {
            let room = slots - out.len();
            if room == 0 {
                break;
            }
            match pool[o] {
                Pseudo::Cluster(members) => {
                    let mut picked = Vec::with_capacity(k);
                    pick(rng, members, k, &mut picked);
                    picked.truncate(room);
                    out.extend(picked);
                }
                Pseudo::Instance(i) => out.push(i),
            }
        }
        if !has_cluster {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct SourceData {
    inputs: Vec<Vec<f64>>,
    classes: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl SourceData {
    fn new(records: &[SampleRecord]) -> Result<Self> {
        let mut dense: BTreeMap<u32, usize> = BTreeMap::new();
        for r in records {
            let l = r
                .eval_label()
                .ok_or_else(|| Error::Data("source record without label".into()))?;
            let next = dense.len();
            dense.entry(l).or_insert(next);
        }
        // dense ids in label order
        for (i, v) in dense.values_mut().enumerate() {
            *v = i;
        }
        let classes: Vec<usize> = records
            .iter()
            .map(|r| dense[&r.eval_label().expect("checked")])
            .collect();
        let mut groups = vec![Vec::new(); dense.len()];
        for (i, c) in classes.iter().enumerate() {
            groups[*c].push(i);
        }
        Ok(SourceData {
            inputs: records.iter().map(|r| r.input.clone()).collect(),
            classes,
            groups,
        })
    }
}

/// Outcome of the clustering step before an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Relabel {
    pub state: PseudoLabelState,
    pub n_clusters_raw: usize,
    pub mean_r_indep: Option<f64>,
    pub mean_r_comp: Option<f64>,
}

/// Everything the clustering step computes for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStep {
    /// `None` when there are fewer than two points.
    pub scales: Option<ThreeScale>,
    pub scores: Option<ReliabilityScores>,
    pub alpha: Option<f64>,
    pub state: PseudoLabelState,
}

/// Cosine distance, k-reciprocal Jaccard distance, DBSCAN at three scales,
/// reliability scores and filtering. `alpha` is calibrated from these scores
/// when it is `None` and the independence criterion is on.
pub fn cluster_step(features: &[FeatureVector], cfg: &TrainConfig, alpha: Option<f64>) -> Result<ClusterStep> {
    let n = features.len();
    if n < 2 {
        return Ok(ClusterStep {
            scales: None,
            scores: None,
            alpha,
            state: PseudoLabelState::all_outliers(n),
        });
    }
    let cosine = cosine_distance_matrix(features);
    let k = cfg.k.unwrap_or_else(|| default_k(n)).min(n - 1);
    let sets = if cfg.expand {
        k_reciprocal_sets_expanded(&cosine, k)?
    } else {
        k_reciprocal_sets(&cosine, k)?
    };
    let jaccard = jaccard_distance_matrix(&sets);
    let scales = cluster_at_three_scales(&jaccard, &cfg.dbscan)?;
    let scores = selfpaced::score(&scales);
    let mut alpha = alpha;
    if alpha.is_none() && cfg.criteria.independence {
        let clustered = scores.clustered_indep();
        let a = selfpaced::calibrate_alpha(&clustered, cfg.keep_fraction)?;
        let fraction = clustered.len() as f64 / n as f64;
        if fraction < 0.1 {
            log::warn!(
                "only {:.1}% of target instances clustered before the first epoch; alpha = {a} is frozen anyway",
                100.0 * fraction
            );
        }
        alpha = Some(a);
    }
    let state = selfpaced::filter_partition(
        &scales.main,
        &scores,
        alpha.unwrap_or(f64::NEG_INFINITY),
        cfg.criteria,
    )?;
    Ok(ClusterStep {
        scales: Some(scales),
        scores: Some(scores),
        alpha,
        state,
    })
}

/// Owns all mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    source: Option<SourceData>,
    target_inputs: Vec<Vec<f64>>,
    target_eval_labels: Option<Vec<u32>>,
    params: EncoderParams,
    adam: AdamState,
    memory: HybridMemory,
    rng: Rng,
    alpha: Option<f64>,
    state: PseudoLabelState,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, source: &[SampleRecord], target: &[SampleRecord]) -> Result<Self> {
        cfg.validate()?;
        if target.is_empty() {
            return Err(Error::Data("no target records".into()));
        }
        if target.iter().any(|r| r.domain != Domain::Target) || source.iter().any(|r| r.domain != Domain::Source) {
            return Err(Error::Data("records passed under the wrong domain".into()));
        }
        let use_source = match cfg.mode {
            Mode::Uda => {
                if source.is_empty() {
                    return Err(Error::Config("uda mode needs source records".into()));
                }
                true
            }
            Mode::Unsupervised => false,
            Mode::Oracle => !source.is_empty(),
        };
        let target_eval_labels: Option<Vec<u32>> = target.iter().map(SampleRecord::eval_label).collect();
        if cfg.mode == Mode::Oracle && target_eval_labels.is_none() {
            return Err(Error::Config("oracle mode needs ground-truth labels on every target record".into()));
        }
        let input_dim = target[0].input.len();
        if source.iter().chain(target).any(|r| r.input.len() != input_dim) {
            return Err(Error::Data("source and target input dimensions differ".into()));
        }
        let source = if use_source { Some(SourceData::new(source)?) } else { None };

        let mut rng = Rng::seeded(cfg.seed);
        let params = EncoderParams::init(&cfg.layer_sizes(input_dim), &mut rng)?;
        let adam = AdamState::new(&params, cfg.lr, cfg.weight_decay);
        let n_t = target.len();
        let mut trainer = Trainer {
            memory: HybridMemory::init(&[], 0, Vec::new(), cfg.m_s, cfg.m_t)?,
            cfg,
            source,
            target_inputs: target.iter().map(|r| r.input.clone()).collect(),
            target_eval_labels,
            params,
            adam,
            rng,
            alpha: None,
            state: PseudoLabelState::all_outliers(n_t),
            epoch: 0,
        };
        if trainer.cfg.pretrain_epochs > 0 {
            trainer.pretrain()?;
        }
        trainer.memory = trainer.fresh_memory()?;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn memory(&self) -> &HybridMemory {
        &self.memory
    }

    pub fn state(&self) -> &PseudoLabelState {
        &self.state
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn fresh_memory(&self) -> Result<HybridMemory> {
        let target = encoder::encode(&self.params, &self.target_inputs)?;
        let (source, n_classes) = match &self.source {
            Some(src) => {
                let feats = encoder::encode(&self.params, &src.inputs)?;
                (feats.into_iter().zip(src.classes.iter().copied()).collect(), src.groups.len())
            }
            None => (Vec::new(), 0),
        };
        let mut memory = HybridMemory::init(&source, n_classes, target, self.cfg.m_s, self.cfg.m_t)?;
        memory.renorm = self.cfg.renorm;
        Ok(memory)
    }

    fn iters_per_epoch(&self) -> usize {
        self.cfg
            .iters_per_epoch
            .unwrap_or_else(|| self.target_inputs.len().div_ceil(self.cfg.target_slots))
    }

    /// Source-only warm-up against the class centroids; the memory is
    /// rebuilt from the warmed-up encoder afterwards.
    fn pretrain(&mut self) -> Result<()> {
        let Some(src) = self.source.clone() else {
            return Err(Error::Config("pretraining needs source records".into()));
        };
        self.memory = self.fresh_memory()?;
        let iters = src.inputs.len().div_ceil(self.cfg.classes_per_batch * self.cfg.instances_per_class);
        for _ in 0..self.cfg.pretrain_epochs {
            for _ in 0..iters {
                let plan = BatchPlan {
                    source: sample_source(
                        &mut self.rng,
                        &src.groups,
                        self.cfg.classes_per_batch,
                        self.cfg.instances_per_class,
                    )?,
                    target: Vec::new(),
                };
                self.step(&plan)?;
            }
        }
        Ok(())
    }

    /// Clustering, scoring and filtering of the current instance memory.
    pub fn relabel(&mut self) -> Result<Relabel> {
        if self.cfg.mode == Mode::Oracle {
            let labels = self.target_eval_labels.as_ref().expect("checked in new");
            let raw: Vec<Option<usize>> = labels.iter().map(|&l| Some(l as usize)).collect();
            let state = PseudoLabelState::from_raw_labels(&raw);
            return Ok(Relabel {
                n_clusters_raw: state.n_clusters(),
                state,
                mean_r_indep: None,
                mean_r_comp: None,
            });
        }
        let step = cluster_step(self.memory.instances(), &self.cfg, self.alpha)?;
        self.alpha = step.alpha;
        Ok(Relabel {
            n_clusters_raw: step.scales.as_ref().map_or(0, |s| s.main.n_clusters()),
            mean_r_indep: step.scores.as_ref().and_then(|s| s.mean_indep()),
            mean_r_comp: step.scores.as_ref().and_then(|s| s.mean_comp()),
            state: step.state,
        })
    }

    /// Prototype bank for the current state: class centroids, cluster
    /// centroids recomputed from `v`, and the outliers' own `v` rows.
    pub fn build_bank(&self) -> Result<(PrototypeBank, Vec<Option<usize>>)> {
        let classes = self.memory.class_centroids().to_vec();
        let clusters = self.memory.cluster_centroids();
        // position of each outlier instance inside the outlier segment
        let mut slot = vec![None; self.state.len()];
        let mut outliers = Vec::new();
        if !self.cfg.drop_outliers {
            for (i, a) in self.state.assignments().iter().enumerate() {
                if *a == Assignment::Outlier {
                    slot[i] = Some(outliers.len());
                    outliers.push(self.memory.instances()[i].clone());
                }
            }
        }
        Ok((PrototypeBank::new(classes, clusters, outliers, self.cfg.tau)?, slot))
    }

    fn step(&mut self, plan: &BatchPlan) -> Result<f64> {
        let (bank, outlier_slot) = self.build_bank()?;
        #[cfg(debug_assertions)]
        for (c, z) in bank.segment(Segment::TargetCluster).iter().enumerate() {
            let members = &self.memory.clusters()[&c];
            let mean = crate::feature::mean(members.iter().map(|&i| self.memory.instances()[i].as_slice()));
            let brute = FeatureVector::normalized(mean)?;
            debug_assert!(z.iter().zip(brute.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let mut inputs: Vec<&[f64]> = Vec::with_capacity(plan.source.len() + plan.target.len());
        let mut positives = Vec::with_capacity(inputs.capacity());
        let mut kinds = Vec::with_capacity(inputs.capacity());
        if let Some(src) = &self.source {
            for &(s, c) in &plan.source {
                inputs.push(&src.inputs[s]);
                positives.push(PositiveRef::new(Segment::SourceClass, c));
                kinds.push(SampleKind::Source);
            }
        }
        for &i in &plan.target {
            inputs.push(&self.target_inputs[i]);
            match self.state.assignment(i) {
                Assignment::Clustered(c) => {
                    positives.push(PositiveRef::new(Segment::TargetCluster, c));
                    kinds.push(SampleKind::TargetClustered);
                }
                Assignment::Outlier => {
                    let s = outlier_slot[i]
                        .ok_or_else(|| Error::Contract(format!("outlier {i} sampled without a prototype")))?;
                    positives.push(PositiveRef::new(Segment::TargetOutlier, s));
                    kinds.push(SampleKind::TargetOutlier);
                }
            }
        }
        let (features, cache) = encoder::forward(&self.params, &inputs)?;
        let opts = LossOptions {
            unified: self.cfg.unified,
        };
        let batch = loss::batch_loss(&features, &bank, &positives, &kinds, opts)?;
        let grads = encoder::backward(&self.params, &cache, &batch.grads)?;
        encoder::adam_step(&mut self.params, &grads, &mut self.adam)?;

        let n_src = if self.source.is_some() { plan.source.len() } else { 0 };
        if n_src > 0 {
            let class_batch: Vec<(&FeatureVector, usize)> = features[..n_src]
                .iter()
                .zip(&plan.source)
                .map(|(f, &(_, c))| (f, c))
                .collect();
            self.memory.update_class_centroids(&class_batch)?;
        }
        // last occurrence of a repeated instance wins
        let mut latest: BTreeMap<usize, &FeatureVector> = BTreeMap::new();
        for (f, &i) in features[n_src..].iter().zip(&plan.target) {
            latest.insert(i, f);
        }
        let updates: Vec<(usize, &FeatureVector)> = latest.into_iter().collect();
        self.memory.update_instances(&updates)?;
        Ok(batch.mean)
    }

    /// One epoch: re-cluster, then iterate mini-batches.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let lr = scheduled_lr(self.cfg.lr, self.cfg.lr_gamma, self.epoch, self.cfg.epochs);
        self.adam.lr = lr;
        let relabel = self.relabel()?;
        self.state = relabel.state.clone();
        self.memory.rebuild_clusters(&self.state)?;

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for _ in 0..self.iters_per_epoch() {
            let plan = self.sample_batch()?;
            if plan.is_empty() {
                continue;
            }
            let l = self.step(&plan)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {}", self.epoch)));
            }
            loss_sum += l;
            steps += 1;
        }
        let report = EpochReport {
            epoch: self.epoch,
            lr,
            loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            n_clusters_raw: relabel.n_clusters_raw,
            n_clusters_kept: self.state.n_clusters(),
            n_outliers: self.state.n_outliers(),
            mean_r_indep: relabel.mean_r_indep,
            mean_r_comp: relabel.mean_r_comp,
            alpha: self.alpha,
            nmi: self
                .target_eval_labels
                .as_ref()
                .map(|gt| eval::nmi(&self.state.labels(), gt)),
        };
        log::info!(
            "epoch {} loss {:.4} clusters {}/{} outliers {}",
            report.epoch,
            report.loss,
            report.n_clusters_kept,
            report.n_clusters_raw,
            report.n_outliers
        );
        self.epoch += 1;
        Ok(report)
    }

    pub fn sample_batch(&mut self) -> Result<BatchPlan> {
        let source = match &self.source {
            Some(src) => sample_source(
                &mut self.rng,
                &src.groups,
                self.cfg.classes_per_batch,
                self.cfg.instances_per_class,
            )?,
            None => Vec::new(),
        };
        let target = sample_target(
            &mut self.rng,
            &self.state,
            self.cfg.instances_per_class,
            self.cfg.target_slots,
            !self.cfg.drop_outliers,
        )?;
        Ok(BatchPlan { source, target })
    }

    /// Runs the remaining configured epochs.
    pub fn train(&mut self) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::with_capacity(self.cfg.epochs.saturating_sub(self.epoch));
        while self.epoch < self.cfg.epochs {
            reports.push(self.run_epoch()?);
        }
        Ok(reports)
    }

    /// NMI of a fresh clustering of the final memory against target ground
    /// truth, when available. Does not alter training state.
    pub fn final_nmi(&self) -> Result<Option<NmiScores>> {
        let Some(gt) = &self.target_eval_labels else {
            return Ok(None);
        };
        let mut probe = self.clone();
        let relabel = probe.relabel()?;
        Ok(Some(eval::nmi(&relabel.state.labels(), gt)))
    }
}

/// Retrieval evaluation of labelled records under `params`, with a seeded
/// per-identity query/gallery split.
pub fn evaluate_records(
    params: &EncoderParams,
    records: &[SampleRecord],
    query_fraction: f64,
    seed: u64,
) -> Result<EvalResult> {
    let labelled: Vec<&SampleRecord> = records.iter().filter(|r| r.has_label()).collect();
    if labelled.is_empty() {
        return Err(Error::Data("no labelled records to evaluate".into()));
    }
    let inputs: Vec<&[f64]> = labelled.iter().map(|r| r.input.as_slice()).collect();
    let feats = encoder::encode(params, &inputs)?;
    let labels: Vec<u32> = labelled.iter().map(|r| r.eval_label().expect("filtered")).collect();
    let (q, g) = eval::query_gallery_indices(&labels, query_fraction, seed);
    let item = |i: usize| RetrievalItem {
        feature: feats[i].as_slice().to_vec(),
        label: labels[i],
        cam: labelled[i].cam_id,
    };
    let split = RetrievalSplit {
        query: q.into_iter().map(item).collect(),
        gallery: g.into_iter().map(item).collect(),
        shared_index: false,
    };
    eval::evaluate_retrieval(&split)
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub reports: Vec<EpochReport>,
    pub target_eval: Option<EvalResult>,
    pub source_eval: Option<EvalResult>,
}

/// Initializes, trains for `cfg.epochs` epochs and evaluates.
pub fn train(cfg: &TrainConfig, source: &[SampleRecord], target: &[SampleRecord]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), source, target)?;
    let reports = trainer.train()?;
    finish(&trainer, reports, source, target)
}

fn finish(
    trainer: &Trainer,
    reports: Vec<EpochReport>,
    source: &[SampleRecord],
    target: &[SampleRecord],
) -> Result<TrainOutcome> {
    let cfg = trainer.config();
    let params = trainer.params().clone();
    let target_eval = if target.iter().any(SampleRecord::has_label) {
        let mut r = evaluate_records(&params, target, cfg.query_fraction, cfg.seed)?;
        r.nmi = trainer.final_nmi()?;
        Some(r)
    } else {
        None
    };
    let source_eval = if source.is_empty() {
        None
    } else {
        Some(evaluate_records(&params, source, cfg.query_fraction, cfg.seed)?)
    };
    Ok(TrainOutcome {
        params,
        reports,
        target_eval,
        source_eval,
    })
}

/// Trains and writes `config.resolved`, `checkpoint.txt`, `report.csv`,
/// `eval.csv` (target) and `eval_source.csv` (when source data is given)
/// into `out`. A numeric failure leaves `diagnostic_memory.csv` behind.
pub fn train_to_dir(
    cfg: &TrainConfig,
    source: &[SampleRecord],
    target: &[SampleRecord],
    out: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("config.resolved", &cfg.to_text())?;
    let mut trainer = Trainer::new(cfg.clone(), source, target)?;
    let mut reports = Vec::new();
    while trainer.epochs_done() < cfg.epochs {
        match trainer.run_epoch() {
            Ok(r) => reports.push(r),
            Err(e) => {
                let mut dump = trainer.memory().snapshot_csv();
                let _ = writeln!(dump, "# aborted at epoch {}: {e}", trainer.epochs_done());
                write("diagnostic_memory.csv", &dump)?;
                write("report.csv", &reports_csv(&reports))?;
                return Err(e);
            }
        }
    }
    let outcome = finish(&trainer, reports, source, target)?;
    write("checkpoint.txt", &outcome.params.to_checkpoint())?;
    write("report.csv", &reports_csv(&outcome.reports))?;
    if let Some(r) = &outcome.target_eval {
        write("eval.csv", &r.to_csv())?;
    }
    if let Some(r) = &outcome.source_eval {
        write("eval_source.csv", &r.to_csv())?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn state(assign: &[i64]) -> PseudoLabelState {
        let raw: Vec<Option<usize>> = assign.iter().map(|&a| (a >= 0).then_some(a as usize)).collect();
        PseudoLabelState::new(
            raw.iter()
                .map(|r| r.map_or(Assignment::Outlier, Assignment::Clustered))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn all_outlier_target_side() {
        let mut rng = Rng::seeded(1);
        let st = PseudoLabelState::all_outliers(100);
        let t = sample_target(&mut rng, &st, 4, 64, true).unwrap();
        assert_eq!(t.len(), 64);
        let mut d = t.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 64);

        let st = PseudoLabelState::all_outliers(10);
        let mut t = sample_target(&mut rng, &st, 4, 64, true).unwrap();
        t.sort_unstable();
        assert_eq!(t, (0..10).collect::<Vec<_>>());
        assert!(sample_target(&mut rng, &PseudoLabelState::all_outliers(0), 4, 64, true).is_err());
    }

    #[test]
    fn single_cluster_target_side() {
        let mut rng = Rng::seeded(2);
        let st = state(&[0, 0, 0, 0, 0, 0]);
        let t = sample_target(&mut rng, &st, 4, 64, true).unwrap();
        assert_eq!(t.len(), 64);
        // each group of four is drawn without replacement
        for chunk in t.chunks(4) {
            let mut c = chunk.to_vec();
            c.sort_unstable();
            c.dedup();
            assert_eq!(c.len(), 4);
        }
    }

    #[test]
    fn mixed_target_side_is_deterministic_with_many_classes() {
        let mut assign: Vec<i64> = (0..10).flat_map(|c| [c; 5]).collect();
        assign.extend([-1; 40]);
        let st = state(&assign);
        let a = sample_target(&mut Rng::seeded(3), &st, 4, 64, true).unwrap();
        let b = sample_target(&mut Rng::seeded(3), &st, 4, 64, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let mut classes: Vec<Option<usize>> = a.iter().map(|&i| st.labels()[i].map(|c| c + 1000)).collect();
        // outliers are their own class
        for (k, &i) in a.iter().enumerate() {
            if classes[k].is_none() {
                classes[k] = Some(i);
            }
        }
        classes.sort_unstable();
        classes.dedup();
        assert!(classes.len() >= 16);

        let only_clusters = sample_target(&mut Rng::seeded(3), &st, 4, 64, false).unwrap();
        assert!(only_clusters.iter().all(|&i| st.labels()[i].is_some()));
    }

    #[test]
    fn source_side_shape() {
        let groups: Vec<Vec<usize>> = (0..20).map(|c| (c * 3..c * 3 + 3).collect()).collect();
        let mut rng = Rng::seeded(4);
        let s = sample_source(&mut rng, &groups, 16, 4).unwrap();
        assert_eq!(s.len(), 64);
        let mut cls: Vec<usize> = s.iter().map(|x| x.1).collect();
        cls.dedup();
        assert_eq!(cls.len(), 16);
        assert!(s.iter().all(|&(i, c)| groups[c].contains(&i)));
        assert!(sample_source(&mut rng, &groups[..3], 16, 4).is_err());
    }

    fn tiny() -> (Vec<SampleRecord>, Vec<SampleRecord>) {
        generate(&SynthConfig {
            seed: 3,
            dim: 8,
            n_source_ids: 6,
            n_target_ids: 6,
            shared_ids: 2,
            samples_per_id: 8,
            intra_class_std: 0.05,
            domain_shift: 0.2,
            n_cameras: 2,
        })
        .unwrap()
    }

    fn tiny_cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 2,
            classes_per_batch: 4,
            hidden: 16,
            embed_dim: 8,
            target_slots: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leaves_initial_memory() {
        let (s, t) = tiny();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg(Mode::Uda)
        };
        let mut tr = Trainer::new(cfg, &s, &t).unwrap();
        let before = tr.memory().clone();
        assert!(tr.train().unwrap().is_empty());
        assert_eq!(tr.memory(), &before);
    }

    #[test]
    fn modes_shape_the_bank() {
        let (s, t) = tiny();
        let mut tr = Trainer::new(tiny_cfg(Mode::Unsupervised), &s, &t).unwrap();
        tr.run_epoch().unwrap();
        let (bank, _) = tr.build_bank().unwrap();
        assert_eq!(bank.segment_lens().0, 0);
        assert_eq!(tr.memory().n_classes(), 0);

        let mut tr = Trainer::new(tiny_cfg(Mode::Oracle), &[], &t).unwrap();
        let r = tr.run_epoch().unwrap();
        assert_eq!(r.n_clusters_kept, 6);
        assert_eq!(r.n_outliers, 0);
        assert!((r.nmi.unwrap().all - 1.0).abs() < 1e-12);

        let mut tr = Trainer::new(tiny_cfg(Mode::Uda), &s, &t).unwrap();
        tr.run_epoch().unwrap();
        let (bank, _) = tr.build_bank().unwrap();
        assert_eq!(bank.segment_lens().0, 6);
        assert!(tr.memory().is_normalized());
        // bank cluster segment equals centroids recomputed from v
        for (c, z) in bank.segment(Segment::TargetCluster).iter().enumerate() {
            let members = &tr.memory().clusters()[&c];
            let mean = crate::feature::mean(members.iter().map(|&i| tr.memory().instances()[i].as_slice()));
            let brute = FeatureVector::normalized(mean).unwrap();
            for (a, b) in z.iter().zip(brute.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uda_requires_source() {
        let (_, t) = tiny();
        assert!(matches!(Trainer::new(tiny_cfg(Mode::Uda), &[], &t), Err(Error::Config(_))));
    }

    #[test]
    fn oracle_needs_target_labels() {
        let (_, t) = tiny();
        let unlabelled: Vec<SampleRecord> = t
            .iter()
            .map(|r| SampleRecord::new(r.sample_id, Domain::Target, None, r.cam_id, r.input.clone()))
            .collect();
        assert!(Trainer::new(tiny_cfg(Mode::Oracle), &[], &unlabelled).is_err());
        // unsupervised training never needs them
        let mut tr = Trainer::new(tiny_cfg(Mode::Unsupervised), &[], &unlabelled).unwrap();
        assert!(tr.run_epoch().unwrap().nmi.is_none());
    }

    #[test]
    fn pretraining_runs() {
        let (s, t) = tiny();
        let cfg = TrainConfig {
            pretrain_epochs: 2,
            ..tiny_cfg(Mode::Uda)
        };
        let tr = Trainer::new(cfg, &s, &t).unwrap();
        assert!(tr.memory().is_normalized());
        assert_eq!(tr.adam.step, 2 * 48usize.div_ceil(16) as u64);
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = TrainConfig {
            mode: Mode::Oracle,
            k: Some(7),
            criteria: Criteria {
                independence: false,
                compactness: true,
            },
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_kv(KvConfig::parse(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_kv(KvConfig::parse("epoch = 3\n").unwrap()).is_err());
        assert!(TrainConfig::from_kv(KvConfig::parse("mode = semi\n").unwrap()).is_err());
        for (key, _) in CONFIG_KEYS {
            assert!(cfg.to_text().contains(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn loss_decreases_on_toy_problem() {
        // fixed prototypes: a frozen source bank, only the encoder moves
        let (s, t) = tiny();
        let cfg = TrainConfig {
            lr: 0.01,
            ..tiny_cfg(Mode::Uda)
        };
        let mut tr = Trainer::new(cfg, &s, &t).unwrap();
        tr.memory.m_s = 1.0;
        tr.memory.m_t = 1.0;
        let plan = BatchPlan {
            source: (0..s.len()).map(|i| (i, tr.source.as_ref().unwrap().classes[i])).collect(),
            target: Vec::new(),
        };
        let first = tr.step(&plan).unwrap();
        let next: Vec<f64> = (0..10).map(|_| tr.step(&plan).unwrap()).collect();
        let mean = next.iter().sum::<f64>() / 10.0;
        assert!(mean < first, "{mean} vs {first}");
    }
}

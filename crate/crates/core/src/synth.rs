//! Synthetic two-domain identity datasets.
//!
//! Each identity is a center drawn uniformly on the unit sphere (normalized
//! Gaussian). Samples are Gaussian perturbations of the center projected
//! back onto the sphere. Target identities shared with the source domain use
//! the source center pushed through a fixed random domain map
//! `c -> normalize((1 - s) c + s (Q c + t))`, where `Q` is a random orthogonal
//! matrix, `t` a random unit vector and `s = domain_shift`.

use crate::config::{self, KvConfig};
use crate::data::{Domain, SampleRecord};
use crate::error::{Error, Result};
use crate::feature::{dot, norm};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub n_source_ids: usize,
    pub n_target_ids: usize,
    pub shared_ids: usize,
    pub samples_per_id: usize,
    pub intra_class_std: f64,
    pub domain_shift: f64,
    pub n_cameras: u32,
}

impl SynthConfig {
    /// The default desk-scale benchmark.
    pub fn bench_small() -> Self {
        SynthConfig {
            seed: 7,
            dim: 32,
            n_source_ids: 30,
            n_target_ids: 30,
            shared_ids: 10,
            samples_per_id: 20,
            intra_class_std: 0.08,
            domain_shift: 0.3,
            n_cameras: 4,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.n_source_ids < 1 || self.n_target_ids < 1 {
            return bad("identity counts must be >= 1".into());
        }
        if self.shared_ids > self.n_source_ids.min(self.n_target_ids) {
            return bad(format!(
                "shared_ids = {} exceeds min(n_source_ids, n_target_ids) = {}",
                self.shared_ids,
                self.n_source_ids.min(self.n_target_ids)
            ));
        }
        if self.samples_per_id < 2 {
            return bad("samples_per_id must be >= 2".into());
        }
        if !(self.intra_class_std > 0.0 && self.intra_class_std.is_finite()) {
            return bad("intra_class_std must be > 0".into());
        }
        if !(self.domain_shift >= 0.0 && self.domain_shift.is_finite()) {
            return bad("domain_shift must be >= 0".into());
        }
        if self.n_cameras < 1 {
            return bad("n_cameras must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let d = Self::bench_small();
        let cfg = SynthConfig {
            seed: kv.take("seed", d.seed)?,
            dim: kv.take("dim", d.dim)?,
            n_source_ids: kv.take("n_source_ids", d.n_source_ids)?,
            n_target_ids: kv.take("n_target_ids", d.n_target_ids)?,
            shared_ids: kv.take("shared_ids", d.shared_ids)?,
            samples_per_id: kv.take("samples_per_id", d.samples_per_id)?,
            intra_class_std: kv.take("intra_class_std", d.intra_class_std)?,
            domain_shift: kv.take("domain_shift", d.domain_shift)?,
            n_cameras: kv.take("n_cameras", d.n_cameras)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        config::render([
            ("seed", self.seed.to_string()),
            ("dim", self.dim.to_string()),
            ("n_source_ids", self.n_source_ids.to_string()),
            ("n_target_ids", self.n_target_ids.to_string()),
            ("shared_ids", self.shared_ids.to_string()),
            ("samples_per_id", self.samples_per_id.to_string()),
            ("intra_class_std", self.intra_class_std.to_string()),
            ("domain_shift", self.domain_shift.to_string()),
            ("n_cameras", self.n_cameras.to_string()),
        ])
    }
}

/// Identity centers of both domains, exposed for sanity checks.
#[derive(Debug, Clone)]
pub struct Centers {
    pub source: Vec<Vec<f64>>,
    /// Target centers with their identity labels.
    pub target: Vec<(u32, Vec<f64>)>,
}

fn unit_gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = rng.gaussian_vec(dim);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn random_orthogonal(rng: &mut Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v = rng.gaussian_vec(dim);
        for r in &rows {
            let p = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-8 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows
}

pub fn centers(cfg: &SynthConfig) -> Result<Centers> {
    cfg.validate()?;
    let mut rng = Rng::substream(cfg.seed, 1);
    let source: Vec<Vec<f64>> = (0..cfg.n_source_ids)
        .map(|_| unit_gaussian(&mut rng, cfg.dim))
        .collect();
    let q = random_orthogonal(&mut rng, cfg.dim);
    let t = unit_gaussian(&mut rng, cfg.dim);
    let s = cfg.domain_shift;

    let shift = |c: &[f64]| -> Vec<f64> {
        if s == 0.0 {
            return c.to_vec();
        }
        let mapped: Vec<f64> = (0..c.len())
            .map(|i| (1.0 - s) * c[i] + s * (dot(&q[i], c) + t[i]))
            .collect();
        let n = norm(&mapped);
        mapped.into_iter().map(|x| x / n).collect()
    };

    let mut target = Vec::with_capacity(cfg.n_target_ids);
    for (id, c) in source.iter().enumerate().take(cfg.shared_ids) {
        target.push((id as u32, shift(c)));
    }
    for j in 0..cfg.n_target_ids - cfg.shared_ids {
        target.push(((cfg.n_source_ids + j) as u32, unit_gaussian(&mut rng, cfg.dim)));
    }
    Ok(Centers { source, target })
}

/// Generates `(source, target)` records. Records are grouped by identity in
/// label order; every record carries its label and a uniform camera id.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let centers = centers(cfg)?;
    let mut rng = Rng::substream(cfg.seed, 2);
    let mut sample = |domain: Domain, labelled: &[(u32, &[f64])]| -> Vec<SampleRecord> {
        let mut out = Vec::with_capacity(labelled.len() * cfg.samples_per_id);
        for (label, c) in labelled {
            for _ in 0..cfg.samples_per_id {
                let x: Vec<f64> = c
                    .iter()
                    .map(|ci| ci + cfg.intra_class_std * rng.gaussian())
                    .collect();
                let n = norm(&x);
                let x = x.into_iter().map(|v| v / n).collect();
                let cam = rng.below(cfg.n_cameras as usize) as u32;
                out.push(SampleRecord::new(out.len(), domain, Some(*label), Some(cam), x));
            }
        }
        out
    };
    let src: Vec<(u32, &[f64])> = centers
        .source
        .iter()
        .enumerate()
        .map(|(i, c)| (i as u32, c.as_slice()))
        .collect();
    let tgt: Vec<(u32, &[f64])> = centers
        .target
        .iter()
        .map(|(l, c)| (*l, c.as_slice()))
        .collect();
    let source = sample(Domain::Source, &src);
    let target = sample(Domain::Target, &tgt);
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_dataset;

    fn small() -> SynthConfig {
        SynthConfig {
            seed: 1,
            dim: 8,
            n_source_ids: 5,
            n_target_ids: 5,
            shared_ids: 0,
            samples_per_id: 4,
            intra_class_std: 0.1,
            domain_shift: 0.3,
            n_cameras: 3,
        }
    }

    #[test]
    fn counts_match_config() {
        let (s, t) = generate(&small()).unwrap();
        assert_eq!((s.len(), t.len()), (20, 20));
        assert!(s.iter().chain(&t).all(|r| r.has_label() && r.cam_id.unwrap() < 3));
        assert!(s.iter().chain(&t).all(|r| (norm(&r.input) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_shift_keeps_centers() {
        let cfg = SynthConfig {
            shared_ids: 5,
            domain_shift: 0.0,
            ..small()
        };
        let c = centers(&cfg).unwrap();
        for (i, (label, tc)) in c.target.iter().enumerate() {
            assert_eq!(*label as usize, i);
            assert_eq!(tc, &c.source[i]);
        }
    }

    #[test]
    fn deterministic_bytes() {
        let (s1, t1) = generate(&small()).unwrap();
        let (s2, t2) = generate(&small()).unwrap();
        assert_eq!(render_dataset(&s1), render_dataset(&s2));
        assert_eq!(render_dataset(&t1), render_dataset(&t2));
        let (s3, _) = generate(&small().with_seed(2)).unwrap();
        assert_ne!(render_dataset(&s1), render_dataset(&s3));
    }

    #[test]
    fn shared_ids_validated() {
        let cfg = SynthConfig {
            shared_ids: 6,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn vanishing_noise_is_nearest_centroid_separable() {
        let cfg = SynthConfig {
            intra_class_std: 1e-9,
            shared_ids: 3,
            ..small()
        };
        let c = centers(&cfg).unwrap();
        let (s, t) = generate(&cfg).unwrap();
        for (recs, cents) in [
            (&s, c.source.iter().enumerate().map(|(i, v)| (i as u32, v.clone())).collect::<Vec<_>>()),
            (&t, c.target.clone()),
        ] {
            for r in recs {
                let best = cents
                    .iter()
                    .max_by(|a, b| dot(&a.1, &r.input).total_cmp(&dot(&b.1, &r.input)))
                    .unwrap();
                assert_eq!(Some(best.0), r.eval_label());
                assert!(cents.iter().any(|(_, v)| dot(v, &r.input) > 1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn kv_round_trip() {
        let cfg = small();
        let back = SynthConfig::from_kv(KvConfig::parse(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}

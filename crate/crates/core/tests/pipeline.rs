mod common;

use contramem::data::{load_dataset, save_dataset, Assignment, Domain, PseudoLabelState};
use contramem::encoder::EncoderParams;
use contramem::eval;
use contramem::rng::Rng;
use contramem::synth::{generate, SynthConfig};
use contramem::trainer::{cluster_step, evaluate_records, sample_target, train, Mode, TrainConfig, Trainer};
use contramem::FeatureVector;
use proptest::prelude::*;

fn separated(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        dim: 16,
        n_source_ids: 16,
        n_target_ids: 10,
        shared_ids: 4,
        samples_per_id: 40,
        intra_class_std: 0.01,
        domain_shift: 0.3,
        n_cameras: 3,
    }
}

#[test]
fn bench_small_run_reports_every_epoch() {
    let (src, tgt) = generate(&SynthConfig::bench_small()).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &src, &tgt).unwrap();
    assert_eq!(out.reports.len(), 15);
    for (e, r) in out.reports.iter().enumerate() {
        assert_eq!(r.epoch, e);
        assert_eq!(r.alpha, out.reports[0].alpha, "alpha is frozen after epoch 0");
        assert!(r.loss.is_finite());
        assert!(r.n_clusters_kept <= r.n_clusters_raw);
    }
    let lrs: Vec<f64> = out.reports.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[0], 0.00035);
    assert!((lrs[6] - 0.000035).abs() < 1e-18);
    assert!(out.params.is_finite());
    let e = out.target_eval.unwrap();
    assert!(e.map > 0.5 && e.map <= 1.0);
    assert!(out.source_eval.is_some());
}

#[test]
fn tight_clusters_are_recovered_from_raw_inputs() {
    // 40 samples per identity exceed the k-reciprocal neighbourhood of 30
    let (_, tgt) = generate(&separated(5)).unwrap();
    let feats: Vec<FeatureVector> = tgt
        .iter()
        .map(|r| FeatureVector::normalized(r.input.clone()).unwrap())
        .collect();
    let step = cluster_step(&feats, &TrainConfig::default(), None).unwrap();
    let gt: Vec<u32> = tgt.iter().map(|r| r.eval_label().unwrap()).collect();
    let main = &step.scales.as_ref().unwrap().main;
    assert_eq!(main.n_clusters(), 10);
    assert!(main.noise().len() < tgt.len() / 4);
    let raw_state = PseudoLabelState::from_raw_labels(main.labels());
    assert!((eval::nmi(&raw_state.labels(), &gt).clustered - 1.0).abs() < 1e-12);

    // every cluster is fully independent, so the epoch-0 quantile is 1 and
    // the strict threshold disassembles all of them
    assert_eq!(step.alpha, Some(1.0));
    assert_eq!(step.state.n_clusters(), 0);
    assert_eq!(step.state.n_outliers(), tgt.len());
}

#[test]
fn near_noiseless_data_is_retrieved_perfectly() {
    let (_, tgt) = generate(&separated(6)).unwrap();
    let r = evaluate_records(&EncoderParams::identity(16), &tgt, 0.25, 1).unwrap();
    assert_eq!(r.map, 1.0);
    assert_eq!(r.top1(), 1.0);
    assert_eq!(r.n_skipped, 0);
}

#[test]
fn datasets_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        samples_per_id: 5,
        ..SynthConfig::bench_small()
    };
    let (src, tgt) = generate(&cfg).unwrap();
    let (ps, pt) = (dir.path().join("s.csv"), dir.path().join("t.csv"));
    save_dataset(&ps, &src).unwrap();
    save_dataset(&pt, &tgt).unwrap();
    let (src2, tgt2) = (load_dataset(&ps).unwrap(), load_dataset(&pt).unwrap());
    assert_eq!(src2.len(), src.len());
    assert!(tgt2.iter().all(|r| r.domain == Domain::Target));
    // written values are rounded, so a second save is a fixed point
    let pt2 = dir.path().join("t2.csv");
    save_dataset(&pt2, &tgt2).unwrap();
    assert_eq!(std::fs::read(&pt).unwrap(), std::fs::read(&pt2).unwrap());
}

#[test]
fn oracle_bank_matches_ground_truth_every_epoch() {
    let (_, tgt) = generate(&separated(7)).unwrap();
    let cfg = TrainConfig {
        mode: Mode::Oracle,
        epochs: 3,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, &[], &tgt).unwrap();
    for r in t.train().unwrap() {
        assert_eq!(r.n_clusters_kept, 10);
        assert_eq!(r.nmi.unwrap().all, 1.0);
    }
    assert!(t.memory().is_normalized());
}

#[test]
fn source_only_pretraining_is_deterministic() {
    let (src, tgt) = generate(&SynthConfig::bench_small()).unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 2,
        epochs: 1,
        ..TrainConfig::default()
    };
    let a = Trainer::new(cfg.clone(), &src, &tgt).unwrap();
    let b = Trainer::new(cfg, &src, &tgt).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(a.memory(), b.memory());
}

fn arb_state() -> impl Strategy<Value = PseudoLabelState> {
    prop::collection::vec(prop::option::of(0usize..6), 1..80)
        .prop_map(|raw| PseudoLabelState::from_raw_labels(&raw))
}

proptest! {
    #[test]
    fn target_side_respects_pseudo_classes(state in arb_state(), seed in 0u64..1000, with_outliers in any::<bool>()) {
        let mut rng = Rng::seeded(seed);
        let t = sample_target(&mut rng, &state, 4, 64, with_outliers).unwrap();
        prop_assert!(t.len() <= 64);
        prop_assert!(t.iter().all(|&i| i < state.len()));
        if !with_outliers {
            prop_assert!(t.iter().all(|&i| state.assignment(i) != Assignment::Outlier));
        }
        if state.n_clusters() > 0 {
            prop_assert_eq!(t.len(), 64);
        } else if with_outliers {
            // one pass over the outliers, no repeats
            let mut s = t.clone();
            s.sort_unstable();
            s.dedup();
            prop_assert_eq!(s.len(), t.len());
            prop_assert_eq!(t.len(), state.len().min(64));
        }
        let again = sample_target(&mut Rng::seeded(seed), &state, 4, 64, with_outliers).unwrap();
        prop_assert_eq!(t, again);
    }

    #[test]
    fn nmi_is_symmetric_and_bounded(u in prop::collection::vec(0u8..5, 1..60), seed in 0u64..100) {
        let mut rng = Rng::seeded(seed);
        let v: Vec<u8> = u.iter().map(|&x| if rng.uniform() < 0.3 { rng.below(5) as u8 } else { x }).collect();
        let a = eval::nmi_of(&u, &v);
        let b = eval::nmi_of(&v, &u);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        let u64s: Vec<i64> = u.iter().map(|&x| x as i64).collect();
        let v64s: Vec<i64> = v.iter().map(|&x| x as i64).collect();
        prop_assert!((a - common::nmi_oracle(&u64s, &v64s)).abs() < 1e-12);
    }
}

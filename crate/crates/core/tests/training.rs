use std::sync::OnceLock;

use dpm_adapt::adapt::{adapt, adapt_from, AdaptConfig};
use dpm_adapt::data::Dataset;
use dpm_adapt::inference::{detect, DetectOptions};
use dpm_adapt::model::{self, vectorize, DpmModel};
use dpm_adapt::synth::{default_shift_pair, generate_benchmark, BenchmarkSize};
use dpm_adapt::train::{self, calibrate_threshold, initial_model, latent_rounds, run_rounds, ssvm_sgd, TrainConfig};

struct Fixture {
    _dir: tempfile::TempDir,
    source: Dataset,
    target: Dataset,
    start: DpmModel,
    trained: DpmModel,
}

fn config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.hog.interval = 5;
    cfg.relabel_rounds = 2;
    cfg.neg_cache = 1000;
    cfg.calibration_images = 8;
    cfg
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = default_shift_pair();
        let size = BenchmarkSize {
            source_images: 24,
            target_train_images: 12,
            target_test_images: 4,
            ..BenchmarkSize::default()
        };
        let b = generate_benchmark(&s, &t, &size, dir.path()).unwrap();
        let cfg = config();
        let start = initial_model(&b.source, &cfg, &mut Vec::new()).unwrap();
        let trained = train::train(&b.source, &cfg).unwrap().model;
        Fixture {
            _dir: dir,
            source: b.source,
            target: b.target_train,
            start,
            trained,
        }
    })
}

#[test]
fn same_seed_gives_identical_model_bytes() {
    let f = fixture();
    let again = train::train(&f.source, &config()).unwrap().model;
    assert_eq!(model::to_bytes(&again), model::to_bytes(&f.trained));
}

#[test]
fn zero_source_adaptation_is_target_only_training() {
    let f = fixture();
    let cfg = config();
    let acfg = AdaptConfig {
        rounds: cfg.relabel_rounds,
        alternations: 1,
        ..AdaptConfig::default()
    };
    let zero = vec![0.0; f.start.param_len()];
    let adapted = adapt_from(&f.start, &zero, &f.target, &acfg, &cfg).unwrap();
    assert!(adapted.beta.iter().all(|&b| b == 0.0));

    let mut plain = latent_rounds(f.start.clone(), &f.target, &cfg, &mut Vec::new()).unwrap();
    plain.threshold = calibrate_threshold(&plain, &f.target, &cfg.classes, cfg.calibration_images, cfg.calibration_fppi).unwrap();
    assert_eq!(model::to_bytes(&adapted.model), model::to_bytes(&plain));
}

#[test]
fn zero_source_without_gamma_is_singular() {
    let f = fixture();
    let acfg = AdaptConfig {
        gamma: 0.0,
        ..AdaptConfig::default()
    };
    let zero = vec![0.0; f.start.param_len()];
    let err = adapt_from(&f.start, &zero, &f.target, &acfg, &config()).unwrap_err();
    assert!(matches!(err, dpm_adapt::error::Error::SingularBlock { .. }), "{err}");
}

#[test]
fn adaptation_objective_never_increases_within_a_round() {
    let f = fixture();
    let out = adapt(&f.trained, &f.target, &AdaptConfig::default(), &config()).unwrap();
    assert_eq!(out.log.len(), 3 * (1 + 2 * 2));
    for round in out.log.chunk_by(|a, b| a.round == b.round) {
        for pair in round.windows(2) {
            assert!(
                pair[1].objective <= pair[0].objective * (1.0 + 1e-12),
                "round {}: {} step raised J from {} to {}",
                pair[1].round,
                pair[1].step,
                pair[0].objective,
                pair[1].objective
            );
        }
    }
    assert_eq!(out.beta.len(), out.partition.num_blocks());
}

#[test]
fn frozen_negatives_objective_never_increases_across_rounds() {
    let f = fixture();
    let mut cfg = config();
    cfg.mine_every_round = false;
    cfg.relabel_rounds = 3;
    let mut trace: Vec<(f64, f64)> = Vec::new();
    run_rounds(f.start.clone(), &f.source, &cfg, cfg.relabel_rounds, |round, w, batch, bounds| {
        let anchor = vec![0.0; w.len()];
        let before = train::objective(w, &anchor, &batch.samples, cfg.c);
        let out = ssvm_sgd(w, &anchor, &batch.samples, cfg.c, &cfg.sgd, bounds, 1 + round as u64)?;
        trace.push((before, train::objective(&out.w, &anchor, &batch.samples, cfg.c)));
        Ok(out.w)
    })
    .unwrap();
    for (r, &(before, after)) in trace.iter().enumerate() {
        assert!(after <= before, "round {r}: solve raised J from {before} to {after}");
    }
    for r in 1..trace.len() {
        let (relabeled, solved) = (trace[r].0, trace[r - 1].1);
        assert!(relabeled <= solved * (1.0 + 1e-9), "relabeling in round {r} raised J from {solved} to {relabeled}");
    }
}

#[test]
fn flipped_model_scores_flipped_images_identically() {
    let f = fixture();
    let m = &f.trained;
    let flipped = m.flipped();
    let opts = DetectOptions {
        threshold: Some(f64::NEG_INFINITY),
        nms_overlap: 1.0,
        max_detections: None,
    };
    for e in f.source.entries.iter().take(3) {
        let image = e.load_image().unwrap();
        let mirror = image.flip_horizontal();
        let mut a: Vec<f64> = detect(&image, m, &opts).unwrap().iter().map(|d| d.score).collect();
        let mut b: Vec<f64> = detect(&mirror, &flipped, &opts).unwrap().iter().map(|d| d.score).collect();
        assert_eq!(a.len(), b.len());
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-9, "max score difference {worst}");
    }
    let (w, _) = vectorize(&flipped.flipped());
    assert_eq!(w, vectorize(m).0);
}

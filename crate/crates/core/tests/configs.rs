use std::path::{Path, PathBuf};

use dpm_adapt::experiment::{ExperimentConfig, Mode};
use dpm_adapt::synth::{default_shift_pair, DomainSpec};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_synth_specs_are_the_frozen_pair() {
    let (source, target) = default_shift_pair();
    assert_eq!(DomainSpec::load(&configs().join("synth/source.toml")).unwrap(), source);
    assert_eq!(DomainSpec::load(&configs().join("synth/target.toml")).unwrap(), target);
}

#[test]
fn example_experiment_config_parses_and_validates() {
    let path = configs().join("experiment.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.modes, vec![Mode::Src, Mode::TarX, Mode::SaSsvm, Mode::TarAll]);
    assert_eq!(cfg.adapt.gamma, 0.08);
    assert_eq!(cfg.train.c, 0.001);
    assert!(cfg.target_test.starts_with(path.parent().unwrap()));
}

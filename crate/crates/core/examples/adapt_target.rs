// Adapt a source-trained detector to a shifted target domain from a few
// target images and compare it with both baselines.
//
// Run with `cargo run --release --example adapt_target`.

use dpm_adapt::adapt::{adapt, AdaptConfig};
use dpm_adapt::data::ClassSet;
use dpm_adapt::eval::{evaluate_models, log_average_mr};
use dpm_adapt::hog::HogConfig;
use dpm_adapt::model::BlockKind;
use dpm_adapt::synth::{default_shift_pair, generate_benchmark, BenchmarkSize};
use dpm_adapt::train::{train, TrainConfig};

pub fn run_example() -> anyhow::Result<()> {
    let out = std::env::temp_dir().join("dpm-adapt-examples").join("adapt_target");
    let (source, target) = default_shift_pair();
    let size = BenchmarkSize {
        source_images: 40,
        target_train_images: 12,
        target_test_images: 20,
        ..BenchmarkSize::default()
    };
    let bench = generate_benchmark(&source, &target, &size, &out)?;

    let cfg = TrainConfig {
        hog: HogConfig {
            cell_size: 8,
            interval: 5,
        },
        relabel_rounds: 2,
        neg_cache: 2000,
        calibration_images: 20,
        ..TrainConfig::default()
    };
    let src = train(&bench.source, &cfg)?.model;
    let tar = train(&bench.target_train, &cfg)?.model;
    let adapted = adapt(
        &src,
        &bench.target_train,
        &AdaptConfig {
            rounds: 2,
            ..AdaptConfig::default()
        },
        &cfg,
    )?;

    println!("structure weights (beta):");
    for (b, blk) in adapted.beta.iter().zip(&adapted.partition.blocks) {
        match blk.kind {
            BlockKind::Root { component } => println!("  root of component {component}: {b:.4}"),
            BlockKind::Part { component, part } => println!("  part {part} of component {component}: {b:.4}"),
            BlockKind::Bias { component } => println!("  bias of component {component}: {b:.4}"),
        }
    }
    let first = adapted.log.first().map(|r| r.objective).unwrap_or_default();
    let last = adapted.log.last().map(|r| r.objective).unwrap_or_default();
    println!("objective {first:.5} -> {last:.5}");

    let curves = evaluate_models(&[&src, &tar, &adapted.model], &bench.target_test, &ClassSet::default(), 100)?;
    for (name, c) in ["source only", "target only", "adapted"].iter().zip(&curves) {
        println!("{name:12} log-average MR on target test: {:.4}", log_average_mr(c));
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}

// The experiment matrix on a small synthetic benchmark: source-only,
// target-only on 10% of the target images, adapted, and full target.
//
// Run with `cargo run --release --example domain_gap`. Results, curves and
// the run manifest land in the printed output directory; running again
// reuses the finished cells.

use dpm_adapt::experiment::{run, ExperimentConfig, Mode};
use dpm_adapt::hog::HogConfig;
use dpm_adapt::synth::{benchmark_dirs, default_shift_pair, generate_benchmark, manifest_path, BenchmarkSize};
use dpm_adapt::train::TrainConfig;
use dpm_adapt::adapt::AdaptConfig;

pub fn run_example() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("dpm-adapt-examples").join("domain_gap");
    let (source, target) = default_shift_pair();
    let size = BenchmarkSize {
        source_images: 40,
        target_train_images: 40,
        target_test_images: 20,
        ..BenchmarkSize::default()
    };
    generate_benchmark(&source, &target, &size, &root.join("data"))?;
    let [s, tt, te] = benchmark_dirs(&root.join("data"));

    let cfg = ExperimentConfig {
        source: Some(manifest_path(&s)),
        target_train: Some(manifest_path(&tt)),
        target_test: manifest_path(&te),
        x: vec![0.1],
        modes: vec![Mode::Src, Mode::TarX, Mode::SaSsvm, Mode::TarAll],
        output: root.join("out"),
        train: TrainConfig {
            hog: HogConfig {
                cell_size: 8,
                interval: 5,
            },
            relabel_rounds: 2,
            neg_cache: 2000,
            calibration_images: 20,
            ..TrainConfig::default()
        },
        adapt: AdaptConfig {
            repetitions: 2,
            rounds: 2,
            ..AdaptConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let report = run(&cfg)?;
    for fig in &report.figures {
        println!("X = {}", fig.x);
        for c in &fig.curves {
            println!("  {:8} log-average MR {:.4} ± {:.4} over {} runs", c.label, c.log_average(), c.log_average_std(), c.runs.len());
        }
    }
    println!("curves and plot in {}", cfg.output.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}

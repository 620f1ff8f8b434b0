// Train a three-component DPM on synthetic source scenes, then detect.
//
// Run with `cargo run --release --example train_source`.

use dpm_adapt::data::ClassSet;
use dpm_adapt::eval::{evaluate_models, log_average_mr};
use dpm_adapt::hog::HogConfig;
use dpm_adapt::inference::{detect, DetectOptions};
use dpm_adapt::model;
use dpm_adapt::synth::{default_shift_pair, generate, DomainSpec};
use dpm_adapt::train::{train, write_train_log, TrainConfig};

pub fn run_example() -> anyhow::Result<()> {
    let out = std::env::temp_dir().join("dpm-adapt-examples").join("train_source");
    let (source, _) = default_shift_pair();
    let data = generate(&source, 40, (320, 192), &out.join("train"))?;
    let test_spec = DomainSpec { seed: 99, ..source };
    let test = generate(&test_spec, 20, (320, 192), &out.join("test"))?;

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
    let outcome = train(&data, &cfg)?;
    let m = &outcome.model;
    for (i, c) in m.components.iter().enumerate() {
        println!("component {i}: root {}x{} cells, {} parts, bias {:.3}", c.root.rows(), c.root.cols(), c.parts.len(), c.bias);
    }
    println!("threshold at FPPI 1: {:.4}", m.threshold);
    let last = outcome.log.last().expect("training logs every epoch");
    println!("final objective {:.5}, train error {:.4}", last.objective, last.train_error);

    let path = out.join("source.dpm");
    model::save(m, &path)?;
    let mut log = Vec::new();
    write_train_log(&mut log, &outcome.log)?;
    std::fs::write(out.join("train_log.csv"), log)?;
    println!("model -> {}", path.display());

    let image = test.entries[0].load_image()?;
    for d in detect(&image, m, &DetectOptions::default())? {
        println!("  detection {:?} score {:.3} component {}", d.bbox, d.score, d.component_id);
    }
    let curves = evaluate_models(&[m], &test, &ClassSet::default(), 100)?;
    println!("log-average miss rate on {} held-out source images: {:.4}", test.len(), log_average_mr(&curves[0]));
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}

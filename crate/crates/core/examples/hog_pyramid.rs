// Build a HOG pyramid for a synthetic scene and inspect its levels.
//
// Run with `cargo run --example hog_pyramid`.

use dpm_adapt::hog::{build_pyramid, compute_cells, HogConfig, FEATURE_DIM};
use dpm_adapt::synth::{default_shift_pair, render_scene};

pub fn run_example() -> anyhow::Result<()> {
    let (source, _) = default_shift_pair();
    let scene = render_scene(&source, 320, 192, 7);
    println!("scene {}x{} with {} vehicles", scene.image.width(), scene.image.height(), scene.labels.len());

    let cfg = HogConfig {
        cell_size: 8,
        interval: 5,
    };
    let cells = compute_cells(&scene.image, &cfg)?;
    println!("native level: {}x{} cells of {FEATURE_DIM} features", cells.rows(), cells.cols());

    // smallest root we would ever score: 3x3 cells
    let pyramid = build_pyramid(&scene.image, &cfg, 3, 3)?;
    println!("{} levels, roots scored on levels {:?}", pyramid.levels.len(), pyramid.root_levels());
    for (l, level) in pyramid.levels.iter().enumerate() {
        let max = level.data().iter().copied().fold(0.0f64, f64::max);
        println!("  level {l:2}: scale {:.3}, {:3}x{:3} cells, max feature {max:.3}", level.scale, level.rows(), level.cols());
    }
    let i = cfg.interval;
    let ratio = pyramid.levels[i].scale / pyramid.levels[0].scale;
    println!("scale(level {i}) / scale(level 0) = {ratio}");

    let out = std::env::temp_dir().join("dpm-adapt-examples");
    std::fs::create_dir_all(&out)?;
    let path = out.join("level0.bin");
    pyramid.levels[0].write_dump(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
    println!("level 0 dumped to {}", path.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}

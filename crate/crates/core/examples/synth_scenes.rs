// Render the frozen source / target domain pair and look at the labels.
//
// Run with `cargo run --example synth_scenes`.

use dpm_adapt::data::{dataset_stats, ClassSet};
use dpm_adapt::geometry::is_moderate;
use dpm_adapt::synth::{default_shift_pair, generate, render_scene, SHIFT_PAIR_VERSION};

pub fn run_example() -> anyhow::Result<()> {
    let (source, target) = default_shift_pair();
    println!("shift pair version {SHIFT_PAIR_VERSION}");
    println!("target domain spec:\n{}", target.to_toml());

    let out = std::env::temp_dir().join("dpm-adapt-examples").join("scenes");
    std::fs::create_dir_all(&out)?;
    for spec in [&source, &target] {
        let scene = render_scene(spec, 320, 192, 11);
        let path = out.join(format!("{}.png", spec.name));
        scene.image.save_png(&path)?;
        println!("{} -> {}", spec.name, path.display());
        for l in &scene.labels {
            let a = l.to_annotation(&spec.name)?;
            println!(
                "  {} box ({:.0}, {:.0}, {:.0}, {:.0}) truncation {:.2} occlusion {:?} moderate {}",
                l.class,
                l.bbox[0],
                l.bbox[1],
                l.bbox[2],
                l.bbox[3],
                a.truncation,
                a.occlusion,
                is_moderate(&a)
            );
        }
    }

    let data = generate(&target, 20, (320, 192), &out.join("target"))?;
    let stats = dataset_stats(&data, &ClassSet::default());
    println!("20 target images: {} moderate vehicles", stats.moderate_vehicles);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}

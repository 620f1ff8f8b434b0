// Count images and moderate cars in a KITTI-format dataset.
//
// With a manifest (`image<TAB>label` per line) this reports its statistics:
// `cargo run --example kitti_stats -- path/to/manifest.tsv`. Without one it
// writes and reads a two-image fixture.

use dpm_adapt::data::{dataset_stats, load_manifest, parse_kitti_label_line, subset_images, write_manifest, ClassSet, SplitSpec};
use dpm_adapt::raster::LumaImage;

const FIXTURE: [&str; 2] = [
    "Car 0.00 0 -1.58 587.0 173.3 614.1 200.1 1.6 1.6 3.8 2.4 1.4 35.0 -1.5\n\
     Car 0.00 1 -1.58 100.0 150.0 180.0 190.0 1.6 1.6 3.8 2.4 1.4 35.0 -1.5\n\
     DontCare -1 -1 -10 50 50 60 60 -1 -1 -1 -1000 -1000 -1000 -10\n",
    "Car 0.50 0 -1.58 0.0 150.0 60.0 200.0 1.6 1.6 3.8 2.4 1.4 35.0 -1.5\n\
     Van 0.00 0 -1.58 300.0 150.0 380.0 200.0 1.6 1.6 3.8 2.4 1.4 35.0 -1.5\n\
     Car 0.00 2 -1.58 400.0 150.0 480.0 210.0 1.6 1.6 3.8 2.4 1.4 35.0 -1.5\n",
];

fn fixture() -> anyhow::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join("dpm-adapt-examples").join("kitti");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for (i, text) in FIXTURE.iter().enumerate() {
        let img = format!("{i:06}.png");
        let lbl = format!("{i:06}.txt");
        LumaImage::filled(640, 240, 128.0).save_png(&dir.join(&img))?;
        std::fs::write(dir.join(&lbl), text)?;
        rows.push((img, lbl));
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

pub fn run_example() -> anyhow::Result<()> {
    let line = FIXTURE[0].lines().next().unwrap_or_default();
    let a = parse_kitti_label_line(line, 1, "000000")?;
    println!("parsed: {} {:?} truncation {} occlusion {:?}", a.class_label, a.bbox, a.truncation, a.occlusion);

    report(&fixture()?)
}

fn report(manifest: &std::path::Path) -> anyhow::Result<()> {
    let data = load_manifest(manifest, "kitti", 0)?;
    let stats = dataset_stats(&data, &ClassSet::default());
    println!("{}: {} images, {} moderate cars", manifest.display(), stats.images, stats.moderate_vehicles);

    let tenth = subset_images(&data, &SplitSpec { fraction: 0.1, seed: 1 })?;
    println!("a 10% subset holds {} images", tenth.len());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match std::env::args().nth(1) {
        Some(p) => report(p.as_ref()),
        None => run_example(),
    }
}

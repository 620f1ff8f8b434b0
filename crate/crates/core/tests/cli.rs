use std::path::Path;
use std::process::{Command, Output};

fn dpm_adapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpm-adapt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(code(&dpm_adapt(&[])), 2);
    assert_eq!(code(&dpm_adapt(&["frobnicate"])), 2);
    assert_eq!(code(&dpm_adapt(&["detect", "--model", "m.dpm"])), 2);
    assert_eq!(code(&dpm_adapt(&["experiment"])), 2);
    assert_eq!(
        code(&dpm_adapt(&["eval", "--detections", "/nonexistent/d.csv", "--data", "/nonexistent/m.tsv", "--out", "/tmp/x"])),
        2
    );
    assert_eq!(code(&dpm_adapt(&["--threads", "0", "synth", "--out", "/tmp/never"])), 2);
    assert_eq!(code(&dpm_adapt(&["--help"])), 0);
}

#[test]
fn bad_config_values_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = dpm_adapt(&[
        "synth",
        "--out",
        path(&data),
        "--source-images",
        "1",
        "--target-train-images",
        "1",
        "--target-test-images",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let cfg = dir.path().join("experiment.toml");
    let body = "source = \"data/source/manifest.tsv\"\ntarget_train = \"data/target-train/manifest.tsv\"\ntarget_test = \"data/target-test/manifest.tsv\"\n";
    std::fs::write(&cfg, format!("{body}[adapt]\ngamma = -1.0\n")).unwrap();
    assert_eq!(code(&dpm_adapt(&["--config", path(&cfg), "experiment"])), 2);
    std::fs::write(&cfg, format!("{body}modes = [\"SRC\", \"TARGET\"]\n")).unwrap();
    assert_eq!(code(&dpm_adapt(&["--config", path(&cfg), "experiment"])), 2);
    assert_eq!(code(&dpm_adapt(&["--config", path(&cfg), "experiment", "--modes", "SRC,BOGUS"])), 2);

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "[train]\nparts = 3\n").unwrap();
    let manifest = data.join("source").join("manifest.tsv");
    assert_eq!(
        code(&dpm_adapt(&["--config", path(&unknown), "train", "--data", path(&manifest), "--out", path(&dir.path().join("m.dpm"))])),
        2
    );
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("broken.dpm");
    std::fs::write(&model, b"not a model").unwrap();
    let manifest = dir.path().join("manifest.tsv");
    std::fs::write(&manifest, "missing.png\tmissing.txt\n").unwrap();
    let o = dpm_adapt(&["detect", "--model", path(&model), "--data", path(&manifest), "--out", path(&dir.path().join("d.csv"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn synth_detections_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = dpm_adapt(&[
        "--seed",
        "7",
        "synth",
        "--out",
        path(&data),
        "--source-images",
        "2",
        "--target-train-images",
        "1",
        "--target-test-images",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let test_manifest = data.join("target-test").join("manifest.tsv");
    let d = dpm_adapt::data::load_manifest(&test_manifest, "test", 0).unwrap();

    let mut records = Vec::new();
    for e in &d.entries {
        for (k, a) in e.annotations.iter().enumerate() {
            records.push(dpm_adapt::inference::DetectionRecord {
                image_id: e.image_id(),
                bbox: a.bbox,
                score: 1.0 - 0.1 * k as f64,
                component: 0,
            });
        }
    }
    let dets = dir.path().join("dets.csv");
    let f = std::fs::File::create(&dets).unwrap();
    dpm_adapt::inference::write_detections_csv(f, &records).unwrap();

    let out = dir.path().join("eval");
    let o = dpm_adapt(&["eval", "--detections", path(&dets), "--data", path(&test_manifest), "--out", path(&out), "--label", "oracle"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("log-average MR 0.0000"), "{stdout}");
    let points = std::fs::File::open(out.join("eval_points.csv")).unwrap();
    let c = dpm_adapt::eval::read_points_csv(std::io::BufReader::new(points)).unwrap();
    assert_eq!(c.n_images, 3);
    assert_eq!(c.points.last().unwrap().1, 0.0);
    let svg = std::fs::read_to_string(out.join("eval.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("plot is well-formed XML");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().any(|n| n.has_tag_name("polyline") || n.has_tag_name("path")));

    let again = dir.path().join("data2");
    let o = dpm_adapt(&[
        "--seed",
        "7",
        "synth",
        "--out",
        path(&again),
        "--source-images",
        "2",
        "--target-train-images",
        "1",
        "--target-test-images",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    let files = tree(&data);
    assert!(files.len() > 6);
    assert_eq!(files, tree(&again));
    for f in &files {
        assert_eq!(std::fs::read(data.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f:?}");
    }
}

fn tree(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

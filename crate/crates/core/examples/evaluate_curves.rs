// FPPI / miss-rate evaluation on hand-made detections, then mean and std
// curves over three runs written as CSV and SVG.
//
// Run with `cargo run --example evaluate_curves`.

use dpm_adapt::eval::{aggregate, curve, emit, legend_label, log_average_mr, mean_mr, ImageGroundTruth};
use dpm_adapt::geometry::BBox;

fn b(l: f64, t: f64, r: f64, bt: f64) -> BBox {
    BBox::new(l, t, r, bt).expect("valid box")
}

pub fn run_example() -> anyhow::Result<()> {
    // two images, three vehicles
    let gts = vec![
        ImageGroundTruth {
            targets: vec![b(10.0, 10.0, 60.0, 40.0), b(100.0, 20.0, 150.0, 50.0)],
            ignore: vec![b(200.0, 0.0, 240.0, 30.0)],
        },
        ImageGroundTruth {
            targets: vec![b(30.0, 30.0, 90.0, 60.0)],
            ignore: vec![],
        },
    ];
    let dets = vec![
        vec![(b(10.0, 10.0, 60.0, 40.0), 0.9), (b(201.0, 0.0, 240.0, 30.0), 0.85)],
        vec![(b(150.0, 80.0, 200.0, 110.0), 0.8), (b(32.0, 30.0, 90.0, 62.0), 0.7)],
    ];
    let c = curve(&dets, &gts)?;
    println!("operating points (fppi, miss rate): {:?}", c.points);
    println!("log-average MR {:.4}, mean MR {:.4}", log_average_mr(&c), mean_mr(&c));

    // three runs of a weaker detector: drop the best detection in turn
    let runs: Vec<_> = (0..3)
        .map(|k| {
            let mut d = dets.clone();
            if k > 0 {
                d[0].remove(0);
            }
            if k > 1 {
                d[1].pop();
            }
            curve(&d, &gts)
        })
        .collect::<Result<_, _>>()?;
    let strong = aggregate("strong", &[c.clone(), c])?;
    let weak = aggregate("weak", &runs)?;
    for a in [&strong, &weak] {
        println!("{} (log-average std {:.4})", legend_label(a), a.log_average_std());
    }
    let out = std::env::temp_dir().join("dpm-adapt-examples").join("curves");
    emit(&out, "demo", "Hand-made detections", &[strong, weak])?;
    println!("curves written to {}", out.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}

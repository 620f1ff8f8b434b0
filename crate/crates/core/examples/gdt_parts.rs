// Generalized distance transform: how a part's score spreads under its
// deformation cost.
//
// Run with `cargo run --example gdt_parts`.

use dpm_adapt::inference::{gdt, ScoreMap};
use dpm_adapt::model::Deformation;

fn brute_force(m: &ScoreMap, d: &Deformation, y: usize, x: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for yy in 0..m.rows() {
        for xx in 0..m.cols() {
            let (dx, dy) = (xx as f64 - x as f64, yy as f64 - y as f64);
            best = best.max(m.get(yy, xx) - d.cost(dx, dy));
        }
    }
    best
}

pub fn run_example() -> anyhow::Result<()> {
    let (rows, cols) = (9, 13);
    let mut values = vec![0.0; rows * cols];
    values[4 * cols + 6] = 5.0;
    values[1 * cols + 1] = 2.0;
    let scores = ScoreMap::new(rows, cols, values);

    for d in [Deformation::new(0.0, 0.0, 0.1, 0.1), Deformation::new(0.0, 0.0, 1.0, 0.25), Deformation::new(0.0, 0.0, 1e6, 1e6)] {
        let t = gdt(&scores, &d)?;
        println!("deformation {:?}", d.as_array());
        for y in 0..rows {
            let row: Vec<String> = (0..cols).map(|x| format!("{:5.2}", t.get(y, x))).collect();
            println!("  {}", row.join(" "));
        }
        let mut worst = 0.0f64;
        for y in 0..rows {
            for x in 0..cols {
                worst = worst.max((t.get(y, x) - brute_force(&scores, &d, y, x)).abs());
            }
        }
        println!("  argmax at (0, 0): {:?}; max |gdt - brute force| = {worst:e}", t.arg(0, 0));
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}

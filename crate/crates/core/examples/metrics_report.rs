//! Scores a few simple "despecklers" (identity, box blur, oracle) with every
//! quality index and prints the metrics table.
//!
//! cargo run --release --example metrics_report

use despeckle::dataset::synthetic_scene;
use despeckle::metrics::{evaluate, metrics_table};
use despeckle::{conv2d, sample_speckle, BoundaryMode, Kernel, SpeckleConfig};

fn main() -> despeckle::Result<()> {
    let looks = 3;
    let clean = synthetic_scene(128, 128, 255.0, 7);
    let pair = sample_speckle(&clean, &SpeckleConfig::new(looks, 7)?)?;
    let mut rows = Vec::new();
    rows.push(("identity".to_string(), looks, evaluate(&pair.noisy, &clean, &pair.noisy, looks, 255.0)?));
    for m in [3, 5, 7] {
        let boxk = Kernel::new(m, vec![1.0 / (m * m) as f64; m * m])?;
        let blurred = conv2d(&pair.noisy, &boxk, BoundaryMode::Symmetric)?;
        rows.push((format!("box{m}"), looks, evaluate(&blurred, &clean, &pair.noisy, looks, 255.0)?));
    }
    let oracle = evaluate(&clean, &clean, &pair.noisy, looks, 255.0)?;
    rows.push(("oracle".to_string(), looks, oracle));
    print!("{}", metrics_table(&rows));
    println!(
        "ideal ratio-image variance (4/pi-1)/L = {:.5}; clean-image C_u = {:.5}",
        oracle.ri_v_ideal, oracle.c_u_ideal
    );
    Ok(())
}

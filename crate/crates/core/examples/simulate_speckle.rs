//! Speckles a synthetic scene at several noise levels and prints the
//! empirical noise statistics next to the closed-form ones.
//!
//! cargo run --release --example simulate_speckle -- [output-dir]

use std::f64::consts::PI;
use std::path::PathBuf;

use despeckle::dataset::synthetic_scene;
use despeckle::io::save_image;
use despeckle::metrics::{psnr, ratio_image_stats};
use despeckle::speckle::{sample_speckle, speckle_field, SpeckleConfig};

fn main() -> despeckle::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let clean = synthetic_scene(256, 256, 255.0, 1);
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
        save_image(&clean, dir.join("clean.pgm"), 255.0)?;
    }

    println!("looks  E[n]     E[n^2]   var/mean^2  (4/pi-1)/L  noisy PSNR");
    for looks in [1, 2, 4, 8, 16] {
        let cfg = SpeckleConfig::new(looks, 42)?;
        let n = speckle_field(512, 512, &cfg)?;
        let mean = n.mean();
        let second = n.as_slice().iter().map(|v| v * v).sum::<f64>() / n.len() as f64;
        let pair = sample_speckle(&clean, &cfg)?;
        let ri = ratio_image_stats(&pair.noisy, &pair.clean, looks)?;
        println!(
            "{looks:>5}  {mean:.4}   {second:.4}   {:.4}      {:.4}      {:.2} dB",
            ri.variance / (ri.mean * ri.mean),
            ri.ideal_variance,
            psnr(&pair.noisy, &clean, 255.0)?
        );
        if let Some(dir) = &out {
            save_image(&pair.noisy, dir.join(format!("noisy_L{looks}.pgm")), 255.0)?;
        }
    }
    println!("one-look amplitude mean should be sqrt(pi)/2 = {:.4}", PI.sqrt() / 2.0);
    Ok(())
}

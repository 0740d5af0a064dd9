//! Trains the proximal and the projected reaction variants on data whose
//! values mostly lie below one and applies both to a constant 0.5 image.
//! The projected variant cannot go below its floor of 1.
//!
//! cargo run --release --example variant_comparison

use despeckle::dataset::{speckle_all, synthetic_scene};
use despeckle::metrics::psnr;
use despeckle::{run_diffusion, train, Image, ModelSpec, Schedule, SpeckleConfig, TrainConfig, Variant};

fn main() -> despeckle::Result<()> {
    let looks = 1;
    let clean: Vec<Image> = (0..20).map(|i| synthetic_scene(64, 64, 1.0, 2000 + i)).collect();
    let train_set = speckle_all(&clean, &SpeckleConfig::new(looks, 6)?)?;
    let constant = Image::filled(64, 64, 0.5);
    let test = despeckle::sample_speckle(&constant, &SpeckleConfig::new(looks, 66)?)?;
    println!("noisy input: {:.2} dB", psnr(&test.noisy, &constant, 0.5)?);

    for variant in [Variant::Prox, Variant::Projected { floor: 1.0 }] {
        let cfg = TrainConfig {
            model: ModelSpec {
                stages: 5,
                filter_size: 3,
                looks,
                value_range: 1.0,
                variant,
                seed: 6,
                ..ModelSpec::default()
            },
            schedule: Schedule::GreedyThenJoint,
            greedy_iters: 40,
            joint_iters: 80,
            ..TrainConfig::default()
        };
        let model = train(&cfg, &train_set)?.model;
        let (u, _) = run_diffusion(&test.noisy, &model, false)?;
        println!(
            "{:<9} {:.2} dB, output mean {:.3}, min {:.3}",
            variant.name(),
            psnr(&u, &constant, 0.5)?,
            u.mean(),
            u.min()
        );
    }
    Ok(())
}

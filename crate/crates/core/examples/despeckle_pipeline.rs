//! End-to-end: synthetic training set, greedy-then-joint training, and
//! held-out evaluation of the trained filter.
//!
//! cargo run --release --example despeckle_pipeline

use despeckle::dataset::{speckle_all, synthetic_scene};
use despeckle::metrics::{evaluate, metrics_table};
use despeckle::training::train_with_progress;
use despeckle::{run_diffusion, Image, ModelSpec, Schedule, SpeckleConfig, TrainConfig};

fn main() -> despeckle::Result<()> {
    let looks = 4;
    let scenes = |n: usize, size: usize, seed: u64| -> Vec<Image> {
        (0..n).map(|i| synthetic_scene(size, size, 255.0, seed + i as u64)).collect()
    };
    let train_set = speckle_all(&scenes(20, 64, 1000), &SpeckleConfig::new(looks, 5)?)?;
    let test_set = speckle_all(&scenes(3, 128, 9000), &SpeckleConfig::new(looks, 6)?)?;

    let cfg = TrainConfig {
        model: ModelSpec {
            stages: 5,
            filter_size: 3,
            looks,
            ..ModelSpec::default()
        },
        schedule: Schedule::GreedyThenJoint,
        greedy_iters: 60,
        joint_iters: 150,
        ..TrainConfig::default()
    };
    let outcome = train_with_progress(&cfg, &train_set, &mut |r| {
        if r.iter % 20 == 0 {
            println!("{r}");
        }
    })?;
    println!("training loss {:.4e} -> {:.4e}", outcome.initial_loss, outcome.final_loss);

    let mut rows = Vec::new();
    for (i, pair) in test_set.iter().enumerate() {
        let (u, _) = run_diffusion(&pair.noisy, &outcome.model, false)?;
        rows.push((format!("noisy{i}"), looks, evaluate(&pair.noisy, &pair.clean, &pair.noisy, looks, 255.0)?));
        rows.push((format!("despeckled{i}"), looks, evaluate(&u, &pair.clean, &pair.noisy, looks, 255.0)?));
    }
    print!("{}", metrics_table(&rows));
    Ok(())
}

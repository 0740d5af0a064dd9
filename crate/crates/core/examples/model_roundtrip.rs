//! Saves a model, reloads it, and checks that the parameters and outputs are
//! bit-identical.
//!
//! cargo run --release --example model_roundtrip -- [model.json]

use despeckle::dataset::synthetic_scene;
use despeckle::io::{load_model, save_model};
use despeckle::{run_diffusion, sample_speckle, DiffusionModel, ModelSpec, SpeckleConfig};

fn main() -> despeckle::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("despeckle_model.json").display().to_string());
    let model = DiffusionModel::init(&ModelSpec {
        stages: 3,
        filter_size: 5,
        looks: 2,
        seed: 11,
        ..ModelSpec::default()
    })?;
    save_model(&model, &path)?;
    let back = load_model(&path)?;
    let same_bits = model
        .to_vec()
        .iter()
        .zip(back.to_vec())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("{} parameters written to {path}; bit-identical after reload: {same_bits}", model.param_count());

    let pair = sample_speckle(&synthetic_scene(64, 64, 255.0, 3), &SpeckleConfig::new(2, 3)?)?;
    let (a, _) = run_diffusion(&pair.noisy, &model, false)?;
    let (b, _) = run_diffusion(&pair.noisy, &back, false)?;
    println!("outputs identical: {}", a == b);
    Ok(())
}

//! Compares backpropagated gradients with central differences for a few
//! small models of both reaction variants.
//!
//! cargo run --release --example gradient_check

use despeckle::model::{DiffusionModel, ModelSpec, Variant};
use despeckle::speckle::{sample_speckle, SpeckleConfig};
use despeckle::training::finite_diff_check;
use despeckle::Image;

fn main() -> despeckle::Result<()> {
    let clean = Image::from_fn(8, 8, |x, y| 1.0 + 0.3 * x as f64 + 0.2 * ((y * 5) % 7) as f64);
    let pair = sample_speckle(&clean, &SpeckleConfig::new(2, 1)?)?;
    for variant in [Variant::Prox, Variant::Projected { floor: 1.0 }] {
        for (stages, filters) in [(1, 2), (2, 8)] {
            let model = DiffusionModel::init(&ModelSpec {
                stages,
                filter_size: 3,
                num_filters: Some(filters),
                rbf_count: 5,
                looks: 2,
                value_range: 4.0,
                variant,
                init_slope: 0.05,
                init_lambda: 0.3,
                seed: 3,
            })?;
            let report = finite_diff_check(&model, &pair, 1e-4)?;
            println!("{:<9} T={stages} Nk={filters}: {report}", variant.name());
        }
    }
    Ok(())
}

//! Multiplicative speckle: noise synthesis, the three data terms and the
//! closed-form proximal map of the I-divergence term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

/// Name recorded in run metadata for the noise generator.
pub const GENERATOR_NAME: &str = "chacha8-stream-per-pixel";

/// Pixels with `f` below this are lifted to it before the proximal step.
pub const F_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeckleConfig {
    pub looks: u32,
    pub seed: u64,
}

impl SpeckleConfig {
    pub fn new(looks: u32, seed: u64) -> Result<Self> {
        if looks == 0 {
            return Err(Error::Parameter("number of looks must be at least 1".into()));
        }
        Ok(SpeckleConfig { looks, seed })
    }
}

/// Clean image together with its speckled observation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPair {
    pub clean: Image,
    pub noisy: Image,
    pub config: SpeckleConfig,
}

/// Amplitude speckle for one pixel: the square root of the mean of `looks`
/// unit-mean exponential intensities, so `n` is Nakagami(L, 1) with `E[n²] = 1`.
fn pixel_noise(base: &ChaCha8Rng, index: u64, looks: u32) -> f64 {
    let mut rng = base.clone();
    rng.set_stream(index);
    let mut intensity = 0.0;
    for _ in 0..looks {
        let e: f64 = Exp1.sample(&mut rng);
        intensity += e;
    }
    (intensity / looks as f64).sqrt()
}

/// Noise field `n` of the given size. Each pixel draws from its own stream
/// keyed by its linear index, so the result does not depend on scheduling.
pub fn speckle_field(width: usize, height: usize, cfg: &SpeckleConfig) -> Result<Image> {
    if cfg.looks == 0 {
        return Err(Error::Parameter("number of looks must be at least 1".into()));
    }
    let base = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = vec![0.0; width * height];
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                *v = pixel_noise(&base, (y * width + x) as u64, cfg.looks);
            }
        });
    Image::new(width, height, data)
}

/// `f = u ⊙ n` with Nakagami-distributed `n`.
pub fn sample_speckle(u: &Image, cfg: &SpeckleConfig) -> Result<NoisyPair> {
    if let Some(i) = u.as_slice().iter().position(|&v| v < 0.0) {
        return Err(Error::Domain(format!("negative clean pixel at index {i}")));
    }
    let n = speckle_field(u.width(), u.height(), cfg)?;
    let noisy = u.zip_map(&n, |a, b| a * b)?;
    Ok(NoisyPair {
        clean: u.clone(),
        noisy,
        config: *cfg,
    })
}

fn require_positive(u: &Image, what: &str) -> Result<()> {
    if let Some(i) = u.as_slice().iter().position(|&v| v <= 0.0) {
        return Err(Error::Domain(format!("{what} must be positive (index {i})")));
    }
    Ok(())
}

/// Negative log-likelihood of the Nakagami model, `⟨L(2 log u + f²/u²), 1⟩`.
pub fn energy_d1(u: &Image, f: &Image, looks: u32) -> Result<f64> {
    u.check_same_dims(f)?;
    require_positive(u, "u")?;
    let l = looks as f64;
    Ok(u.as_slice()
        .iter()
        .zip(f.as_slice())
        .map(|(&u, &f)| l * (2.0 * u.ln() + f * f / (u * u)))
        .sum())
}

/// Log-domain data term, `⟨L(2w + f² e^{−2w}), 1⟩` with `w = log u`.
pub fn energy_d2(w: &Image, f: &Image, looks: u32) -> Result<f64> {
    w.check_same_dims(f)?;
    let l = looks as f64;
    Ok(w.as_slice()
        .iter()
        .zip(f.as_slice())
        .map(|(&w, &f)| l * (2.0 * w + f * f * (-2.0 * w).exp()))
        .sum())
}

/// I-divergence data term, `⟨λ(u² − 2f² log u), 1⟩`.
pub fn energy_d3(u: &Image, f: &Image, lambda: f64) -> Result<f64> {
    u.check_same_dims(f)?;
    require_positive(u, "u")?;
    Ok(u.as_slice()
        .iter()
        .zip(f.as_slice())
        .map(|(&u, &f)| lambda * (u * u - 2.0 * f * f * u.ln()))
        .sum())
}

/// Value and partial derivatives of the scalar proximal map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxPartials {
    pub value: f64,
    /// `∂û/∂ũ`
    pub d_tilde: f64,
    /// `∂û/∂λ`
    pub d_lambda: f64,
}

/// Scalar proximal map of `λ(u² − 2f² log u)` evaluated at `ũ`.
///
/// For `ũ < 0` the rationalized form `4λf² / (S − ũ)` is used, which stays
/// strictly positive where the textbook form cancels.
#[inline]
pub fn prox_idiv_scalar(u_tilde: f64, f: f64, lambda: f64) -> f64 {
    let f = f.max(F_FLOOR);
    let f2 = f * f;
    let a = 1.0 + 2.0 * lambda;
    let s = (u_tilde * u_tilde + 8.0 * a * lambda * f2).sqrt();
    if u_tilde >= 0.0 {
        (u_tilde + s) / (2.0 * a)
    } else {
        4.0 * lambda * f2 / (s - u_tilde)
    }
}

#[inline]
pub fn prox_idiv_partials(u_tilde: f64, f: f64, lambda: f64) -> ProxPartials {
    let f = f.max(F_FLOOR);
    let f2 = f * f;
    let a = 1.0 + 2.0 * lambda;
    let s = (u_tilde * u_tilde + 8.0 * a * lambda * f2).sqrt();
    // bracket = 1 + ũ/S, kept positive for negative ũ
    let (value, bracket) = if u_tilde >= 0.0 {
        ((u_tilde + s) / (2.0 * a), 1.0 + u_tilde / s)
    } else {
        let num = 8.0 * a * lambda * f2;
        (4.0 * lambda * f2 / (s - u_tilde), num / (s * (s - u_tilde)))
    };
    let d_tilde = bracket / (2.0 * a);
    // (2f² + 8λf²) / ((1+2λ) S) − (ũ + S)/(1+2λ)², with ũ + S = 2(1+2λ)û
    let d_lambda = (2.0 * f2 + 8.0 * lambda * f2) / (a * s) - 2.0 * value / a;
    ProxPartials {
        value,
        d_tilde,
        d_lambda,
    }
}

/// Pixelwise proximal map of the I-divergence term.
pub fn prox_idiv(u_tilde: &Image, f: &Image, lambda: f64) -> Result<Image> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
    }
    u_tilde.zip_map(f, |u, f| prox_idiv_scalar(u, f, lambda))
}

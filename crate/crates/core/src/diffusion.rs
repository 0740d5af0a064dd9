//! Forward despeckling: each stage applies a learned diffusion force and then
//! a reaction step (closed-form prox, or the projected explicit variant).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{conv2d_direct_unchecked, conv2d_fft_unchecked, Image, Kernel};
use crate::model::{DiffusionModel, FilterBasis, StageParams, Variant};
use crate::speckle::prox_idiv_scalar;

/// Knee width of the smoothed projection, relative to the floor.
pub const PROJECTION_SHARPNESS: f64 = 0.01;

/// Intermediates of one stage kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub u_prev: Image,
    pub u_tilde: Image,
    /// Filter responses `z_i = k_i * u_prev`.
    pub z: Vec<Image>,
    pub u_next: Image,
}

/// A stage's filters and their 180° rotations.
pub(crate) struct StageKernels {
    pub kernels: Vec<Kernel>,
    pub rotated: Vec<Kernel>,
}

impl StageKernels {
    pub fn new(stage: &StageParams, basis: &FilterBasis) -> Self {
        let kernels = stage.kernels(basis);
        let rotated = kernels.iter().map(Kernel::rotate180).collect();
        StageKernels { kernels, rotated }
    }
}

/// Convolution without the size check; callers validate image size once.
pub(crate) fn conv(img: &Image, k: &Kernel) -> Image {
    if k.size() >= 11 {
        conv2d_fft_unchecked(img, k)
    } else {
        conv2d_direct_unchecked(img, k)
    }
}

pub(crate) fn basis_for(stage: &StageParams) -> Result<FilterBasis> {
    let n = stage
        .filters
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Parameter("stage has no filters".into()))?;
    let m = ((n + 1) as f64).sqrt().round() as usize;
    if m * m != n + 1 {
        return Err(Error::Parameter(format!("{n} filter coefficients is not m²−1")));
    }
    FilterBasis::new(m)
}

fn check_inputs(u: &Image, f: &Image, m: usize) -> Result<()> {
    u.check_same_dims(f)?;
    if m > 2 * u.width().min(u.height()) + 1 {
        return Err(Error::InvalidKernel(format!(
            "{m}x{m} filters too large for a {}x{} image",
            u.width(),
            u.height()
        )));
    }
    Ok(())
}

fn ensure_finite(img: &Image, stage: usize, what: &str) -> Result<()> {
    if img.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage,
            what: what.to_string(),
        })
    }
}

/// `Σ_i k̄_i * φ_i(k_i * u)` together with the responses `z_i`.
pub(crate) fn diffusion_force(
    u: &Image,
    stage: &StageParams,
    kernels: &StageKernels,
) -> (Image, Vec<Image>) {
    let parts: Vec<(Image, Image)> = (0..stage.num_filters())
        .into_par_iter()
        .map(|i| {
            let z = conv(u, &kernels.kernels[i]);
            let phi = z.map(|v| stage.influences[i].eval(v));
            (conv(&phi, &kernels.rotated[i]), z)
        })
        .collect();
    let mut force = vec![0.0; u.len()];
    let mut zs = Vec::with_capacity(parts.len());
    // fixed ascending order keeps the sum reproducible
    for (contrib, z) in parts {
        for (a, b) in force.iter_mut().zip(contrib.as_slice()) {
            *a += b;
        }
        zs.push(z);
    }
    (Image::from_raw(u.width(), u.height(), force), zs)
}

/// `c + τ·softplus((x − c)/τ)` with `τ = 0.01·c`; returns value and slope.
#[inline]
pub fn smooth_max(x: f64, floor: f64) -> (f64, f64) {
    let tau = PROJECTION_SHARPNESS * floor;
    let s = (x - floor) / tau;
    let (sp, sig) = if s > 0.0 {
        let e = (-s).exp();
        (s + e.ln_1p(), 1.0 / (1.0 + e))
    } else {
        let e = s.exp();
        (e.ln_1p(), e / (1.0 + e))
    };
    (floor + tau * sp, sig)
}

/// Explicit reaction of the Nakagami term as used by the projected variant,
/// `(λ/u)(1 − f²/u²)`, and its derivative in `u`.
#[inline]
pub(crate) fn projected_reaction(u: f64, f: f64, lambda: f64) -> (f64, f64) {
    let inv = 1.0 / u;
    let r = f * f * inv * inv;
    (lambda * inv * (1.0 - r), lambda * inv * inv * (3.0 * r - 1.0))
}

pub(crate) fn step_with(
    u_prev: &Image,
    f: &Image,
    stage: &StageParams,
    kernels: &StageKernels,
    variant: Variant,
    stage_index: usize,
) -> Result<StageTrace> {
    let (force, z) = diffusion_force(u_prev, stage, kernels);
    let lambda = stage.lambda();
    let (u_tilde, u_next) = match variant {
        Variant::Prox => {
            let u_tilde = u_prev.zip_map(&force, |u, d| u - d)?;
            ensure_finite(&u_tilde, stage_index, "diffusion update")?;
            let u_next = u_tilde.zip_map(f, |ut, f| prox_idiv_scalar(ut, f, lambda))?;
            (u_tilde, u_next)
        }
        Variant::Projected { floor } => {
            let data: Vec<f64> = u_prev
                .as_slice()
                .iter()
                .zip(force.as_slice())
                .zip(f.as_slice())
                .map(|((&u, &d), &f)| u - (d + projected_reaction(u, f, lambda).0))
                .collect();
            let u_tilde = Image::from_raw(u_prev.width(), u_prev.height(), data);
            ensure_finite(&u_tilde, stage_index, "diffusion update")?;
            let u_next = u_tilde.map(|v| smooth_max(v, floor).0);
            (u_tilde, u_next)
        }
    };
    ensure_finite(&u_next, stage_index, "reaction step")?;
    Ok(StageTrace {
        u_prev: u_prev.clone(),
        u_tilde,
        z,
        u_next,
    })
}

/// One proximal stage: `ũ = u − Σ k̄_i * φ_i(k_i * u)`, then `prox_idiv(ũ, f, λ)`.
pub fn diffusion_step(u_prev: &Image, f: &Image, stage: &StageParams) -> Result<(Image, StageTrace)> {
    let basis = basis_for(stage)?;
    check_inputs(u_prev, f, basis.size())?;
    let kernels = StageKernels::new(stage, &basis);
    let trace = step_with(u_prev, f, stage, &kernels, Variant::Prox, 0)?;
    Ok((trace.u_next.clone(), trace))
}

/// One projected stage with floor `c`: explicit Nakagami reaction, then a
/// smoothed `max(ũ, c)`.
pub fn diffusion_step_projected(
    u_prev: &Image,
    f: &Image,
    stage: &StageParams,
    floor: f64,
) -> Result<Image> {
    if !(floor > 0.0) {
        return Err(Error::Parameter(format!("projection floor must be positive, got {floor}")));
    }
    let basis = basis_for(stage)?;
    check_inputs(u_prev, f, basis.size())?;
    let kernels = StageKernels::new(stage, &basis);
    Ok(step_with(u_prev, f, stage, &kernels, Variant::Projected { floor }, 0)?.u_next)
}

/// Starting point of the diffusion: the noisy image itself, lifted above the
/// floor for the projected variant.
pub fn initial_state(f: &Image, variant: Variant) -> Image {
    match variant {
        Variant::Prox => f.clone(),
        Variant::Projected { floor } => f.map(|v| smooth_max(v, floor).0),
    }
}

/// Runs stages `range` starting from `u`, optionally recording traces.
pub(crate) fn run_stages(
    u: Image,
    f: &Image,
    model: &DiffusionModel,
    basis: &FilterBasis,
    range: std::ops::Range<usize>,
    traces: Option<&mut Vec<StageTrace>>,
) -> Result<Image> {
    let mut u = u;
    let mut sink = traces;
    for t in range {
        let stage = &model.stages[t];
        let kernels = StageKernels::new(stage, basis);
        let trace = step_with(&u, f, stage, &kernels, model.variant, t)?;
        u = trace.u_next.clone();
        if let Some(ts) = sink.as_deref_mut() {
            ts.push(trace);
        }
    }
    Ok(u)
}

/// Full `T`-stage diffusion from `u_0 = f`.
pub fn run_diffusion(
    f: &Image,
    model: &DiffusionModel,
    keep_traces: bool,
) -> Result<(Image, Option<Vec<StageTrace>>)> {
    model.validate()?;
    if let Some(i) = f.as_slice().iter().position(|&v| v < 0.0) {
        return Err(Error::Domain(format!("negative input pixel at index {i}")));
    }
    let basis = model.basis()?;
    check_inputs(f, f, basis.size())?;
    let u0 = initial_state(f, model.variant);
    if keep_traces {
        let mut traces = Vec::with_capacity(model.num_stages());
        let u = run_stages(u0, f, model, &basis, 0..model.num_stages(), Some(&mut traces))?;
        Ok((u, Some(traces)))
    } else {
        let u = run_stages(u0, f, model, &basis, 0..model.num_stages(), None)?;
        Ok((u, None))
    }
}

/// Convenience wrapper returning only the despeckled image.
pub fn despeckle(f: &Image, model: &DiffusionModel) -> Result<Image> {
    Ok(run_diffusion(f, model, false)?.0)
}

//! Reverse-mode gradients of one diffusion stage.

use crate::diffusion::{basis_for, projected_reaction, smooth_max, StageKernels, StageTrace};
use crate::error::Result;
use crate::image::{conv2d_adjoint_unchecked, conv2d_kernel_gradient, Image};
use crate::model::{FilterBasis, StageParams, Variant};
use crate::speckle::prox_idiv_partials;

/// Gradient of the loss with respect to one stage's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGradient {
    pub beta: f64,
    /// Per filter, over the zero-mean basis.
    pub filters: Vec<Vec<f64>>,
    /// Per filter, one entry per RBF weight.
    pub influences: Vec<Vec<f64>>,
}

impl StageGradient {
    /// Same layout as [`StageParams::to_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.beta];
        for f in &self.filters {
            v.extend_from_slice(f);
        }
        for w in &self.influences {
            v.extend_from_slice(w);
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.to_vec().iter().all(|&v| v == 0.0)
    }
}

/// Per-pixel quantities of the backward pass through a proximal stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientWorkspace {
    /// `φ_i′(z_i)`, the diagonal of `Λ_i`, per filter.
    pub lambda_diag: Vec<Image>,
    /// `∂u_next/∂ũ`, the diagonal of the prox Jacobian.
    pub y: Image,
    /// `∂u_next/∂λ`.
    pub x: Image,
    /// Incoming `∂ℓ/∂u_next`.
    pub adjoint: Image,
}

/// Builds the workspace of a proximal stage for a given incoming adjoint.
pub fn gradient_workspace(
    trace: &StageTrace,
    stage: &StageParams,
    f: &Image,
    adjoint_next: &Image,
) -> Result<GradientWorkspace> {
    trace.u_tilde.check_same_dims(adjoint_next)?;
    let lambda = stage.lambda();
    let (w, h) = trace.u_tilde.dims();
    let mut y = Vec::with_capacity(w * h);
    let mut x = Vec::with_capacity(w * h);
    for (&ut, &fv) in trace.u_tilde.as_slice().iter().zip(f.as_slice()) {
        let p = prox_idiv_partials(ut, fv, lambda);
        y.push(p.d_tilde);
        x.push(p.d_lambda);
    }
    let lambda_diag = trace
        .z
        .iter()
        .zip(&stage.influences)
        .map(|(z, phi)| z.map(|v| phi.derivative(v)))
        .collect();
    Ok(GradientWorkspace {
        lambda_diag,
        y: Image::from_raw(w, h, y),
        x: Image::from_raw(w, h, x),
        adjoint: adjoint_next.clone(),
    })
}

/// Core backward step; returns `∂ℓ/∂u_prev` and, when asked, the parameter gradient.
pub(crate) fn stage_backward(
    trace: &StageTrace,
    stage: &StageParams,
    kernels: &StageKernels,
    basis: &FilterBasis,
    f: &Image,
    variant: Variant,
    adjoint_next: &Image,
    want_params: bool,
) -> (Image, Option<StageGradient>) {
    let (w, h) = trace.u_tilde.dims();
    let lambda = stage.lambda();
    let n = w * h;

    // g = ∂ℓ/∂ũ, plus the reaction's direct contributions
    let mut g = Vec::with_capacity(n);
    let mut beta_grad = 0.0;
    let mut direct = vec![0.0; n];
    match variant {
        Variant::Prox => {
            for p in 0..n {
                let a = adjoint_next.as_slice()[p];
                let part = prox_idiv_partials(trace.u_tilde.as_slice()[p], f.as_slice()[p], lambda);
                g.push(part.d_tilde * a);
                beta_grad += part.d_lambda * a;
            }
            beta_grad *= lambda;
        }
        Variant::Projected { floor } => {
            for p in 0..n {
                let a = adjoint_next.as_slice()[p];
                let gp = smooth_max(trace.u_tilde.as_slice()[p], floor).1 * a;
                let (rho, drho) =
                    projected_reaction(trace.u_prev.as_slice()[p], f.as_slice()[p], lambda);
                // ũ = u − force − ρ(u), and ∂ρ/∂β = ρ
                beta_grad -= gp * rho;
                direct[p] = -gp * drho;
                g.push(gp);
            }
        }
    }
    let g = Image::from_raw(w, h, g);

    let mut adjoint_prev: Vec<f64> = g
        .as_slice()
        .iter()
        .zip(&direct)
        .map(|(a, b)| a + b)
        .collect();
    let mut filter_grads = Vec::new();
    let mut rbf_grads = Vec::new();

    for i in 0..stage.num_filters() {
        let phi = &stage.influences[i];
        let z = &trace.z[i];
        // e_i = K̄_iᵀ g
        let e = conv2d_adjoint_unchecked(&g, &kernels.rotated[i]);
        let mut phi_val = Vec::with_capacity(n);
        let mut e_dphi = Vec::with_capacity(n);
        for (&zv, &ev) in z.as_slice().iter().zip(e.as_slice()) {
            let (v, d) = phi.eval_with_derivative(zv);
            phi_val.push(v);
            e_dphi.push(ev * d);
        }
        let e_dphi = Image::from_raw(w, h, e_dphi);

        // ∂ℓ/∂u −= K_iᵀ Λ_i K̄_iᵀ g
        let back = conv2d_adjoint_unchecked(&e_dphi, &kernels.kernels[i]);
        for (a, b) in adjoint_prev.iter_mut().zip(back.as_slice()) {
            *a -= b;
        }

        if want_params {
            let mut wg = vec![0.0; phi.len()];
            for (&zv, &ev) in z.as_slice().iter().zip(e.as_slice()) {
                if ev != 0.0 {
                    phi.accumulate_basis(zv, -ev, &mut wg);
                }
            }
            rbf_grads.push(wg);

            // k appears once directly and once rotated
            let phi_img = Image::from_raw(w, h, phi_val);
            let m = basis.size();
            let mut via_rot = conv2d_kernel_gradient(&phi_img, &g, m);
            via_rot.reverse();
            let direct_k = conv2d_kernel_gradient(&trace.u_prev, &e_dphi, m);
            let kgrad: Vec<f64> = via_rot
                .iter()
                .zip(&direct_k)
                .map(|(a, b)| -(a + b))
                .collect();
            filter_grads.push(basis.project(&kgrad));
        }
    }

    let grads = want_params.then(|| StageGradient {
        beta: beta_grad,
        filters: filter_grads,
        influences: rbf_grads,
    });
    (Image::from_raw(w, h, adjoint_prev), grads)
}

/// Applies `(∂u_next/∂u_prev)ᵀ` of a proximal stage to `adjoint_next`.
pub fn backprop_adjoint(
    trace: &StageTrace,
    stage: &StageParams,
    f: &Image,
    adjoint_next: &Image,
) -> Result<Image> {
    trace.u_tilde.check_same_dims(adjoint_next)?;
    trace.u_tilde.check_same_dims(f)?;
    let basis = basis_for(stage)?;
    let kernels = StageKernels::new(stage, &basis);
    Ok(stage_backward(trace, stage, &kernels, &basis, f, Variant::Prox, adjoint_next, false).0)
}

/// Gradient of the loss with respect to a proximal stage's parameters, given
/// `∂ℓ/∂u_next`.
pub fn grad_stage_params(
    trace: &StageTrace,
    stage: &StageParams,
    f: &Image,
    adjoint_next: &Image,
) -> Result<StageGradient> {
    trace.u_tilde.check_same_dims(adjoint_next)?;
    trace.u_tilde.check_same_dims(f)?;
    let basis = basis_for(stage)?;
    let kernels = StageKernels::new(stage, &basis);
    let (_, g) = stage_backward(trace, stage, &kernels, &basis, f, Variant::Prox, adjoint_next, true);
    Ok(g.expect("parameter gradients requested"))
}

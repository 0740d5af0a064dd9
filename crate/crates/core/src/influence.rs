//! Influence functions as Gaussian radial-basis mixtures over equispaced centers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Basis functions further than this many bandwidths from `z` are skipped;
/// their contribution is below `exp(-40.5)` of the weight.
const CUTOFF: f64 = 9.0;

/// `φ(z) = Σ_j w_j · exp(−(z − μ_j)² / (2γ²))`, centers `μ_j` equispaced on `[−R, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceFunction {
    weights: Vec<f64>,
    range: f64,
    bandwidth: f64,
}

impl InfluenceFunction {
    /// Bandwidth defaults to the center spacing.
    pub fn new(weights: Vec<f64>, range: f64) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::Parameter("need at least two RBF centers".into()));
        }
        let spacing = 2.0 * range / (weights.len() - 1) as f64;
        Self::with_bandwidth(weights, range, spacing)
    }

    pub fn with_bandwidth(weights: Vec<f64>, range: f64, bandwidth: f64) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::Parameter("need at least two RBF centers".into()));
        }
        if !(range > 0.0) || !range.is_finite() {
            return Err(Error::Parameter(format!("RBF range must be positive, got {range}")));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::Parameter(format!(
                "RBF bandwidth must be positive, got {bandwidth}"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Parameter("non-finite RBF weight".into()));
        }
        Ok(InfluenceFunction {
            weights,
            range,
            bandwidth,
        })
    }

    pub fn zeros(count: usize, range: f64) -> Result<Self> {
        Self::new(vec![0.0; count], range)
    }

    /// Weights chosen so that `φ(μ_j) = slope · μ_j` at every center.
    pub fn linear(count: usize, range: f64, slope: f64) -> Result<Self> {
        let phi = Self::zeros(count, range)?;
        let gram = DMatrix::from_fn(count, count, |i, j| phi.gaussian(phi.center(i), j));
        let rhs = DVector::from_fn(count, |i, _| slope * phi.center(i));
        let w = gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Parameter("singular RBF interpolation system".into()))?;
        Self::new(w.iter().copied().collect(), range)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.range / (self.weights.len() - 1) as f64
    }

    pub fn center(&self, j: usize) -> f64 {
        -self.range + j as f64 * self.spacing()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.center(j)).collect()
    }

    #[inline]
    fn gaussian(&self, z: f64, j: usize) -> f64 {
        let d = (z - self.center(j)) / self.bandwidth;
        (-0.5 * d * d).exp()
    }

    /// Calls `visit(j, g_j(z))` for every basis function within the cutoff.
    ///
    /// Neighbouring Gaussians are generated by the multiplicative recurrence
    /// `g_{j+1} = g_j · r_j`, `r_{j+1} = r_j · exp(−Δ²/γ²)`.
    #[inline]
    fn for_each_basis(&self, z: f64, mut visit: impl FnMut(usize, f64)) {
        let m = self.weights.len();
        let delta = self.spacing();
        let inv_g2 = 1.0 / (self.bandwidth * self.bandwidth);
        let pos = (z + self.range) / delta;
        let nearest = pos.round().clamp(0.0, (m - 1) as f64) as usize;
        let d0 = z - self.center(nearest);
        if d0.abs() > CUTOFF * self.bandwidth {
            return;
        }
        let reach = (CUTOFF * self.bandwidth / delta).ceil() as usize + 1;
        let g0 = (-0.5 * d0 * d0 * inv_g2).exp();
        visit(nearest, g0);
        let q = (-delta * delta * inv_g2).exp();

        let mut g = g0;
        let mut r = ((2.0 * d0 * delta - delta * delta) * 0.5 * inv_g2).exp();
        let hi = (nearest + reach).min(m - 1);
        for j in nearest + 1..=hi {
            g *= r;
            r *= q;
            visit(j, g);
        }

        let mut g = g0;
        let mut r = ((-2.0 * d0 * delta - delta * delta) * 0.5 * inv_g2).exp();
        let lo = nearest.saturating_sub(reach);
        for j in (lo..nearest).rev() {
            g *= r;
            r *= q;
            visit(j, g);
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_basis(z, |j, g| acc += self.weights[j] * g);
        acc
    }

    pub fn derivative(&self, z: f64) -> f64 {
        self.eval_with_derivative(z).1
    }

    /// `(φ(z), φ′(z))`
    pub fn eval_with_derivative(&self, z: f64) -> (f64, f64) {
        let inv_g2 = 1.0 / (self.bandwidth * self.bandwidth);
        let mut v = 0.0;
        let mut dv = 0.0;
        self.for_each_basis(z, |j, g| {
            let wg = self.weights[j] * g;
            v += wg;
            dv -= wg * (z - self.center(j)) * inv_g2;
        });
        (v, dv)
    }

    pub fn eval_slice(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.eval(v)).collect()
    }

    pub fn derivative_slice(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.derivative(v)).collect()
    }

    /// Adds `scale · g_j(z)` to `out[j]` for every basis function; used for
    /// weight gradients, since `∂φ(z)/∂w_j = g_j(z)`.
    pub(crate) fn accumulate_basis(&self, z: f64, scale: f64, out: &mut [f64]) {
        self.for_each_basis(z, |j, g| out[j] += scale * g);
    }
}

/// Evaluates `φ` pointwise over a sequence.
pub fn eval_influence(phi: &InfluenceFunction, z: &[f64]) -> Vec<f64> {
    phi.eval_slice(z)
}

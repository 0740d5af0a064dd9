//! Stage parameters and the multi-stage diffusion model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Kernel;
use crate::influence::InfluenceFunction;

/// Influence-function range for inputs peaking at 255.
pub const RBF_RANGE_AT_255: f64 = 310.0;

/// Orthonormal zero-mean basis for `m × m` filters: every 2-D DCT-II atom
/// except the constant one.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBasis {
    size: usize,
    atoms: Vec<Vec<f64>>,
}

impl FilterBasis {
    pub fn new(size: usize) -> Result<Self> {
        if size.is_multiple_of(2) || size < 3 {
            return Err(Error::Parameter(format!(
                "filter size must be odd and at least 3, got {size}"
            )));
        }
        let m = size as f64;
        let dct = |p: usize, n: usize| {
            let a = if p == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            a * (std::f64::consts::PI * (2 * n + 1) as f64 * p as f64 / (2.0 * m)).cos()
        };
        let mut atoms = Vec::with_capacity(size * size - 1);
        for p in 0..size {
            for q in 0..size {
                if p == 0 && q == 0 {
                    continue;
                }
                let mut atom = Vec::with_capacity(size * size);
                for row in 0..size {
                    for col in 0..size {
                        atom.push(dct(p, row) * dct(q, col));
                    }
                }
                atoms.push(atom);
            }
        }
        Ok(FilterBasis { size, atoms })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of atoms, `m² − 1`.
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j]
    }

    pub fn compose(&self, coeffs: &[f64]) -> Kernel {
        debug_assert_eq!(coeffs.len(), self.atoms.len());
        let mut k = vec![0.0; self.size * self.size];
        for (c, atom) in coeffs.iter().zip(&self.atoms) {
            for (kv, a) in k.iter_mut().zip(atom) {
                *kv += c * a;
            }
        }
        Kernel::from_raw(self.size, k)
    }

    /// Pulls a gradient with respect to raw kernel entries back onto the basis.
    pub fn project(&self, kernel_grad: &[f64]) -> Vec<f64> {
        self.atoms
            .iter()
            .map(|atom| atom.iter().zip(kernel_grad).map(|(a, g)| a * g).sum())
            .collect()
    }
}

/// Which reaction step closes each stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Closed-form proximal map of the I-divergence term.
    Prox,
    /// Explicit reaction on the Nakagami term followed by a smoothed `max(·, floor)`.
    Projected { floor: f64 },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Prox => "prox",
            Variant::Projected { .. } => "projected",
        }
    }
}

/// Trainable parameters of one diffusion stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// `λ = e^β`
    pub beta: f64,
    /// One coefficient vector over the [`FilterBasis`] per filter.
    pub filters: Vec<Vec<f64>>,
    pub influences: Vec<InfluenceFunction>,
}

impl StageParams {
    pub fn lambda(&self) -> f64 {
        self.beta.exp()
    }

    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn kernels(&self, basis: &FilterBasis) -> Vec<Kernel> {
        self.filters.iter().map(|c| basis.compose(c)).collect()
    }

    /// Number of scalars when flattened: `1 + N_k·(m²−1) + N_k·M`.
    pub fn param_count(&self) -> usize {
        1 + self.filters.iter().map(Vec::len).sum::<usize>()
            + self.influences.iter().map(InfluenceFunction::len).sum::<usize>()
    }

    /// Layout: `[β, filter 0 coeffs, …, filter N−1 coeffs, rbf 0 weights, …]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.push(self.beta);
        for f in &self.filters {
            v.extend_from_slice(f);
        }
        for phi in &self.influences {
            v.extend_from_slice(phi.weights());
        }
        v
    }

    pub fn set_from_slice(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.param_count());
        self.beta = v[0];
        let mut at = 1;
        for f in &mut self.filters {
            let n = f.len();
            f.copy_from_slice(&v[at..at + n]);
            at += n;
        }
        for phi in &mut self.influences {
            let n = phi.len();
            phi.weights_mut().copy_from_slice(&v[at..at + n]);
            at += n;
        }
    }
}

/// Hyper-parameters for building a freshly initialized model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub stages: usize,
    pub filter_size: usize,
    /// Defaults to `m² − 1` when `None`.
    pub num_filters: Option<usize>,
    pub rbf_count: usize,
    pub looks: u32,
    pub value_range: f64,
    pub variant: Variant,
    /// Initial influence slope, `φ(z) ≈ slope · z`.
    pub init_slope: f64,
    pub init_lambda: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            stages: 10,
            filter_size: 5,
            num_filters: None,
            rbf_count: 63,
            looks: 1,
            value_range: 255.0,
            variant: Variant::Prox,
            init_slope: 0.01,
            init_lambda: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub stages: Vec<StageParams>,
    pub filter_size: usize,
    pub looks: u32,
    pub value_range: f64,
    pub variant: Variant,
    pub generator: String,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
}

impl DiffusionModel {
    /// Seeded initialization: unit-norm random filters over the zero-mean
    /// basis and near-linear influence functions.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        if spec.stages == 0 {
            return Err(Error::Parameter("model needs at least one stage".into()));
        }
        if !(spec.init_lambda > 0.0) {
            return Err(Error::Parameter("initial lambda must be positive".into()));
        }
        if !(spec.value_range > 0.0) {
            return Err(Error::Parameter("value range must be positive".into()));
        }
        if let Variant::Projected { floor } = spec.variant {
            if !(floor > 0.0) {
                return Err(Error::Parameter(format!("projection floor must be positive, got {floor}")));
            }
        }
        let basis = FilterBasis::new(spec.filter_size)?;
        let nk = spec.num_filters.unwrap_or(basis.len());
        if nk == 0 {
            return Err(Error::Parameter("need at least one filter".into()));
        }
        let range = rbf_range(spec.value_range);
        let phi0 = InfluenceFunction::linear(spec.rbf_count, range, spec.init_slope)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let stages = (0..spec.stages)
            .map(|_| {
                let filters = (0..nk)
                    .map(|_| {
                        let mut c: Vec<f64> =
                            (0..basis.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        c.iter_mut().for_each(|v| *v /= norm);
                        c
                    })
                    .collect();
                StageParams {
                    beta: spec.init_lambda.ln(),
                    filters,
                    influences: vec![phi0.clone(); nk],
                }
            })
            .collect();
        let mut metadata = BTreeMap::new();
        metadata.insert("init_lambda".into(), format!("{}", spec.init_lambda));
        metadata.insert("init_slope".into(), format!("{}", spec.init_slope));
        Ok(DiffusionModel {
            stages,
            filter_size: spec.filter_size,
            looks: spec.looks,
            value_range: spec.value_range,
            variant: spec.variant,
            generator: "chacha8".into(),
            seed: spec.seed,
            metadata,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_filters(&self) -> usize {
        self.stages.first().map_or(0, StageParams::num_filters)
    }

    pub fn rbf_count(&self) -> usize {
        self.stages
            .first()
            .and_then(|s| s.influences.first())
            .map_or(0, InfluenceFunction::len)
    }

    pub fn basis(&self) -> Result<FilterBasis> {
        FilterBasis::new(self.filter_size)
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(StageParams::param_count).sum()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.stages.iter().flat_map(StageParams::to_vec).collect()
    }

    pub fn set_from_slice(&mut self, v: &[f64]) {
        let mut at = 0;
        for s in &mut self.stages {
            let n = s.param_count();
            s.set_from_slice(&v[at..at + n]);
            at += n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let basis = self.basis()?;
        let first = self
            .stages
            .first()
            .ok_or_else(|| Error::Parameter("model has no stages".into()))?;
        let nk = first.num_filters();
        let rbf = self.rbf_count();
        if nk == 0 {
            return Err(Error::Parameter("stage has no filters".into()));
        }
        for (t, s) in self.stages.iter().enumerate() {
            if s.num_filters() != nk || s.influences.len() != nk {
                return Err(Error::Parameter(format!("stage {t}: inconsistent filter count")));
            }
            if s.filters.iter().any(|f| f.len() != basis.len()) {
                return Err(Error::Parameter(format!(
                    "stage {t}: filters need {} basis coefficients",
                    basis.len()
                )));
            }
            if s.influences.iter().any(|p| p.len() != rbf) {
                return Err(Error::Parameter(format!("stage {t}: inconsistent RBF count")));
            }
            if !s.beta.is_finite() || s.filters.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!("stage {t}: non-finite parameter")));
            }
        }
        if let Variant::Projected { floor } = self.variant {
            if !(floor > 0.0) {
                return Err(Error::Parameter(format!("projection floor must be positive, got {floor}")));
            }
        }
        Ok(())
    }
}

/// `R = 310 · value_range / 255`.
pub fn rbf_range(value_range: f64) -> f64 {
    RBF_RANGE_AT_255 * value_range / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal_and_zero_mean() {
        for m in [3, 5, 7] {
            let b = FilterBasis::new(m).unwrap();
            assert_eq!(b.len(), m * m - 1);
            for i in 0..b.len() {
                assert!(b.atom(i).iter().sum::<f64>().abs() < 1e-12);
                for j in 0..b.len() {
                    let d: f64 = b.atom(i).iter().zip(b.atom(j)).map(|(x, y)| x * y).sum();
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((d - e).abs() < 1e-12);
                }
            }
        }
        assert!(FilterBasis::new(4).is_err());
        assert!(FilterBasis::new(1).is_err());
    }

    #[test]
    fn project_inverts_compose() {
        let b = FilterBasis::new(3).unwrap();
        let c: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let k = b.compose(&c);
        assert!(k.sum().abs() < 1e-12);
        let back = b.project(k.coeffs());
        for (x, y) in back.iter().zip(&c) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn init_shapes_and_flattening() {
        let spec = ModelSpec {
            stages: 3,
            filter_size: 3,
            rbf_count: 7,
            ..ModelSpec::default()
        };
        let m = DiffusionModel::init(&spec).unwrap();
        m.validate().unwrap();
        assert_eq!(m.num_stages(), 3);
        assert_eq!(m.num_filters(), 8);
        assert_eq!(m.param_count(), 3 * (1 + 8 * 8 + 8 * 7));
        let v = m.to_vec();
        let mut m2 = m.clone();
        m2.set_from_slice(&v.iter().map(|x| x + 1.0).collect::<Vec<_>>());
        m2.set_from_slice(&v);
        assert_eq!(m, m2);
        assert!((m.stages[0].lambda() - 0.1).abs() < 1e-15);
        assert_eq!(DiffusionModel::init(&spec).unwrap(), m);
    }

    #[test]
    fn init_rejects_bad_specs() {
        let bad = [
            ModelSpec { stages: 0, ..ModelSpec::default() },
            ModelSpec { filter_size: 4, ..ModelSpec::default() },
            ModelSpec { rbf_count: 1, ..ModelSpec::default() },
            ModelSpec { variant: Variant::Projected { floor: 0.0 }, ..ModelSpec::default() },
            ModelSpec { num_filters: Some(0), ..ModelSpec::default() },
        ];
        for spec in bad {
            assert!(DiffusionModel::init(&spec).is_err(), "{spec:?}");
        }
    }
}

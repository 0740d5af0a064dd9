//! Supervised training of all stage parameters by backpropagation through
//! the unrolled diffusion.

mod backward;
mod gradcheck;
pub mod lbfgs;

use std::fmt;
use std::ops::Range;

use rayon::prelude::*;

use crate::diffusion::{diffusion_force, initial_state, run_stages, StageKernels, StageTrace};
use crate::error::{Error, Result};
use crate::image::{conv2d_direct_unchecked, Image, Kernel};
use crate::model::{DiffusionModel, FilterBasis, ModelSpec};
use crate::speckle::NoisyPair;

pub use backward::{
    backprop_adjoint, grad_stage_params, gradient_workspace, GradientWorkspace, StageGradient,
};
pub use gradcheck::{compare_gradients, finite_diff_check, GradCheckReport};
pub use lbfgs::{IterRecord, LbfgsOptions, Termination};

/// `½ Σ (u_T − u_gt)²`
pub fn loss(u_t: &Image, u_gt: &Image) -> Result<f64> {
    u_t.check_same_dims(u_gt)?;
    Ok(0.5
        * u_t
            .as_slice()
            .iter()
            .zip(u_gt.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// `∂ℓ/∂u_T = u_T − u_gt`
pub fn loss_gradient(u_t: &Image, u_gt: &Image) -> Result<Image> {
    u_t.zip_map(u_gt, |a, b| a - b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Greedy,
    Joint,
    GreedyThenJoint,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Schedule::Greedy),
            "joint" => Ok(Schedule::Joint),
            "both" | "greedy-then-joint" => Ok(Schedule::GreedyThenJoint),
            other => Err(Error::Parameter(format!("unknown schedule '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Greedy => "greedy",
            Schedule::Joint => "joint",
            Schedule::GreedyThenJoint => "greedy-then-joint",
        }
    }
}

/// Where the loss is measured while stage `t` is trained greedily.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GreedyLoss {
    /// At `u_t`, the output of the stage being trained.
    #[default]
    StageOutput,
    /// At `u_T`, passing through the (still untrained) later stages.
    FinalOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub schedule: Schedule,
    pub greedy_iters: usize,
    pub joint_iters: usize,
    pub greedy_loss: GreedyLoss,
    /// Pick the initial λ by balancing reaction and diffusion on the first sample.
    pub balance_lambda: bool,
    /// Start greedy stage `t > 0` from the trained parameters of stage `t − 1`.
    pub warm_start: bool,
    /// Run a finite-difference check on the initial model before training.
    pub gradient_check: bool,
    pub lbfgs: LbfgsOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelSpec::default(),
            schedule: Schedule::GreedyThenJoint,
            greedy_iters: 200,
            joint_iters: 200,
            greedy_loss: GreedyLoss::StageOutput,
            balance_lambda: true,
            warm_start: true,
            gradient_check: false,
            lbfgs: LbfgsOptions::default(),
        }
    }
}

/// Which part of a run a progress record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Greedy training of the given stage (1-based).
    Stage(usize),
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Stage(t) => write!(f, "{t}"),
            Phase::Joint => f.write_str("joint"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressRecord {
    pub phase: Phase,
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

impl fmt::Display for ProgressRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} iter={} loss={:e} gradnorm={:e}",
            self.phase, self.iter, self.loss, self.grad_norm
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DiffusionModel,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub history: Vec<ProgressRecord>,
}

/// Mean per-sample loss of a set of stages and its gradient.
pub(crate) struct Problem<'a> {
    samples: &'a [NoisyPair],
    starts: Vec<Image>,
    first: usize,
    trainable_end: usize,
    loss_end: usize,
    basis: FilterBasis,
}

impl<'a> Problem<'a> {
    /// Stages `trainable` are optimized; the loss is taken after stage `loss_end − 1`.
    pub fn new(
        model: &DiffusionModel,
        samples: &'a [NoisyPair],
        trainable: Range<usize>,
        loss_end: usize,
    ) -> Result<Self> {
        let basis = model.basis()?;
        let starts = samples
            .par_iter()
            .map(|s| {
                let u0 = initial_state(&s.noisy, model.variant);
                run_stages(u0, &s.noisy, model, &basis, 0..trainable.start, None)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Problem {
            samples,
            starts,
            first: trainable.start,
            trainable_end: trainable.end,
            loss_end,
            basis,
        })
    }

    fn params(&self, model: &DiffusionModel) -> Vec<f64> {
        model.stages[self.first..self.trainable_end]
            .iter()
            .flat_map(|s| s.to_vec())
            .collect()
    }

    fn set_params(&self, model: &mut DiffusionModel, v: &[f64]) {
        let mut at = 0;
        for s in &mut model.stages[self.first..self.trainable_end] {
            let n = s.param_count();
            s.set_from_slice(&v[at..at + n]);
            at += n;
        }
    }

    fn sample_eval(&self, model: &DiffusionModel, idx: usize) -> Result<(f64, Vec<f64>)> {
        let pair = &self.samples[idx];
        let f = &pair.noisy;
        let mut traces: Vec<StageTrace> = Vec::with_capacity(self.loss_end - self.first);
        let u = run_stages(
            self.starts[idx].clone(),
            f,
            model,
            &self.basis,
            self.first..self.loss_end,
            Some(&mut traces),
        )?;
        let value = loss(&u, &pair.clean)?;
        let mut adjoint = loss_gradient(&u, &pair.clean)?;
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for t in (self.first..self.loss_end).rev() {
            let stage = &model.stages[t];
            let kernels = StageKernels::new(stage, &self.basis);
            let want = t < self.trainable_end;
            let (prev, g) = backward::stage_backward(
                &traces[t - self.first],
                stage,
                &kernels,
                &self.basis,
                f,
                model.variant,
                &adjoint,
                want,
            );
            if let Some(g) = g {
                grads.push(g.to_vec());
            }
            adjoint = prev;
        }
        grads.reverse();
        Ok((value, grads.concat()))
    }

    /// Loss and gradient averaged over samples, reduced in sample order.
    pub fn eval(&self, model: &DiffusionModel) -> Result<(f64, Vec<f64>)> {
        let per_sample = (0..self.samples.len())
            .into_par_iter()
            .map(|i| self.sample_eval(model, i))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / self.samples.len() as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; per_sample.first().map_or(0, |p| p.1.len())];
        for (l, g) in per_sample {
            total += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        grad.iter_mut().for_each(|v| *v *= scale);
        Ok((total * scale, grad))
    }

    pub fn optimize(
        &self,
        model: &mut DiffusionModel,
        opts: &LbfgsOptions,
        phase: Phase,
        history: &mut Vec<ProgressRecord>,
        progress: &mut dyn FnMut(&ProgressRecord),
    ) -> Result<(f64, f64)> {
        let x0 = self.params(model);
        let mut work = model.clone();
        let (initial, _) = self.eval(model)?;
        if !initial.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at initialization ({phase} phase)"
            )));
        }
        let res = lbfgs::minimize(
            &x0,
            |x| {
                self.set_params(&mut work, x);
                self.eval(&work)
            },
            opts,
            |r| {
                let rec = ProgressRecord {
                    phase,
                    iter: r.iter,
                    loss: r.loss,
                    grad_norm: r.grad_norm,
                };
                progress(&rec);
                history.push(rec);
            },
        )?;
        self.set_params(model, &res.x);
        Ok((initial, res.loss))
    }
}

/// Mean of `|2u − 2f²/u|` over a 3×3 box-smoothed probe `u`.
fn reaction_scale(f: &Image) -> f64 {
    let boxk = Kernel::from_raw(3, vec![1.0 / 9.0; 9]);
    let u = conv2d_direct_unchecked(f, &boxk);
    let vals: Vec<f64> = u
        .as_slice()
        .iter()
        .zip(f.as_slice())
        .filter(|(u, _)| **u > 0.0)
        .map(|(&u, &f)| (2.0 * u - 2.0 * f * f / u).abs())
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Initial λ for which the reaction gradient and the diffusion force have the
/// same mean magnitude on `probe`.
pub fn balanced_lambda(model: &DiffusionModel, probe: &Image) -> Result<f64> {
    let basis = model.basis()?;
    let kernels = StageKernels::new(&model.stages[0], &basis);
    let (force, _) = diffusion_force(probe, &model.stages[0], &kernels);
    let diffusion = force.as_slice().iter().map(|v| v.abs()).sum::<f64>() / force.len() as f64;
    let reaction = reaction_scale(probe);
    if !(diffusion > 0.0) || !(reaction > 0.0) {
        return Ok(model.stages[0].lambda());
    }
    Ok((diffusion / reaction).clamp(1e-4, 10.0))
}

fn validate_samples(samples: &[NoisyPair], filter_size: usize) -> Result<u32> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Training("no training samples".into()))?;
    let looks = first.config.looks;
    for (i, s) in samples.iter().enumerate() {
        s.clean.check_same_dims(&s.noisy)?;
        if s.config.looks != looks {
            return Err(Error::Training(format!(
                "sample {i} has L={} but sample 0 has L={looks}",
                s.config.looks
            )));
        }
        if filter_size > 2 * s.clean.width().min(s.clean.height()) + 1 {
            return Err(Error::Training(format!("sample {i} is smaller than the filters")));
        }
        if s.noisy.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::Training(format!("sample {i} has negative noisy pixels")));
        }
    }
    Ok(looks)
}

/// Trains a model from scratch; see [`train_with_progress`].
pub fn train(cfg: &TrainConfig, samples: &[NoisyPair]) -> Result<TrainOutcome> {
    train_with_progress(cfg, samples, &mut |_| {})
}

/// Greedy phase: stage `t` is optimized with stages before it frozen. Joint
/// phase: all stages together, loss at `u_T`. `progress` sees one record per
/// accepted optimizer step.
pub fn train_with_progress(
    cfg: &TrainConfig,
    samples: &[NoisyPair],
    progress: &mut dyn FnMut(&ProgressRecord),
) -> Result<TrainOutcome> {
    let looks = validate_samples(samples, cfg.model.filter_size)?;
    let mut spec = cfg.model.clone();
    spec.looks = looks;
    let mut model = DiffusionModel::init(&spec)?;

    if cfg.balance_lambda {
        let probe = initial_state(&samples[0].noisy, model.variant);
        let lambda0 = balanced_lambda(&model, &probe)?;
        for s in &mut model.stages {
            s.beta = lambda0.ln();
        }
        model
            .metadata
            .insert("init_lambda".into(), format!("{lambda0}"));
    }

    if cfg.gradient_check {
        let pair = &samples[0];
        let side = 8.min(pair.clean.width()).min(pair.clean.height());
        let crop = NoisyPair {
            clean: pair.clean.crop(0, 0, side, side)?,
            noisy: pair.noisy.crop(0, 0, side, side)?,
            config: pair.config,
        };
        let report = finite_diff_check(&model, &crop, 1e-4)?;
        if !report.passed {
            return Err(Error::Training(format!("gradient check failed: {report}")));
        }
    }

    let t_count = model.num_stages();
    let initial_loss = Problem::new(&model, samples, 0..t_count, t_count)?.eval(&model)?.0;
    if !initial_loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {initial_loss} at initialization; check input range and λ"
        )));
    }

    let mut history = Vec::new();
    if matches!(cfg.schedule, Schedule::Greedy | Schedule::GreedyThenJoint) {
        let opts = LbfgsOptions {
            max_iters: cfg.greedy_iters,
            ..cfg.lbfgs
        };
        for t in 0..t_count {
            if t > 0 && cfg.warm_start {
                model.stages[t] = model.stages[t - 1].clone();
            }
            let loss_end = match cfg.greedy_loss {
                GreedyLoss::StageOutput => t + 1,
                GreedyLoss::FinalOutput => t_count,
            };
            let problem = Problem::new(&model, samples, t..t + 1, loss_end)?;
            problem.optimize(&mut model, &opts, Phase::Stage(t + 1), &mut history, progress)?;
        }
    }
    if matches!(cfg.schedule, Schedule::Joint | Schedule::GreedyThenJoint) {
        let opts = LbfgsOptions {
            max_iters: cfg.joint_iters,
            ..cfg.lbfgs
        };
        let problem = Problem::new(&model, samples, 0..t_count, t_count)?;
        problem.optimize(&mut model, &opts, Phase::Joint, &mut history, progress)?;
    }

    let final_loss = Problem::new(&model, samples, 0..t_count, t_count)?.eval(&model)?.0;
    model
        .metadata
        .insert("schedule".into(), cfg.schedule.name().into());
    model
        .metadata
        .insert("training_samples".into(), samples.len().to_string());
    model
        .metadata
        .insert("final_loss".into(), format!("{final_loss:e}"));
    Ok(TrainOutcome {
        model,
        initial_loss,
        final_loss,
        history,
    })
}

/// Mean per-sample loss of `model` over `samples`, measured at `u_T`.
pub fn dataset_loss(model: &DiffusionModel, samples: &[NoisyPair]) -> Result<f64> {
    let t = model.num_stages();
    Ok(Problem::new(model, samples, 0..t, t)?.eval(model)?.0)
}

/// Analytic gradient of the mean loss over all parameters of `model`.
pub fn model_gradient(model: &DiffusionModel, samples: &[NoisyPair]) -> Result<(f64, Vec<f64>)> {
    let t = model.num_stages();
    Problem::new(model, samples, 0..t, t)?.eval(model)
}

#[cfg(test)]
mod tests;

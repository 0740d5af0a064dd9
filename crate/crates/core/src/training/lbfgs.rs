//! Limited-memory BFGS with a strong-Wolfe bracketing line search.
//!
//! A step is only accepted when it satisfies the sufficient-decrease
//! condition, so the sequence of accepted objective values never increases.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub history: usize,
    /// Stop when `‖g‖ ≤ grad_tol · max(1, |f|)`.
    pub grad_tol: f64,
    /// Armijo constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 200,
            history: 10,
            grad_tol: 1e-10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    GradientTolerance,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iters: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Point {
    alpha: f64,
    loss: f64,
    slope: f64,
    grad: Vec<f64>,
}

/// Objective wrapper mapping failures (non-finite model states) to `+∞`.
struct LineFn<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    evals: usize,
}

impl<F> LineFn<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn at(&mut self, alpha: f64) -> Point {
        self.evals += 1;
        let xa: Vec<f64> = self.x.iter().zip(self.d).map(|(x, d)| x + alpha * d).collect();
        match (self.f)(&xa) {
            Ok((loss, grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => Point {
                alpha,
                loss,
                slope: dot(&grad, self.d),
                grad,
            },
            _ => Point {
                alpha,
                loss: f64::INFINITY,
                slope: f64::NAN,
                grad: Vec::new(),
            },
        }
    }
}

/// Minimizer of the quadratic through `(lo.alpha, lo.loss)` with slope
/// `lo.slope` and `(hi.alpha, hi.loss)`, clamped into the inner 80% of the bracket.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let width = b - a;
    let mut t = 0.5 * (a + b);
    if hi.loss.is_finite() && lo.slope.is_finite() {
        let denom = 2.0 * (hi.loss - lo.loss - lo.slope * width);
        if denom > 0.0 {
            t = a - lo.slope * width * width / denom;
        }
    }
    let (min, max) = if a < b { (a, b) } else { (b, a) };
    let pad = 0.1 * (max - min);
    t.clamp(min + pad, max - pad)
}

fn line_search<F>(
    line: &mut LineFn<'_, F>,
    f0: f64,
    slope0: f64,
    alpha0: f64,
    opts: &LbfgsOptions,
) -> Option<Point>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let armijo = |p: &Point| p.loss <= f0 + opts.c1 * p.alpha * slope0;
    let curvature = |p: &Point| p.slope.abs() <= -opts.c2 * slope0;

    let mut prev = Point {
        alpha: 0.0,
        loss: f0,
        slope: slope0,
        grad: Vec::new(),
    };
    let mut alpha = alpha0;
    let mut budget = opts.max_line_search;
    let (mut lo, mut hi);
    loop {
        let cur = line.at(alpha);
        budget -= 1;
        if !armijo(&cur) || (prev.alpha > 0.0 && cur.loss >= prev.loss) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        if budget == 0 {
            return Some(cur);
        }
        prev = cur;
        alpha *= 2.0;
    }

    // zoom: lo always satisfies Armijo and has the lowest loss seen in the bracket
    while budget > 0 {
        budget -= 1;
        let a = interpolate(&lo, &hi);
        let cur = line.at(a);
        if !armijo(&cur) || cur.loss >= lo.loss {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
    }
    (lo.alpha > 0.0).then_some(lo)
}

/// Minimizes `f` from `x0`. `on_accept` sees every accepted iterate.
pub fn minimize<F>(
    x0: &[f64],
    mut f: F,
    opts: &LbfgsOptions,
    mut on_accept: impl FnMut(&IterRecord),
) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let (mut loss, mut grad) = f(&x)?;
    let mut evaluations = 1;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.history);
    let mut iters = 0;
    let mut termination = Termination::MaxIters;

    while iters < opts.max_iters {
        let gnorm = norm(&grad);
        if gnorm <= opts.grad_tol * loss.abs().max(1.0) {
            termination = Termination::GradientTolerance;
            break;
        }

        // two-loop recursion
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &d);
        if !(slope < 0.0) {
            history.clear();
            d = grad.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let alpha0 = if history.is_empty() { 1.0 / gnorm } else { 1.0 };

        let mut line = LineFn {
            f: &mut f,
            x: &x,
            d: &d,
            evals: 0,
        };
        let found = line_search(&mut line, loss, slope, alpha0, opts);
        evaluations += line.evals;
        let Some(point) = found else {
            if history.is_empty() {
                termination = Termination::LineSearchFailed;
                break;
            }
            // retry once from steepest descent
            history.clear();
            continue;
        };

        let x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + point.alpha * di).collect();
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = point.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == opts.history {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        loss = point.loss;
        grad = point.grad;
        iters += 1;
        on_accept(&IterRecord {
            iter: iters,
            loss,
            grad_norm: norm(&grad),
            step: point.alpha,
            evaluations,
        });
    }

    Ok(LbfgsResult {
        grad_norm: norm(&grad),
        x,
        loss,
        iters,
        evaluations,
        termination,
    })
}

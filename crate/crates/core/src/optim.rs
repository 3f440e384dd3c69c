//! Limited-memory BFGS ascent with a backtracking (Armijo) line search.
//!
//! The objective is maximised. Every accepted step increases it, except that
//! once changes fall below the objective's evaluation noise (relative
//! `noise_floor`) a step may lose at most that much.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the gradient infinity-norm falls below this.
    pub grad_tol: f64,
    pub c1: f64,
    pub max_backtracks: usize,
    /// Stop (flagged) when any coordinate exceeds this in absolute value.
    pub divergence_bound: Option<f64>,
    /// Relative evaluation noise of the objective. Steps whose change is
    /// below it are judged by the gradient alone.
    pub noise_floor: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, max_iterations: 500, grad_tol: 1e-6, c1: 1e-4, max_backtracks: 60, divergence_bound: None, noise_floor: 1e-12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::GradientTolerance
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximises `f`, which returns the value and gradient at a point.
pub fn maximize<F>(f: F, x0: &[f64], cfg: &LbfgsConfig) -> OptimResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    maximize_scaled(f, x0, &vec![1.0; x0.len()], cfg)
}

/// As [`maximize`], but iterates on `y = x / scale`. A scale near the inverse
/// square root of the curvature of each coordinate improves conditioning.
/// Tolerances and the divergence bound still apply to `x` and its gradient.
pub fn maximize_scaled<F>(mut f: F, x0: &[f64], scale: &[f64], cfg: &LbfgsConfig) -> OptimResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert_eq!(scale.len(), x0.len(), "one scale per coordinate");
    let to_x = |y: &[f64]| -> Vec<f64> { y.iter().zip(scale).map(|(a, s)| a * s).collect() };
    let to_x_grad = |g: &[f64]| -> Vec<f64> { g.iter().zip(scale).map(|(a, s)| a / s).collect() };
    let mut f = |y: &[f64]| {
        let (v, g) = f(&to_x(y));
        (v, g.iter().zip(scale).map(|(a, s)| a * s).collect::<Vec<f64>>())
    };
    let n = x0.len();
    let mut x: Vec<f64> = x0.iter().zip(scale).map(|(a, s)| a / s).collect();
    let (mut fx, mut g) = f(&x);
    let mut trace = vec![fx];
    // (s, y, 1 / y.s) with y the change in the gradient of -f
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;

    let stop = loop {
        if inf_norm(&to_x_grad(&g)) < cfg.grad_tol {
            break StopReason::GradientTolerance;
        }
        if let Some(bound) = cfg.divergence_bound {
            if to_x(&x).iter().any(|v| v.abs() > bound) {
                break StopReason::Diverged;
            }
        }
        if iterations >= cfg.max_iterations {
            break StopReason::MaxIterations;
        }

        // two-loop recursion on q = g gives an ascent direction
        let mut d = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        let gamma = match pairs.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / inf_norm(&g).max(1.0),
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += s[i] * (a - b);
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope > 0.0) {
            pairs.clear();
            d = g.iter().map(|v| v / inf_norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        // Backtracking on the Armijo condition. Once the predicted gain falls
        // below the evaluation noise of f the value can no longer confirm
        // progress; such steps are accepted on the curvature condition
        // instead, provided they lose no more than the noise floor.
        let floor = cfg.noise_floor * (1.0 + fx.abs());
        let mut step = 1.0;
        let mut accepted = None;
        let mut flat_trials = 0;
        for _ in 0..cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f(&trial);
            if ft.is_finite() {
                let armijo = ft >= fx + cfg.c1 * step * slope && ft > fx;
                let flat = step * slope <= floor && ft >= fx - floor && dot(&gt, &d).abs() <= 0.9 * slope;
                if armijo || flat {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                if step * slope <= floor {
                    flat_trials += 1;
                    if flat_trials >= 12 {
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break StopReason::LineSearchFailed;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        iterations += 1;
    };

    OptimResult { x: to_x(&x), value: fx, grad: to_x_grad(&g), iterations, stop, trace }
}

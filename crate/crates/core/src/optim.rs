//! First-order optimizers shared by the inference backends.
//!
//! Deterministic objectives (exact GP, state-space) use Adam with monotone
//! acceptance: a proposed step is kept only if it does not lower the
//! objective; otherwise the step size is halved and the moment estimates are
//! reset. Stochastic objectives (SVGP minibatches) use plain Adam and keep the
//! best full-batch iterate.

use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Stop once the relative objective improvement stays below this for
    /// `patience` consecutive accepted steps.
    pub rel_tol: f64,
    pub patience: usize,
    /// Stop once every free gradient component is below this magnitude.
    pub grad_tol: f64,
    /// Minibatch size (SVGP only).
    pub batch_size: usize,
    /// Full-batch evaluation period for best-iterate tracking (SVGP only).
    pub eval_every: usize,
    pub seed: u64,
    /// Parameter indices held fixed during optimization.
    pub frozen: Vec<usize>,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            max_iters: 500,
            learning_rate: 0.05,
            rel_tol: 1e-6,
            patience: 10,
            grad_tol: 1e-6,
            batch_size: 256,
            eval_every: 100,
            seed: 0,
            frozen: Vec::new(),
        }
    }
}

impl OptimizerOptions {
    /// Defaults for stochastic SVGP training.
    pub fn svgp() -> Self {
        OptimizerOptions {
            max_iters: 5000,
            learning_rate: 0.01,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub param_names: Vec<String>,
    /// Objective at the returned parameters (log marginal likelihood or ELBO).
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step (or each full-batch evaluation).
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    pub(crate) fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub(crate) fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    /// Ascent step for gradient `g`.
    pub(crate) fn step(&mut self, g: &[f64], lr: f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * gi;
                self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * gi * gi;
                lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS)
            })
            .collect()
    }
}

pub(crate) fn mask_frozen(g: &mut [f64], frozen: &[usize]) {
    for &i in frozen {
        if let Some(v) = g.get_mut(i) {
            *v = 0.0;
        }
    }
}

/// Maximize `objective` from `x0`. The objective returns `(value, gradient)`;
/// an `Err` at a proposed point is treated as a rejected step.
pub fn maximize<F>(x0: Vec<f64>, mut objective: F, opts: &OptimizerOptions) -> Result<FitResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut f, mut g) = objective(&x0)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(GpError::input(format!(
            "objective is not finite at the initial parameters ({f})"
        )));
    }
    let mut x = x0;
    let initial = f;
    let mut trace = vec![f];
    let mut adam = Adam::new(x.len());
    let mut lr = opts.learning_rate;
    let mut small_steps = 0;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..opts.max_iters {
        iterations = it + 1;
        mask_frozen(&mut g, &opts.frozen);
        if g.iter().all(|v| v.abs() <= opts.grad_tol) {
            converged = true;
            break;
        }
        let delta = adam.step(&g, lr);
        let proposal: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        match objective(&proposal) {
            Ok((fp, gp)) if fp.is_finite() && fp >= f && gp.iter().all(|v| v.is_finite()) => {
                let rel = (fp - f) / f.abs().max(1.0);
                x = proposal;
                f = fp;
                g = gp;
                trace.push(f);
                if rel < opts.rel_tol {
                    small_steps += 1;
                    if small_steps >= opts.patience {
                        converged = true;
                        break;
                    }
                } else {
                    small_steps = 0;
                }
            }
            _ => {
                lr *= 0.5;
                adam.reset();
                if lr < opts.learning_rate * 1e-8 {
                    converged = true;
                    break;
                }
            }
        }
    }

    Ok(FitResult {
        params: x,
        param_names: Vec::new(),
        objective: f,
        initial_objective: initial,
        iterations,
        converged,
        trace,
    })
}

/// Central finite-difference gradient, used where no analytic form exists.
pub fn finite_difference_gradient<F>(x: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut g = Vec::with_capacity(x.len());
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + step;
        let up = f(&p)?;
        p[i] = x[i] - step;
        let down = f(&p)?;
        p[i] = x[i];
        g.push((up - down) / (2.0 * step));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        // maximum at (1, -2)
        let f = -(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 2.0).powi(2);
        Ok((f, vec![-2.0 * (x[0] - 1.0), -6.0 * (x[1] + 2.0)]))
    }

    #[test]
    fn finds_quadratic_maximum_monotonically() {
        let opts = OptimizerOptions {
            max_iters: 2000,
            learning_rate: 0.1,
            ..Default::default()
        };
        let r = maximize(vec![0.0, 0.0], quadratic, &opts).unwrap();
        assert!((r.params[0] - 1.0).abs() < 1e-3);
        assert!((r.params[1] + 2.0).abs() < 1e-3);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(r.objective >= r.initial_objective);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let opts = OptimizerOptions {
            frozen: vec![1],
            ..Default::default()
        };
        let r = maximize(vec![0.0, 5.0], quadratic, &opts).unwrap();
        assert_eq!(r.params[1], 5.0);
        assert!((r.params[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn non_finite_start_is_input_error() {
        let r = maximize(vec![0.0], |_| Ok((f64::NAN, vec![0.0])), &Default::default());
        assert!(matches!(r, Err(GpError::Input(_))));
    }

    #[test]
    fn finite_differences_of_quadratic() {
        let g = finite_difference_gradient(&[0.5, 0.5], 1e-5, |x| quadratic(x).map(|r| r.0)).unwrap();
        let exact = quadratic(&[0.5, 0.5]).unwrap().1;
        assert!((g[0] - exact[0]).abs() < 1e-8 && (g[1] - exact[1]).abs() < 1e-8);
    }
}

//! Proximal-gradient minimization of `loss(x) + lambda TV(x)` over a box.
//!
//! Each iteration takes a gradient step of length `1 / alpha`, applies the
//! TV prox with weight `lambda / alpha` and clips to the box. Clipping after
//! the prox gives the exact prox of TV plus the box indicator, because the
//! anisotropic TV is a sum of pairwise absolute differences. `alpha` comes
//! from the Barzilai-Borwein ratio, and a step is accepted when the
//! objective falls below the largest of the last `bb_memory` accepted
//! values by a sufficient-decrease margin; otherwise `alpha` doubles.
//!
//! The solver stops when an accepted step lowers the objective by less
//! than `objective_tol` relative to its distance from the loss floor, or
//! when the step length falls below `step_tol` relative to the iterate.

use std::collections::VecDeque;

use ndarray::{Array2, Zip};

use super::objective::Objective;
use super::prox::{tv_prox_warm, tv_seminorm, TvDual};
use super::{BoxConstraint, SolverOptions};
use crate::error::{Error, Result};

/// One step attempt of the solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Penalized objective at the trial point.
    pub objective: f64,
    /// Curvature estimate `alpha` used for the trial.
    pub step: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Iterate with the lowest penalized objective.
    pub estimate: Array2<f64>,
    pub objective: f64,
    /// Unpenalized loss at the estimate.
    pub loss: f64,
    pub iterations: usize,
    /// True when a stopping test fired before `max_iters`.
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
}

/// Sufficient-decrease constant of the acceptance test.
const SIGMA: f64 = 1e-4;

fn sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + x * y)
}

/// Runs the solver from `x0`, which must lie in the box.
pub fn spiral_minimize<O: Objective + ?Sized>(
    objective: &O,
    constraint: &BoxConstraint,
    lambda: f64,
    x0: &Array2<f64>,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    opts.validate()?;
    objective.grid().check(x0)?;
    constraint.check_shape(x0.dim())?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", format!("{lambda} must be finite and non-negative")));
    }
    if !constraint.contains(x0) {
        return Err(Error::invalid("starting point", "lies outside the constraint box"));
    }
    let penalty = |x: &Array2<f64>| if lambda > 0.0 { lambda * tv_seminorm(x) } else { 0.0 };
    let (mut loss, mut grad) = objective.loss_and_gradient(x0);
    let mut phi = loss + penalty(x0);
    if !phi.is_finite() {
        return Err(Error::Solver(format!("objective at the starting point is {phi}")));
    }
    let floor = objective.loss_floor();
    let (a_min, a_max) = opts.step_bounds;
    let mut alpha = opts.step_init.clamp(a_min, a_max);
    let mut x = x0.clone();
    let mut dual = TvDual::zeros(x0.dim());
    let mut history = VecDeque::with_capacity(opts.bb_memory);
    history.push_back(phi);
    let mut trace = Vec::new();
    let mut best = (x.clone(), phi, loss);
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iters {
        iterations += 1;
        let reference = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        loop {
            let z = &x - &(&grad / alpha);
            let prox = tv_prox_warm(&z, lambda / alpha, Some(&dual), opts.prox_iters, opts.prox_tol);
            let mut trial = prox.x;
            constraint.project(&mut trial);
            let trial_loss = objective.loss(&trial);
            let trial_phi = trial_loss + penalty(&trial);
            let moved = sq_dist(&trial, &x);
            let accept = trial_phi.is_finite() && trial_phi <= reference - 0.5 * SIGMA * alpha * moved;
            trace.push(TraceEntry {
                iteration: iterations,
                objective: trial_phi,
                step: alpha,
                accepted: accept,
            });
            if moved == 0.0 {
                // fixed point of the prox-gradient map
                converged = true;
                break 'outer;
            }
            if !accept {
                if alpha >= a_max {
                    // no acceptable step left; keep the best iterate
                    break 'outer;
                }
                alpha = (alpha * 2.0).min(a_max);
                continue;
            }
            dual = prox.dual;
            let (new_loss, new_grad) = objective.loss_and_gradient(&trial);
            let s = &trial - &x;
            let sy = dot(&s, &(&new_grad - &grad));
            if sy > 0.0 {
                alpha = (sy / moved).clamp(a_min, a_max);
            }
            let rel = (phi - trial_phi).abs() / (trial_phi - floor).abs().max(f64::MIN_POSITIVE);
            x = trial;
            grad = new_grad;
            loss = new_loss;
            phi = trial_phi;
            // later iterates win ties at round-off level, since near the
            // minimum the objective stops resolving progress before x does
            if phi <= best.1 + 4.0 * f64::EPSILON * best.1.abs() {
                best = (x.clone(), phi, loss);
            }
            if history.len() == opts.bb_memory {
                history.pop_front();
            }
            history.push_back(phi);
            let small_step = moved.sqrt() <= opts.step_tol * dot(&x, &x).sqrt().max(1.0);
            if rel < opts.objective_tol || small_step {
                converged = true;
                break 'outer;
            }
            break;
        }
    }
    Ok(SolveResult {
        estimate: best.0,
        objective: best.1,
        loss: best.2,
        iterations,
        converged,
        trace,
    })
}

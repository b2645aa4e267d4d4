//! Total-variation penalized Poisson likelihood estimation.

mod bounds;
mod objective;
mod prox;
mod spiral;

pub use bounds::{beta_upper_bound, extinction_hessian_column, mu_upper_bound, pd_margin, uniform_upper_bound};
pub use objective::{
    poisson_loss_beta, poisson_loss_beta_grad, poisson_loss_mu, poisson_loss_mu_grad, poisson_loss_omega,
    poisson_loss_omega_grad, saturated_loss, BetaObjective, MuObjective, Objective, OmegaObjective,
};
pub use prox::{tv_prox, tv_prox_warm, tv_seminorm, ProxResult, TvDual};
pub use spiral::{spiral_minimize, SolveResult, TraceEntry};

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Knobs of the proximal-gradient solver and its inner TV prox.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop when the relative objective decrease of an accepted step falls
    /// below this value; zero disables the test.
    pub objective_tol: f64,
    /// Stop when `||x_new - x|| <= step_tol * max(||x_new||, 1)`; zero
    /// disables the test.
    pub step_tol: f64,
    /// Initial curvature estimate `alpha` (the first step is `1 / alpha`).
    pub step_init: f64,
    pub step_bounds: (f64, f64),
    /// Window of past objectives in the nonmonotone acceptance test.
    pub bb_memory: usize,
    pub prox_iters: usize,
    /// Prox stops once its duality gap is below `prox_tol * max(||z||^2, 1)`.
    pub prox_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 300,
            objective_tol: 1e-7,
            step_tol: 0.0,
            step_init: 1.0,
            step_bounds: (1e-8, 1e8),
            bb_memory: 10,
            prox_iters: 100,
            prox_tol: 1e-8,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.step_bounds;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("step bounds", format!("need 0 < {lo} <= {hi}")));
        }
        if !(self.objective_tol >= 0.0 && self.step_tol >= 0.0 && self.prox_tol > 0.0) {
            return Err(Error::invalid("tolerances", "must be non-negative (prox_tol positive)"));
        }
        if self.bb_memory == 0 || !(self.step_init > 0.0) {
            return Err(Error::invalid("solver options", "bb_memory and step_init must be positive"));
        }
        Ok(())
    }
}

/// Elementwise bounds `lower <= x <= upper`; the upper bound may be `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraint {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
}

impl BoxConstraint {
    pub fn new(lower: Array2<f64>, upper: Array2<f64>) -> Result<Self> {
        if lower.dim() != upper.dim() {
            return Err(Error::ShapeMismatch {
                expected: lower.dim(),
                found: upper.dim(),
            });
        }
        if let Some(((i, j), _)) = lower
            .indexed_iter()
            .find(|(ix, &l)| l.is_nan() || upper[*ix].is_nan() || l > upper[*ix] || l == f64::INFINITY)
        {
            return Err(Error::Infeasible(format!(
                "empty box at row {i}, column {j}: [{}, {}]",
                lower[[i, j]],
                upper[[i, j]]
            )));
        }
        Ok(BoxConstraint { lower, upper })
    }

    pub fn uniform(grid: Grid, lower: f64, upper: f64) -> Result<Self> {
        BoxConstraint::new(Array2::from_elem(grid.shape(), lower), Array2::from_elem(grid.shape(), upper))
    }

    /// The non-negative orthant.
    pub fn nonnegative(grid: Grid) -> Self {
        BoxConstraint {
            lower: Array2::zeros(grid.shape()),
            upper: Array2::from_elem(grid.shape(), f64::INFINITY),
        }
    }

    pub fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.lower.dim() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: self.lower.dim(),
            });
        }
        Ok(())
    }

    pub fn project(&self, x: &mut Array2<f64>) {
        Zip::from(x)
            .and(&self.lower)
            .and(&self.upper)
            .for_each(|v, &l, &u| *v = v.clamp(l, u));
    }

    pub fn projected(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.clone();
        self.project(&mut y);
        y
    }

    pub fn contains(&self, x: &Array2<f64>) -> bool {
        Zip::from(x)
            .and(&self.lower)
            .and(&self.upper)
            .all(|&v, &l, &u| v >= l && v <= u)
    }
}

//! Image geometry and the range-integration operator.
//!
//! Every image in this crate is an `N x K` array: rows are range bins
//! (nearest bin first), columns are profiles in time. Optical depth is the
//! running Riemann sum of extinction down each column, so the integration
//! operator `Q` is lower triangular with every entry equal to the bin
//! length. It is applied as a running sum and never stored.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Sampling geometry of a lidar image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    /// Number of range bins (rows).
    pub n_range: usize,
    /// Number of profiles (columns).
    pub n_profiles: usize,
    /// Range bin length in meters.
    pub dr: f64,
    /// Profile duration in seconds.
    pub dt: f64,
}

impl Grid {
    pub fn new(n_range: usize, n_profiles: usize, dr: f64, dt: f64) -> Result<Self> {
        if n_range == 0 || n_profiles == 0 {
            return Err(Error::InvalidGrid(format!(
                "grid must be non-empty, got {n_range} x {n_profiles}"
            )));
        }
        if !(dr > 0.0 && dr.is_finite()) || !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "resolutions must be positive, got dr={dr}, dt={dt}"
            )));
        }
        Ok(Grid {
            n_range,
            n_profiles,
            dr,
            dt,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_range, self.n_profiles)
    }

    pub fn len(&self) -> usize {
        self.n_range * self.n_profiles
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that `field` has this grid's shape.
    pub fn check(&self, field: &Array2<f64>) -> Result<()> {
        if field.dim() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: field.dim(),
            });
        }
        Ok(())
    }

    /// Grid after merging `rows x cols` blocks of bins.
    pub fn coarsen(&self, rows: usize, cols: usize) -> Result<Grid> {
        if rows == 0 || cols == 0 || self.n_range % rows != 0 || self.n_profiles % cols != 0 {
            return Err(Error::invalid(
                "block size",
                format!(
                    "{rows} x {cols} does not divide grid {} x {}",
                    self.n_range, self.n_profiles
                ),
            ));
        }
        Grid::new(
            self.n_range / rows,
            self.n_profiles / cols,
            self.dr * rows as f64,
            self.dt * cols as f64,
        )
    }
}

/// Applies `Q`: `out[n, k] = dr * sum_{l <= n} field[l, k]`.
pub fn cumulative_integral(field: &Array2<f64>, dr: f64) -> Array2<f64> {
    let mut out = field.clone();
    for mut column in out.axis_iter_mut(Axis(1)) {
        let mut acc = 0.0;
        for v in column.iter_mut() {
            acc += *v;
            *v = dr * acc;
        }
    }
    out
}

/// Applies `Q^T`: `out[n, k] = dr * sum_{l >= n} field[l, k]`.
pub fn adjoint_cumulative_integral(field: &Array2<f64>, dr: f64) -> Array2<f64> {
    let mut out = field.clone();
    for mut column in out.axis_iter_mut(Axis(1)) {
        let mut acc = 0.0;
        for v in column.iter_mut().rev() {
            acc += *v;
            *v = dr * acc;
        }
    }
    out
}

/// Two-way transmittance `exp(-2 Q beta)`.
pub fn transmittance(beta: &Array2<f64>, dr: f64) -> Array2<f64> {
    cumulative_integral(beta, dr).mapv(|tau| (-2.0 * tau).exp())
}

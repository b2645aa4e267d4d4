//! End-to-end TV-penalized retrievals.
//!
//! [`algorithm2`] denoises both channels, forms the backscatter
//! algebraically from the denoised signals and then estimates the lidar
//! ratio from the molecular channel. [`algorithm3`] takes a backscatter
//! estimate and fits extinction directly, constrained to lidar ratios of
//! at least one.

use ndarray::{Array2, Zip};

use crate::crossval::{cross_validate, LambdaGrid, Selection, DEFAULT_THIN_P};
use crate::error::{Error, Result};
use crate::grid::{cumulative_integral, Grid};
use crate::simulate::derive_seed;
use crate::standard::{invert_nu_algebraic, invert_od_algebraic};
use crate::tv::{
    beta_upper_bound, mu_upper_bound, BetaObjective, BoxConstraint, MuObjective, Objective, OmegaObjective,
    SolverOptions,
};
use crate::types::{AlgorithmTag, Calibration, InversionProducts, PhotonImage};

/// Lidar-ratio ceiling used when the curvature bound is unbounded.
pub const FALLBACK_MU_UPPER: f64 = 100.0;

/// Settings shared by the TV pipelines.
#[derive(Debug, Clone)]
pub struct TvOptions {
    pub solver: SolverOptions,
    /// Weights tried when denoising a channel.
    pub omega_grid: LambdaGrid,
    /// Weights tried for the lidar ratio.
    pub mu_grid: LambdaGrid,
    /// Weights tried for extinction, in units of 1 / (1/m).
    pub beta_grid: LambdaGrid,
    pub thin_p: f64,
    /// Overrides the computed lidar-ratio upper bound.
    pub mu_upper: Option<f64>,
}

impl Default for TvOptions {
    fn default() -> Self {
        TvOptions {
            solver: SolverOptions::default(),
            omega_grid: LambdaGrid::standard(),
            mu_grid: LambdaGrid::log_spaced(-6.0, -2.0, 0.5).expect("valid exponents"),
            beta_grid: LambdaGrid::log_spaced(1.0, 5.0, 0.5).expect("valid exponents"),
            thin_p: DEFAULT_THIN_P,
            mu_upper: None,
        }
    }
}

impl TvOptions {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !(self.thin_p > 0.0 && self.thin_p < 1.0) {
            return Err(Error::invalid("thinning fraction", format!("{} is outside (0, 1)", self.thin_p)));
        }
        if let Some(m) = self.mu_upper {
            if !(m > 1.0) {
                return Err(Error::invalid("lidar-ratio upper bound", format!("{m} must exceed 1")));
            }
        }
        Ok(())
    }
}

fn check_rho(rho: &Array2<f64>, grid: &Grid) -> Result<()> {
    grid.check(rho)?;
    if rho.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::invalid("depolarization", "values must lie in [0, 1)"));
    }
    Ok(())
}

/// Cross-validated TV denoising of one channel. The estimate is the
/// background-free signal `omega` in full-rate units.
pub fn denoise_channel(
    counts: &PhotonImage,
    background: &Array2<f64>,
    grid: &LambdaGrid,
    opts: &TvOptions,
    seed: u64,
) -> Result<Selection> {
    cross_validate(
        &[counts],
        opts.thin_p,
        seed,
        |ch: &[PhotonImage], scale| OmegaObjective::new(&ch[0], background, scale),
        |o: &OmegaObjective| o.initial_point(),
        grid,
        &BoxConstraint::nonnegative(counts.grid),
        &opts.solver,
    )
}

/// Parallel backscatter from denoised channel signals; NaN where
/// `omega_m - omega_c C_am <= 0`.
pub fn nu_from_omegas(omega_c: &Array2<f64>, omega_m: &Array2<f64>, calib: &Calibration) -> Result<Array2<f64>> {
    invert_nu_algebraic(&(omega_c + &calib.b_c), &(omega_m + &calib.b_m), calib)
}

/// Optical depth from the algebraic formula applied to denoised signals.
pub fn algorithm2_od_direct(omega_c: &Array2<f64>, omega_m: &Array2<f64>, calib: &Calibration) -> Result<Array2<f64>> {
    invert_od_algebraic(&(omega_c + &calib.b_c), &(omega_m + &calib.b_m), calib)
}

fn clamp_nonnegative(field: &Array2<f64>) -> Array2<f64> {
    field.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Denoised channels and the backscatter formed from them.
#[derive(Debug, Clone)]
pub struct BackscatterRun {
    /// NaN where the denoised channels admit no backscatter.
    pub nu_hat: Array2<f64>,
    pub nu_plus_hat: Array2<f64>,
    pub omega_c: Selection,
    pub omega_m: Selection,
}

/// The backscatter half of [`algorithm2`]: both channels denoised with
/// cross-validated weights, then combined algebraically.
pub fn algorithm2_backscatter(
    y_c: &PhotonImage,
    y_m: &PhotonImage,
    calib: &Calibration,
    rho: &Array2<f64>,
    opts: &TvOptions,
    seed: u64,
) -> Result<BackscatterRun> {
    opts.validate()?;
    let grid = calib.grid;
    grid.check(&y_c.counts)?;
    grid.check(&y_m.counts)?;
    check_rho(rho, &grid)?;
    let omega_c = denoise_channel(y_c, &calib.b_c, &opts.omega_grid, opts, derive_seed(seed, 1))?;
    let omega_m = denoise_channel(y_m, &calib.b_m, &opts.omega_grid, opts, derive_seed(seed, 2))?;
    let nu_hat = nu_from_omegas(&omega_c.estimate, &omega_m.estimate, calib)?;
    let nu_plus_hat = &nu_hat / &rho.mapv(|r| 1.0 - r);
    Ok(BackscatterRun {
        nu_hat,
        nu_plus_hat,
        omega_c,
        omega_m,
    })
}

/// Everything produced by [`algorithm2`].
#[derive(Debug, Clone)]
pub struct TvRun {
    pub products: InversionProducts,
    pub omega_c: Selection,
    pub omega_m: Selection,
    pub mu: Selection,
    /// Upper end of the lidar-ratio box.
    pub mu_upper: f64,
}

impl TvRun {
    pub fn converged(&self) -> bool {
        self.omega_c.converged() && self.omega_m.converged() && self.mu.converged()
    }
}

/// Denoise both channels, invert for backscatter and estimate the lidar
/// ratio on `[1, mu_upper]`.
///
/// `nu_hat` in the products is reported as computed, negative values
/// included; the lidar-ratio stage and the extinction use it clamped at
/// zero so that the optical depth is non-negative and non-decreasing.
pub fn algorithm2(
    y_c: &PhotonImage,
    y_m: &PhotonImage,
    calib: &Calibration,
    rho: &Array2<f64>,
    opts: &TvOptions,
    seed: u64,
) -> Result<TvRun> {
    let BackscatterRun {
        nu_hat,
        nu_plus_hat,
        omega_c,
        omega_m,
    } = algorithm2_backscatter(y_c, y_m, calib, rho, opts, seed)?;
    let grid = calib.grid;
    let nu_clamped = clamp_nonnegative(&nu_hat);

    let mu_upper = match opts.mu_upper {
        Some(m) => m,
        None => {
            let m = mu_upper_bound(y_m, &nu_clamped, calib)?;
            if m.is_finite() {
                m
            } else {
                FALLBACK_MU_UPPER
            }
        }
    };
    let constraint = BoxConstraint::uniform(grid, 1.0, mu_upper)?;
    let mu = cross_validate(
        &[y_m],
        opts.thin_p,
        derive_seed(seed, 3),
        |ch: &[PhotonImage], scale| MuObjective::new(&ch[0], &nu_clamped, calib, scale),
        |_: &MuObjective| Array2::ones(grid.shape()),
        &opts.mu_grid,
        &constraint,
        &opts.solver,
    )?;

    let mut mu_hat = &mu.estimate * &rho.mapv(|r| 1.0 - r);
    let nu_plus_clamped = &nu_clamped / &rho.mapv(|r| 1.0 - r);
    let beta_hat = &nu_plus_clamped * &mu_hat;
    let tau_hat = cumulative_integral(&beta_hat, grid.dr);
    // the lidar ratio carries no information where the backscatter failed
    Zip::from(&mut mu_hat).and(&nu_hat).for_each(|m, &n| {
        if n.is_nan() {
            *m = f64::NAN;
        }
    });
    let products = InversionProducts::new(
        grid,
        nu_hat,
        nu_plus_hat,
        Some(beta_hat),
        Some(mu_hat),
        Some(tau_hat),
        AlgorithmTag::TvNew,
    )?;
    Ok(TvRun {
        products,
        omega_c,
        omega_m,
        mu,
        mu_upper,
    })
}

/// Extinction objective in the variable `x = beta / scale`, with the
/// penalty weight rescaled by the caller. Keeps the curvature of the
/// problem near one whatever the units of extinction.
struct Rescaled {
    inner: BetaObjective,
    scale: f64,
}

impl Objective for Rescaled {
    fn grid(&self) -> Grid {
        self.inner.grid()
    }

    fn loss(&self, x: &Array2<f64>) -> f64 {
        self.inner.loss(&(x * self.scale))
    }

    fn loss_and_gradient(&self, x: &Array2<f64>) -> (f64, Array2<f64>) {
        let (l, g) = self.inner.loss_and_gradient(&(x * self.scale));
        (l, g * self.scale)
    }

    fn loss_floor(&self) -> f64 {
        self.inner.loss_floor()
    }
}

/// Unit of the solver variable for extinction: one over the square root of
/// the largest Hessian diagonal, estimated from the background-free counts.
/// The first bin of a column sees every later bin through the cumulative
/// integral, so its curvature is `4 dr^2` times the column's total signal.
fn extinction_scale(y_m: &PhotonImage, calib: &Calibration) -> f64 {
    let dr = calib.grid.dr;
    let top = y_m
        .counts
        .columns()
        .into_iter()
        .zip(calib.b_m.columns())
        .map(|(y, b)| y.iter().zip(b.iter()).map(|(&y, &b)| (y - b).max(1.0)).sum::<f64>())
        .fold(0.0, f64::max);
    1.0 / (2.0 * dr * top.sqrt())
}

/// Everything produced by [`algorithm3`].
#[derive(Debug, Clone)]
pub struct AltRun {
    pub products: InversionProducts,
    /// Selection in the solver's rescaled variable; `lambda_star` is in
    /// extinction units.
    pub beta: Selection,
    /// Upper end of the extinction box.
    pub beta_upper: f64,
    /// Pixels whose backscatter already exceeded `beta_upper`; their box
    /// collapses to the single point `nu_plus`.
    pub pinned: usize,
}

impl AltRun {
    pub fn converged(&self) -> bool {
        self.beta.converged()
    }
}

/// Fit extinction to the molecular channel on `[nu_plus, beta_upper]`,
/// given a backscatter estimate from an earlier run.
///
/// Where `nu_plus` is above `beta_upper` the pixel keeps `beta = nu_plus`,
/// which is the smallest extinction consistent with a lidar ratio of one.
pub fn algorithm3(
    y_m: &PhotonImage,
    nu_hat: &Array2<f64>,
    rho: &Array2<f64>,
    calib: &Calibration,
    opts: &TvOptions,
    seed: u64,
) -> Result<AltRun> {
    opts.validate()?;
    let grid = calib.grid;
    grid.check(&y_m.counts)?;
    grid.check(nu_hat)?;
    check_rho(rho, &grid)?;

    let nu_clamped = clamp_nonnegative(nu_hat);
    let one_minus_rho = rho.mapv(|r| 1.0 - r);
    let lower = &nu_clamped / &one_minus_rho;
    let beta_upper = beta_upper_bound(y_m, &nu_clamped, calib)?;
    let scale = extinction_scale(y_m, calib);
    let upper = lower.mapv(|l| l.max(beta_upper));
    let pinned = lower.iter().filter(|&&l| l > beta_upper).count();
    let constraint = BoxConstraint::new(&lower / scale, &upper / scale)?;
    let start = constraint.lower.clone();

    // lambda TV(beta) = (lambda scale) TV(x)
    let scaled_grid = LambdaGrid::new(opts.beta_grid.values().iter().map(|l| l * scale).collect())?;
    let mut sel = cross_validate(
        &[y_m],
        opts.thin_p,
        derive_seed(seed, 4),
        |ch: &[PhotonImage], s| {
            Ok(Rescaled {
                inner: BetaObjective::new(&ch[0], &nu_clamped, calib, s)?,
                scale,
            })
        },
        |_: &Rescaled| start.clone(),
        &scaled_grid,
        &constraint,
        &opts.solver,
    )?;
    sel.lambda_star /= scale;
    for row in &mut sel.table {
        row.lambda /= scale;
    }
    let beta_hat = &sel.estimate * scale;
    let mu_hat = Array2::from_shape_fn(grid.shape(), |ix| {
        if nu_hat[ix] > 0.0 {
            one_minus_rho[ix] * beta_hat[ix] / nu_hat[ix]
        } else {
            f64::NAN
        }
    });
    let tau_hat = cumulative_integral(&beta_hat, grid.dr);
    let products = InversionProducts::new(
        grid,
        nu_hat.clone(),
        nu_hat / &one_minus_rho,
        Some(beta_hat),
        Some(mu_hat),
        Some(tau_hat),
        AlgorithmTag::TvAlternative,
    )?;
    Ok(AltRun {
        products,
        beta: sel,
        beta_upper,
        pinned,
    })
}

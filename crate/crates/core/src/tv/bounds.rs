//! Upper bounds that keep the exponential-model losses strictly convex.
//!
//! For the molecular-channel model `g = C_bm exp(-2 tau) + b_m` the Hessian
//! with respect to optical depth is diagonal with entries
//! `4 (g - b_m)(1 - Y b_m / g^2)`, which is positive exactly where
//! `g > sqrt(Y b_m)`. Both lidar-ratio and extinction parameterizations map
//! into optical depth through an invertible linear operator, so the same
//! pixelwise condition decides positive definiteness. The bounds below pick
//! the largest single value for the whole scene that keeps every pixel on
//! the safe side.
//!
//! Both rates are largest at the lower end of their box, so a pixel that
//! fails there fails for every admissible value. Such pixels (typically
//! far-range bins whose count exceeds the background by noise alone) are
//! left out of the bound instead of making the whole scene infeasible.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::forward::ExtinctionModel;
use crate::types::{Calibration, PhotonImage};

/// `min(rate - sqrt(Y b))` over the image. Positive means the curvature
/// condition holds everywhere.
pub fn pd_margin(rates: &Array2<f64>, counts: &Array2<f64>, background: &Array2<f64>) -> f64 {
    Zip::from(rates)
        .and(counts)
        .and(background)
        .fold(f64::INFINITY, |m, &g, &y, &b| m.min(g - (y * b).sqrt()))
}

/// Largest `s >= start` with `margin(s) > 0`, assuming the margin is
/// non-increasing in `s`. Returns `+inf` when the margin never turns
/// non-positive and an error when it already fails at `start`.
/// The answer is bracketed to `1e-6` relative accuracy.
pub fn uniform_upper_bound(margin: impl Fn(f64) -> f64, start: f64, first_probe: f64) -> Result<f64> {
    if !(margin(start) > 0.0) {
        return Err(Error::Infeasible(format!(
            "curvature condition already fails at the lower end {start}"
        )));
    }
    let mut lo = start;
    let mut hi = first_probe.max(start);
    let mut doublings = 0;
    while margin(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 || !hi.is_finite() {
            return Ok(f64::INFINITY);
        }
    }
    while hi - lo > 1e-6 * lo.abs().max(f64::MIN_POSITIVE) {
        let mid = 0.5 * (lo + hi);
        if margin(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Bound over the pixels where the condition holds at `start`.
fn bound_over_satisfiable(
    rates: impl Fn(f64) -> Array2<f64>,
    counts: &Array2<f64>,
    background: &Array2<f64>,
    start: f64,
    first_probe: f64,
) -> Result<f64> {
    let keep = Zip::from(&rates(start))
        .and(counts)
        .and(background)
        .map_collect(|&g, &y, &b| g > (y * b).sqrt());
    if !keep.iter().any(|&k| k) {
        return Err(Error::Infeasible(format!(
            "curvature condition fails at every pixel already at the lower end {start}"
        )));
    }
    let margin = |s: f64| {
        Zip::from(&rates(s))
            .and(counts)
            .and(background)
            .and(&keep)
            .fold(f64::INFINITY, |m, &g, &y, &b, &k| if k { m.min(g - (y * b).sqrt()) } else { m })
    };
    uniform_upper_bound(margin, start, first_probe)
}

fn no_background(calib: &Calibration) -> bool {
    calib.b_m.iter().all(|&b| b == 0.0)
}

/// Largest uniform lidar ratio `mu >= 1` for which `g(mu 1) > sqrt(Y_m b_m)`
/// at every pixel where that holds for `mu = 1`; `+inf` when there is no
/// molecular background.
pub fn mu_upper_bound(counts_m: &PhotonImage, nu_hat: &Array2<f64>, calib: &Calibration) -> Result<f64> {
    calib.grid.check(&counts_m.counts)?;
    if no_background(calib) {
        return Ok(f64::INFINITY);
    }
    let model = ExtinctionModel::new(nu_hat, calib)?;
    let ones = Array2::<f64>::ones(calib.grid.shape());
    bound_over_satisfiable(|mu| model.g(&(&ones * mu)), &counts_m.counts, &model.b_m, 1.0, 2.0)
}

/// Largest uniform extinction `beta >= 0` for which `h(beta 1) > sqrt(Y_m b_m)`
/// at every pixel where that holds for `beta = 0`; `+inf` when there is no
/// molecular background.
pub fn beta_upper_bound(counts_m: &PhotonImage, nu_hat: &Array2<f64>, calib: &Calibration) -> Result<f64> {
    calib.grid.check(&counts_m.counts)?;
    if no_background(calib) {
        return Ok(f64::INFINITY);
    }
    let model = ExtinctionModel::new(nu_hat, calib)?;
    let ones = Array2::<f64>::ones(calib.grid.shape());
    // a probe well below any physical extinction in 1/m
    let probe = 1e-3 / (calib.grid.dr * calib.grid.n_range as f64);
    bound_over_satisfiable(|beta| model.h(&(&ones * beta)), &counts_m.counts, &model.b_m, 0.0, probe)
}

/// Dense Hessian of the lidar-ratio loss restricted to one column,
/// `4 diag(nu) Q^T D Q diag(nu)` with `D = diag((g - b)(1 - Y b / g^2))`.
pub fn extinction_hessian_column(model: &ExtinctionModel, counts: &Array2<f64>, mu_tilde: &Array2<f64>, col: usize) -> Array2<f64> {
    let g = model.g(mu_tilde);
    let n = g.nrows();
    let dr = model.grid.dr;
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let (gi, b, y) = (g[[i, col]], model.b_m[[i, col]], counts[[i, col]]);
            (gi - b) * (1.0 - y * b / (gi * gi))
        })
        .collect();
    // tail[i] = sum of d over rows i..n
    let mut tail = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1] + d[i];
    }
    let nu = model.nu_hat.column(col);
    Array2::from_shape_fn((n, n), |(a, b)| 4.0 * nu[a] * nu[b] * dr * dr * tail[a.max(b)])
}

//! The baseline retrieval: averaging, algebraic inversion of the two
//! channels, lowpass filtering of the optical depth and differentiation.

mod savgol;

pub use savgol::{savitzky_golay, savitzky_golay_axis, SgWindow};

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::types::{AlgorithmTag, Calibration, InversionProducts, Observation};

/// Mean over non-overlapping `rows x cols` blocks.
pub fn block_average(image: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (n, k) = image.dim();
    if rows == 0 || cols == 0 || n % rows != 0 || k % cols != 0 {
        return Err(Error::invalid(
            "block size",
            format!("{rows}x{cols} does not divide a {n}x{k} image"),
        ));
    }
    let inv = 1.0 / (rows * cols) as f64;
    Ok(Array2::from_shape_fn((n / rows, k / cols), |(i, j)| {
        image
            .slice(ndarray::s![i * rows..(i + 1) * rows, j * cols..(j + 1) * cols])
            .sum()
            * inv
    }))
}

/// Expands a coarse image back onto a fine grid by repeating every pixel
/// over its `rows x cols` block.
pub fn upsample_replicate(image: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (n, k) = image.dim();
    Array2::from_shape_fn((n * rows, k * cols), |(i, j)| image[[i / rows, j / cols]])
}

/// Same-size moving average over an odd `rows x cols` window, replicating
/// edge pixels outward.
pub fn moving_average(image: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if rows % 2 == 0 || cols % 2 == 0 {
        return Err(Error::invalid(
            "moving-average window",
            format!("{rows}x{cols} must have odd sides"),
        ));
    }
    let (n, k) = image.dim();
    let (hr, hc) = ((rows / 2) as isize, (cols / 2) as isize);
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    // separable: rows first, then columns
    let mut tmp = Array2::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let mut s = 0.0;
            for d in -hc..=hc {
                s += image[[i, clamp(j as isize + d, k)]];
            }
            tmp[[i, j]] = s / cols as f64;
        }
    }
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let mut s = 0.0;
            for d in -hr..=hr {
                s += tmp[[clamp(i as isize + d, n), j]];
            }
            out[[i, j]] = s / rows as f64;
        }
    }
    Ok(out)
}

fn check_pair(s_c: &Array2<f64>, s_m: &Array2<f64>, calib: &Calibration) -> Result<()> {
    calib.grid.check(s_c)?;
    calib.grid.check(s_m)
}

/// Optical depth from background-subtracted channel energies. NaN where the
/// implied transmittance is not positive.
pub fn invert_od_algebraic(s_c: &Array2<f64>, s_m: &Array2<f64>, calib: &Calibration) -> Result<Array2<f64>> {
    check_pair(s_c, s_m, calib)?;
    let c_am = calib.c_am;
    let tau = Array2::from_shape_fn(s_c.dim(), |ix| {
        let wc = s_c[ix] - calib.b_c[ix];
        let wm = s_m[ix] - calib.b_m[ix];
        let arg = (wc * c_am - wm) / (calib.c_g[ix] * (calib.c_mc[ix] * c_am - calib.c_mm[ix]));
        if arg > 0.0 && arg.is_finite() {
            -0.5 * arg.ln()
        } else {
            f64::NAN
        }
    });
    Ok(tau)
}

/// Parallel backscatter from the two channel energies. NaN where the
/// denominator is not positive; that is the same set of pixels where the
/// optical-depth inversion fails.
pub fn invert_nu_algebraic(s_c: &Array2<f64>, s_m: &Array2<f64>, calib: &Calibration) -> Result<Array2<f64>> {
    check_pair(s_c, s_m, calib)?;
    let c_am = calib.c_am;
    let nu = Array2::from_shape_fn(s_c.dim(), |ix| {
        let wc = s_c[ix] - calib.b_c[ix];
        let wm = s_m[ix] - calib.b_m[ix];
        let den = wm - wc * c_am;
        if den > 0.0 {
            (wc * calib.c_mm[ix] - wm * calib.c_mc[ix]) / den
        } else {
            f64::NAN
        }
    });
    Ok(nu)
}

/// Stencil used to turn optical depth into extinction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerivativeScheme {
    /// Central differences inside, one-sided at the first and last bin.
    #[default]
    Central,
    /// Forward differences, backward at the last bin.
    Forward,
    /// Backward differences with zero optical depth before the first bin.
    /// This is the exact inverse of the cumulative integral.
    Backward,
}

/// Columnwise derivative of an optical-depth image along range.
pub fn finite_difference(tau: &Array2<f64>, dr: f64, scheme: DerivativeScheme) -> Result<Array2<f64>> {
    let n = tau.nrows();
    if n < 2 && scheme != DerivativeScheme::Backward {
        return Err(Error::invalid("optical depth", "need at least two range bins".to_string()));
    }
    let mut beta = Array2::zeros(tau.dim());
    for (src, mut dst) in tau.columns().into_iter().zip(beta.columns_mut()) {
        for i in 0..n {
            dst[i] = match scheme {
                DerivativeScheme::Central => {
                    if i == 0 {
                        (src[1] - src[0]) / dr
                    } else if i == n - 1 {
                        (src[n - 1] - src[n - 2]) / dr
                    } else {
                        (src[i + 1] - src[i - 1]) / (2.0 * dr)
                    }
                }
                DerivativeScheme::Forward => {
                    if i == n - 1 {
                        (src[n - 1] - src[n - 2]) / dr
                    } else {
                        (src[i + 1] - src[i]) / dr
                    }
                }
                DerivativeScheme::Backward => {
                    let prev = if i == 0 { 0.0 } else { src[i - 1] };
                    (src[i] - prev) / dr
                }
            };
        }
    }
    Ok(beta)
}

/// How the photon counts are averaged before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    None,
    /// Non-overlapping blocks; products live on the coarsened grid.
    Block { rows: usize, cols: usize },
    /// Odd-sized moving window; products keep the native grid.
    Moving { rows: usize, cols: usize },
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    /// Parses `none`, `block:R,C` or `moving:R,C`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("averaging", format!("'{s}' is not none, block:R,C or moving:R,C"));
        if s == "none" {
            return Ok(Averaging::None);
        }
        let (kind, dims) = s.split_once(':').ok_or_else(bad)?;
        let (r, c) = dims.split_once(',').ok_or_else(bad)?;
        let rows = r.trim().parse().map_err(|_| bad())?;
        let cols = c.trim().parse().map_err(|_| bad())?;
        match kind {
            "block" => Ok(Averaging::Block { rows, cols }),
            "moving" => Ok(Averaging::Moving { rows, cols }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Averaging {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Averaging::None => write!(f, "none"),
            Averaging::Block { rows, cols } => write!(f, "block:{rows},{cols}"),
            Averaging::Moving { rows, cols } => write!(f, "moving:{rows},{cols}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StandardOptions {
    pub averaging: Averaging,
    /// Filter along each row (time).
    pub sg_temporal: SgWindow,
    /// Filter along each column (range).
    pub sg_range: SgWindow,
    pub derivative: DerivativeScheme,
}

impl Default for StandardOptions {
    /// No averaging and no smoothing: the exact algebraic inverse.
    fn default() -> Self {
        StandardOptions {
            averaging: Averaging::None,
            sg_temporal: SgWindow::identity(),
            sg_range: SgWindow::identity(),
            derivative: DerivativeScheme::Backward,
        }
    }
}

impl StandardOptions {
    pub fn validate(&self) -> Result<()> {
        self.sg_temporal.validate()?;
        self.sg_range.validate()
    }
}

/// Products of the baseline retrieval plus its failure bookkeeping.
#[derive(Debug, Clone)]
pub struct StandardRun {
    pub products: InversionProducts,
    /// Filtered optical depth that the extinction was differentiated from.
    pub tau_smoothed: Array2<f64>,
    /// Pixels where the implied transmittance was not positive.
    pub invalid_tau: usize,
    /// Columns in which every optical-depth pixel is invalid.
    pub dead_columns: Vec<usize>,
}

/// Runs the baseline retrieval on a pair of channel observations.
///
/// With block averaging the products are on the coarsened grid; the
/// depolarization field and calibration are averaged the same way.
pub fn algorithm1<A: Observation, B: Observation>(
    y_c: &A,
    y_m: &B,
    calib: &Calibration,
    rho: &Array2<f64>,
    opts: &StandardOptions,
) -> Result<StandardRun> {
    opts.validate()?;
    for g in [y_c.grid(), y_m.grid()] {
        if g.shape() != calib.grid.shape() {
            return Err(Error::ShapeMismatch {
                expected: calib.grid.shape(),
                found: g.shape(),
            });
        }
    }
    calib.grid.check(rho)?;

    let (s_c, s_m, cal, rho, grid): (_, _, _, _, Grid) = match opts.averaging {
        Averaging::None => (
            y_c.values().clone(),
            y_m.values().clone(),
            calib.clone(),
            rho.clone(),
            calib.grid,
        ),
        Averaging::Block { rows, cols } => {
            let cal = calib.block_average(rows, cols)?;
            let grid = cal.grid;
            (
                block_average(y_c.values(), rows, cols)?,
                block_average(y_m.values(), rows, cols)?,
                cal,
                block_average(rho, rows, cols)?,
                grid,
            )
        }
        Averaging::Moving { rows, cols } => (
            moving_average(y_c.values(), rows, cols)?,
            moving_average(y_m.values(), rows, cols)?,
            calib.clone(),
            rho.clone(),
            calib.grid,
        ),
    };

    let tau = invert_od_algebraic(&s_c, &s_m, &cal)?;
    let nu = invert_nu_algebraic(&s_c, &s_m, &cal)?;
    let smooth = savitzky_golay_axis(&tau, 1, opts.sg_temporal)?;
    let smooth = savitzky_golay_axis(&smooth, 0, opts.sg_range)?;
    let beta = finite_difference(&smooth, grid.dr, opts.derivative)?;

    let one_minus = rho.mapv(|r| 1.0 - r);
    let nu_plus = &nu / &one_minus;
    let mut mu = Array2::zeros(grid.shape());
    Zip::from(&mut mu)
        .and(&beta)
        .and(&nu)
        .and(&one_minus)
        .for_each(|m, &b, &n, &om| *m = if n > 0.0 { om * b / n } else { f64::NAN });

    let invalid_tau = crate::types::invalid_count(&tau);
    let dead_columns = (0..grid.n_profiles)
        .filter(|&k| tau.column(k).iter().all(|v| v.is_nan()))
        .collect();
    let products = InversionProducts::new(
        grid,
        nu,
        nu_plus,
        Some(beta),
        Some(mu),
        Some(tau),
        AlgorithmTag::Standard,
    )?;
    Ok(StandardRun {
        products,
        tau_smoothed: smooth,
        invalid_tau,
        dead_columns,
    })
}

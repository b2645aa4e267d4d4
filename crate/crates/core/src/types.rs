//! Validated containers for scenes, calibrations, images and products.
//!
//! All constructors check the physical invariants of their data and return
//! an error instead of building a value that violates them. Invalid pixels
//! inside estimates (failed algebraic inversions) are stored as NaN.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{cumulative_integral, Grid};

fn check_all(
    field: &Array2<f64>,
    what: &'static str,
    ok: impl Fn(f64) -> bool,
    rule: &str,
) -> Result<()> {
    if let Some(((n, k), v)) = field.indexed_iter().find(|(_, &v)| !ok(v)) {
        return Err(Error::invalid(
            what,
            format!("value {v} at row {n}, column {k} violates {rule}"),
        ));
    }
    Ok(())
}

/// Ground-truth (or estimated) atmospheric fields on a grid.
#[derive(Debug, Clone)]
pub struct ScatterScene {
    pub grid: Grid,
    /// Parallel backscatter cross-section, 1/m.
    pub nu: Array2<f64>,
    /// Extinction cross-section, 1/m.
    pub beta: Array2<f64>,
    /// Linear depolarization coefficient.
    pub rho: Array2<f64>,
}

impl ScatterScene {
    pub fn new(grid: Grid, nu: Array2<f64>, beta: Array2<f64>, rho: Array2<f64>) -> Result<Self> {
        for f in [&nu, &beta, &rho] {
            grid.check(f)?;
        }
        check_all(&nu, "backscatter", |v| v >= 0.0 && v.is_finite(), "nu >= 0")?;
        check_all(&beta, "extinction", |v| v >= 0.0 && v.is_finite(), "beta >= 0")?;
        check_all(&rho, "depolarization", |v| (0.0..1.0).contains(&v), "0 <= rho < 1")?;
        for ((n, k), &b) in beta.indexed_iter() {
            let nu_plus = nu[[n, k]] / (1.0 - rho[[n, k]]);
            // lidar ratio must be at least one wherever there is backscatter
            if nu_plus > 0.0 && b < nu_plus * (1.0 - 1e-12) {
                return Err(Error::invalid(
                    "scene",
                    format!("lidar ratio {} < 1 at row {n}, column {k}", b / nu_plus),
                ));
            }
        }
        Ok(ScatterScene {
            grid,
            nu,
            beta,
            rho,
        })
    }

    /// Total backscatter `nu / (1 - rho)`.
    pub fn nu_plus(&self) -> Array2<f64> {
        &self.nu / &self.rho.mapv(|r| 1.0 - r)
    }

    /// Lidar ratio `beta / nu_plus`; NaN where there is no backscatter.
    pub fn lidar_ratio(&self) -> Array2<f64> {
        let mut mu = self.beta.clone();
        ndarray::Zip::from(&mut mu)
            .and(&self.nu_plus())
            .for_each(|m, &np| *m = if np > 0.0 { *m / np } else { f64::NAN });
        mu
    }

    /// Optical depth `Q beta`.
    pub fn optical_depth(&self) -> Array2<f64> {
        cumulative_integral(&self.beta, self.grid.dr)
    }
}

/// Instrument calibration of the combined and molecular channels.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub grid: Grid,
    /// Gain `C_g`.
    pub c_g: Array2<f64>,
    /// Molecular backscatter calibration of the combined channel `C_mc`.
    pub c_mc: Array2<f64>,
    /// Particulate leakage through the molecular filter `C_am`.
    pub c_am: f64,
    /// Molecular backscatter calibration of the molecular channel `C_mm`.
    pub c_mm: Array2<f64>,
    /// Combined-channel background counts per bin.
    pub b_c: Array2<f64>,
    /// Molecular-channel background counts per bin.
    pub b_m: Array2<f64>,
}

impl Calibration {
    pub fn new(
        grid: Grid,
        c_g: Array2<f64>,
        c_mc: Array2<f64>,
        c_am: f64,
        c_mm: Array2<f64>,
        b_c: Array2<f64>,
        b_m: Array2<f64>,
    ) -> Result<Self> {
        for f in [&c_g, &c_mc, &c_mm, &b_c, &b_m] {
            grid.check(f)?;
        }
        let finite_pos = |v: f64| v > 0.0 && v.is_finite();
        let finite_nonneg = |v: f64| v >= 0.0 && v.is_finite();
        check_all(&c_g, "gain", finite_pos, "C_g > 0")?;
        check_all(&c_mm, "molecular calibration", finite_pos, "C_mm > 0")?;
        check_all(&c_mc, "combined calibration", finite_nonneg, "C_mc >= 0")?;
        check_all(&b_c, "combined background", finite_nonneg, "b_c >= 0")?;
        check_all(&b_m, "molecular background", finite_nonneg, "b_m >= 0")?;
        if !(0.0..1.0).contains(&c_am) {
            return Err(Error::invalid("C_am", format!("{c_am} is outside [0, 1)")));
        }
        if let Some(((n, k), _)) = c_mc
            .indexed_iter()
            .find(|(idx, &mc)| mc * c_am - c_mm[*idx] == 0.0)
        {
            return Err(Error::invalid(
                "calibration",
                format!("C_mc C_am - C_mm vanishes at row {n}, column {k}"),
            ));
        }
        Ok(Calibration {
            grid,
            c_g,
            c_mc,
            c_am,
            c_mm,
            b_c,
            b_m,
        })
    }

    /// Uniform calibration; mostly useful in tests.
    pub fn uniform(grid: Grid, c_g: f64, c_mc: f64, c_am: f64, c_mm: f64, b_c: f64, b_m: f64) -> Result<Self> {
        let f = |v: f64| Array2::from_elem(grid.shape(), v);
        Calibration::new(grid, f(c_g), f(c_mc), c_am, f(c_mm), f(b_c), f(b_m))
    }

    /// Scales every quantity that is an expected count (gain and
    /// backgrounds) by `factor`. Models accumulation or Poisson thinning.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::invalid("scale factor", format!("{factor} must be positive")));
        }
        Ok(Calibration {
            grid: self.grid,
            c_g: &self.c_g * factor,
            c_mc: self.c_mc.clone(),
            c_am: self.c_am,
            c_mm: self.c_mm.clone(),
            b_c: &self.b_c * factor,
            b_m: &self.b_m * factor,
        })
    }

    /// Block-mean of every calibration field, matching block-averaged counts.
    pub fn block_average(&self, rows: usize, cols: usize) -> Result<Self> {
        let grid = self.grid.coarsen(rows, cols)?;
        let avg = |f: &Array2<f64>| crate::standard::block_average(f, rows, cols);
        Calibration::new(
            grid,
            avg(&self.c_g)?,
            avg(&self.c_mc)?,
            self.c_am,
            avg(&self.c_mm)?,
            avg(&self.b_c)?,
            avg(&self.b_m)?,
        )
    }

    pub fn background(&self, channel: Channel) -> &Array2<f64> {
        match channel {
            Channel::Combined => &self.b_c,
            Channel::Molecular => &self.b_m,
        }
    }
}

/// Noiseless expected photon counts per bin.
#[derive(Debug, Clone)]
pub struct EnergyImage {
    pub grid: Grid,
    pub values: Array2<f64>,
}

impl EnergyImage {
    pub fn new(grid: Grid, values: Array2<f64>) -> Result<Self> {
        grid.check(&values)?;
        if let Some(((row, col), &value)) = values
            .indexed_iter()
            .find(|(_, &v)| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::NonPositiveRate { row, col, value });
        }
        Ok(EnergyImage { grid, values })
    }
}

/// Detector channel of a photon-count image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Combined,
    Molecular,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Combined => "combined",
            Channel::Molecular => "molecular",
        }
    }
}

/// Photon counts. Stored as floats constrained to non-negative integers.
#[derive(Debug, Clone)]
pub struct PhotonImage {
    pub grid: Grid,
    pub counts: Array2<f64>,
    pub channel: Channel,
}

impl PhotonImage {
    pub fn new(grid: Grid, counts: Array2<f64>, channel: Channel) -> Result<Self> {
        grid.check(&counts)?;
        check_all(
            &counts,
            "photon counts",
            |v| v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
            "non-negative integer",
        )?;
        Ok(PhotonImage {
            grid,
            counts,
            channel,
        })
    }

    pub fn total(&self) -> f64 {
        self.counts.sum()
    }

    /// Fraction of pixels with zero counts.
    pub fn zero_fraction(&self) -> f64 {
        self.counts.iter().filter(|&&c| c == 0.0).count() as f64 / self.grid.len() as f64
    }
}

/// Anything that can be fed to the algebraic inversion: raw counts or
/// noiseless expected counts.
pub trait Observation {
    fn grid(&self) -> &Grid;
    fn values(&self) -> &Array2<f64>;
}

impl Observation for PhotonImage {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &Array2<f64> {
        &self.counts
    }
}

impl Observation for EnergyImage {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Which inversion produced a set of estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlgorithmTag {
    /// Averaging, algebraic inversion and lowpass filtering.
    Standard,
    /// Channel denoising followed by lidar-ratio estimation.
    TvNew,
    /// Extinction estimated directly from the molecular channel.
    TvAlternative,
}

impl AlgorithmTag {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmTag::Standard => "standard",
            AlgorithmTag::TvNew => "tv",
            AlgorithmTag::TvAlternative => "alt",
        }
    }
}

impl fmt::Display for AlgorithmTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AlgorithmTag::Standard),
            "tv" => Ok(AlgorithmTag::TvNew),
            "alt" => Ok(AlgorithmTag::TvAlternative),
            other => Err(Error::invalid("algorithm", format!("unknown tag '{other}'"))),
        }
    }
}

/// Estimates returned by one inversion run.
#[derive(Debug, Clone)]
pub struct InversionProducts {
    pub grid: Grid,
    pub nu_hat: Array2<f64>,
    pub nu_plus_hat: Array2<f64>,
    pub beta_hat: Option<Array2<f64>>,
    pub mu_hat: Option<Array2<f64>>,
    pub tau_hat: Option<Array2<f64>>,
    pub algorithm: AlgorithmTag,
}

impl InversionProducts {
    pub fn new(
        grid: Grid,
        nu_hat: Array2<f64>,
        nu_plus_hat: Array2<f64>,
        beta_hat: Option<Array2<f64>>,
        mu_hat: Option<Array2<f64>>,
        tau_hat: Option<Array2<f64>>,
        algorithm: AlgorithmTag,
    ) -> Result<Self> {
        grid.check(&nu_hat)?;
        grid.check(&nu_plus_hat)?;
        for f in [&beta_hat, &mu_hat, &tau_hat].into_iter().flatten() {
            grid.check(f)?;
        }
        Ok(InversionProducts {
            grid,
            nu_hat,
            nu_plus_hat,
            beta_hat,
            mu_hat,
            tau_hat,
            algorithm,
        })
    }

    /// Named fields present in this product set, in a fixed order.
    pub fn fields(&self) -> Vec<(&'static str, &Array2<f64>)> {
        let mut out = vec![("nu", &self.nu_hat), ("nu_plus", &self.nu_plus_hat)];
        if let Some(b) = &self.beta_hat {
            out.push(("beta", b));
        }
        if let Some(m) = &self.mu_hat {
            out.push(("mu", m));
        }
        if let Some(t) = &self.tau_hat {
            out.push(("tau", t));
        }
        out
    }
}

/// Number of NaN (invalid) pixels in a field.
pub fn invalid_count(field: &Array2<f64>) -> usize {
    field.iter().filter(|v| v.is_nan()).count()
}

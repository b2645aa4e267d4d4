//! Directory layouts shared by the subcommands.
//!
//! A simulation directory holds one matrix file per field plus
//! `manifest.txt`. An inversion directory holds the product fields under
//! the same names as the truth fields, so the two can be scored directly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hsrl::io::{get_parsed, read_key_values, read_matrix, write_key_values, write_matrix, KeyValues};
use hsrl::{Calibration, Channel, EnergyImage, Grid, PhotonImage};
use ndarray::Array2;

pub const MANIFEST: &str = "manifest.txt";

pub const CALIBRATION_FIELDS: [&str; 5] = ["c_g", "c_mc", "c_mm", "b_c", "b_m"];
/// Fields that can be scored, in report order.
pub const SCORED_FIELDS: [&str; 5] = ["nu", "nu_plus", "beta", "mu", "tau"];

pub fn matrix_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_field(dir: &Path, name: &str, field: &Array2<f64>, grid: &Grid) -> Result<()> {
    let path = matrix_path(dir, name);
    write_matrix(&path, field, grid).with_context(|| format!("writing {}", path.display()))
}

pub fn read_field(dir: &Path, name: &str) -> Result<(Array2<f64>, Grid)> {
    read_any(&matrix_path(dir, name))
}

pub fn read_any(path: &Path) -> Result<(Array2<f64>, Grid)> {
    read_matrix(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_manifest(dir: &Path, kv: &KeyValues) -> Result<()> {
    let path = dir.join(MANIFEST);
    write_key_values(&path, kv).with_context(|| format!("writing {}", path.display()))
}

pub fn read_manifest(dir: &Path) -> Result<KeyValues> {
    let path = dir.join(MANIFEST);
    read_key_values(&path).with_context(|| format!("reading {}", path.display()))
}

fn same_grid(expected: &Grid, found: &Grid, what: &str) -> Result<()> {
    if expected != found {
        bail!("{what} is on grid {found:?}, expected {expected:?}");
    }
    Ok(())
}

/// Everything an inversion needs from a simulation directory.
pub struct Inputs {
    pub grid: Grid,
    pub counts_c: Array2<f64>,
    pub counts_m: Array2<f64>,
    pub calib: Calibration,
    pub rho: Array2<f64>,
}

impl Inputs {
    /// The channels as photon counts; fails on non-integer data.
    pub fn photons(&self) -> Result<(PhotonImage, PhotonImage)> {
        Ok((
            PhotonImage::new(self.grid, self.counts_c.clone(), Channel::Combined)?,
            PhotonImage::new(self.grid, self.counts_m.clone(), Channel::Molecular)?,
        ))
    }

    /// The channels as expected counts.
    pub fn energies(&self) -> Result<(EnergyImage, EnergyImage)> {
        Ok((
            EnergyImage::new(self.grid, self.counts_c.clone())?,
            EnergyImage::new(self.grid, self.counts_m.clone())?,
        ))
    }
}

fn read_on(dir: &Path, name: &str, grid: &Grid) -> Result<Array2<f64>> {
    let (field, g) = read_field(dir, name)?;
    same_grid(grid, &g, name)?;
    Ok(field)
}

/// Reads calibration, depolarization and either the sampled counts or,
/// with `noiseless`, the expected counts.
pub fn read_inputs(dir: &Path, noiseless: bool) -> Result<Inputs> {
    let manifest = read_manifest(dir)?;
    let c_am: f64 = get_parsed(&manifest, "c_am")?.context("manifest has no c_am")?;
    let (counts_c, grid) = read_field(dir, if noiseless { "expected_c" } else { "counts_c" })?;
    let counts_m = read_on(dir, if noiseless { "expected_m" } else { "counts_m" }, &grid)?;
    let [c_g, c_mc, c_mm, b_c, b_m] = CALIBRATION_FIELDS.map(|n| read_on(dir, n, &grid));
    let calib = Calibration::new(grid, c_g?, c_mc?, c_am, c_mm?, b_c?, b_m?)?;
    let rho = read_on(dir, "rho", &grid)?;
    Ok(Inputs {
        grid,
        counts_c,
        counts_m,
        calib,
        rho,
    })
}

/// Truth fields of a simulation directory, with `nu_plus` derived from
/// `nu` and `rho` when it is not stored.
pub fn read_truth(dir: &Path) -> Result<Vec<(&'static str, Array2<f64>, Grid)>> {
    let mut out = Vec::new();
    for name in SCORED_FIELDS {
        if matrix_path(dir, name).exists() {
            let (f, g) = read_field(dir, name)?;
            out.push((name, f, g));
        }
    }
    let has = |n: &str| out.iter().any(|(m, _, _)| *m == n);
    if !has("nu_plus") && has("nu") && matrix_path(dir, "rho").exists() {
        let (nu, grid) = read_field(dir, "nu")?;
        let (rho, g) = read_field(dir, "rho")?;
        same_grid(&grid, &g, "rho")?;
        out.push(("nu_plus", &nu / &rho.mapv(|r| 1.0 - r), grid));
    }
    Ok(out)
}

//! Monte-Carlo comparisons of the baseline and TV retrievals on the
//! synthetic cirrus scene, and the lowpass-filter bias demonstration.
//!
//! Every run draws fresh photon counts with a seed derived from the
//! experiment seed and the run index, so results are reproducible and runs
//! can be evaluated in any order.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{cumulative_integral, Grid};
use crate::crossval::LambdaGrid;
use crate::metrics::{format_report_rows, ErrorAccumulator, ReportRow};
use crate::pipelines::{algorithm2, algorithm2_backscatter, algorithm2_od_direct, algorithm3, TvOptions};
use crate::simulate::{accumulate, derive_seed, make_cirrus_scene, oversample_columns, sample_poisson, SceneRecipe};
use crate::standard::{
    algorithm1, finite_difference, savitzky_golay_axis, upsample_replicate, Averaging, DerivativeScheme,
    SgWindow, StandardOptions,
};
use crate::forward::{forward_combined, forward_molecular};
use crate::types::{invalid_count, Calibration, Channel, PhotonImage, ScatterScene};

/// Settings of a Monte-Carlo experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub recipe: SceneRecipe,
    pub runs: usize,
    pub seed: u64,
    pub tv: TvOptions,
    /// Block size of the averaged baseline in experiment one.
    pub block: (usize, usize),
    /// Number of native profiles accumulated per profile in experiment two.
    pub snr_factor: usize,
    /// Baseline filters in experiment two.
    pub sg_temporal: SgWindow,
    pub sg_range: SgWindow,
}

impl ExperimentConfig {
    /// Backscatter comparison at native resolution.
    pub fn one() -> Self {
        ExperimentConfig {
            recipe: SceneRecipe::default(),
            runs: 10,
            seed: 0,
            tv: TvOptions::default(),
            block: (2, 2),
            snr_factor: 1,
            sg_temporal: SgWindow::identity(),
            sg_range: SgWindow::identity(),
        }
    }

    /// Extinction comparison on accumulated profiles. The molecular
    /// channel is made weaker than in [`ExperimentConfig::one`] so that the
    /// standard inversion meets the invalid-pixel regime, and the weight
    /// grid for the denoising stage reaches lower since accumulated counts
    /// favor lighter smoothing.
    pub fn two() -> Self {
        let one = ExperimentConfig::one();
        ExperimentConfig {
            recipe: SceneRecipe {
                c_mm: 0.06e-6,
                ..one.recipe
            },
            tv: TvOptions {
                omega_grid: LambdaGrid::log_spaced(-4.0, 0.0, 0.25).expect("valid exponents"),
                ..one.tv
            },
            snr_factor: 48,
            sg_temporal: SgWindow { window: 5, order: 1 },
            sg_range: SgWindow { window: 15, order: 1 },
            ..one
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.recipe.validate()?;
        self.tv.validate()?;
        self.sg_temporal.validate()?;
        self.sg_range.validate()?;
        if self.runs == 0 || self.snr_factor == 0 {
            return Err(Error::invalid("experiment", "runs and snr_factor must be positive"));
        }
        Ok(())
    }
}

/// Invalid-pixel count of one product in one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvalidRecord {
    pub run: usize,
    pub algorithm: String,
    pub field: String,
    pub count: usize,
}

/// Per-run solver bookkeeping of the TV retrievals.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    /// Selected weights in stage order (`omega_c`, `omega_m`, then `mu`
    /// and `beta` when they ran).
    pub lambdas: Vec<(String, f64)>,
    pub bounds: Vec<(String, f64)>,
    /// Extinction pixels pinned at their lower bound.
    pub pinned: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub rows: Vec<ReportRow>,
    pub invalid: Vec<InvalidRecord>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentSummary {
    pub fn report(&self, field: &str, algorithm: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.field == field && r.algorithm == algorithm)
    }

    /// Runs in which `algorithm` left at least one invalid `field` pixel.
    pub fn runs_with_invalid(&self, algorithm: &str, field: &str) -> usize {
        self.invalid
            .iter()
            .filter(|r| r.algorithm == algorithm && r.field == field && r.count > 0)
            .count()
    }

    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(|r| r.converged)
    }

    pub fn summary_csv(&self) -> String {
        format_report_rows(&self.rows)
    }

    pub fn invalid_csv(&self) -> String {
        let mut out = String::from("run,algorithm,field,invalid_pixels\n");
        for r in &self.invalid {
            let _ = writeln!(out, "{},{},{},{}", r.run, r.algorithm, r.field, r.count);
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("run,seed,converged,stage,kind,value\n");
        for r in &self.runs {
            for (stage, v) in &r.lambdas {
                let _ = writeln!(out, "{},{},{},{stage},lambda,{v:e}", r.run, r.seed, r.converged);
            }
            for (stage, v) in &r.bounds {
                let _ = writeln!(out, "{},{},{},{stage},upper_bound,{v:e}", r.run, r.seed, r.converged);
            }
            if r.pinned > 0 {
                let _ = writeln!(out, "{},{},{},beta,pinned_pixels,{}", r.run, r.seed, r.converged, r.pinned);
            }
        }
        out
    }
}

/// Estimates of one algorithm in one run, by field name.
type FieldSet = Vec<(&'static str, Array2<f64>)>;

struct RunOutput {
    estimates: Vec<(&'static str, FieldSet)>,
    invalid: Vec<(&'static str, &'static str, usize)>,
    record: RunRecord,
}

fn summarize(
    truths: &[(&'static str, Array2<f64>)],
    algorithms: &[&'static str],
    outputs: Vec<RunOutput>,
) -> Result<ExperimentSummary> {
    let mut rows = Vec::new();
    for &(field, ref truth) in truths {
        for &alg in algorithms {
            let mut acc = ErrorAccumulator::new(truth.clone());
            for out in &outputs {
                let set = &out.estimates.iter().find(|(a, _)| *a == alg).expect("algorithm present").1;
                let est = &set.iter().find(|(f, _)| *f == field).expect("field present").1;
                acc.push(est)?;
            }
            rows.push(ReportRow {
                field: field.to_string(),
                algorithm: alg.to_string(),
                report: acc.report()?,
            });
        }
    }
    let mut invalid = Vec::new();
    let mut runs = Vec::new();
    for out in outputs {
        for (alg, field, count) in out.invalid {
            invalid.push(InvalidRecord {
                run: out.record.run,
                algorithm: alg.to_string(),
                field: field.to_string(),
                count,
            });
        }
        runs.push(out.record);
    }
    Ok(ExperimentSummary { rows, invalid, runs })
}

/// Combined and molecular counts of one scene, each channel on its own
/// sub-seed of `seed`.
pub fn sample_pair(scene: &ScatterScene, calib: &Calibration, seed: u64) -> Result<(PhotonImage, PhotonImage)> {
    let y_c = sample_poisson(&forward_combined(scene, calib)?, Channel::Combined, derive_seed(seed, 10));
    let y_m = sample_poisson(&forward_molecular(scene, calib)?, Channel::Molecular, derive_seed(seed, 11));
    Ok((y_c, y_m))
}

/// Backscatter and optical depth at native resolution: the baseline with
/// and without block averaging against the TV retrieval. The TV optical
/// depth comes from the algebraic formula applied to the denoised channels.
pub fn experiment_one(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let (scene, calib) = make_cirrus_scene(&cfg.recipe)?;
    let (br, bc) = cfg.block;
    let outputs = (0..cfg.runs)
        .into_par_iter()
        .map(|run| -> Result<RunOutput> {
            let seed = derive_seed(cfg.seed, run as u64);
            let (y_c, y_m) = sample_pair(&scene, &calib, seed)?;
            let plain = algorithm1(&y_c, &y_m, &calib, &scene.rho, &StandardOptions::default())?;
            let avg_opts = StandardOptions {
                averaging: Averaging::Block { rows: br, cols: bc },
                ..StandardOptions::default()
            };
            let avg = algorithm1(&y_c, &y_m, &calib, &scene.rho, &avg_opts)?;
            let tv = algorithm2_backscatter(&y_c, &y_m, &calib, &scene.rho, &cfg.tv, derive_seed(seed, 20))?;
            let tv_tau = algorithm2_od_direct(&tv.omega_c.estimate, &tv.omega_m.estimate, &calib)?;

            let plain_tau = plain.products.tau_hat.clone().expect("baseline optical depth");
            let avg_nu = upsample_replicate(&avg.products.nu_plus_hat, br, bc);
            let avg_tau = upsample_replicate(avg.products.tau_hat.as_ref().expect("baseline optical depth"), br, bc);
            let invalid = vec![
                ("standard", "tau", invalid_count(&plain_tau)),
                ("standard_avg", "tau", invalid_count(&avg_tau)),
                ("tv", "tau", invalid_count(&tv_tau)),
                ("tv", "nu_plus", invalid_count(&tv.nu_plus_hat)),
            ];
            let record = RunRecord {
                run,
                seed,
                lambdas: vec![
                    ("omega_c".into(), tv.omega_c.lambda_star),
                    ("omega_m".into(), tv.omega_m.lambda_star),
                ],
                bounds: vec![],
                pinned: 0,
                converged: tv.omega_c.converged() && tv.omega_m.converged(),
            };
            Ok(RunOutput {
                estimates: vec![
                    ("standard", vec![("nu_plus", plain.products.nu_plus_hat), ("tau", plain_tau)]),
                    ("standard_avg", vec![("nu_plus", avg_nu), ("tau", avg_tau)]),
                    ("tv", vec![("nu_plus", tv.nu_plus_hat), ("tau", tv_tau)]),
                ],
                invalid,
                record,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(
        &[("nu_plus", scene.nu_plus()), ("tau", scene.optical_depth())],
        &["standard", "standard_avg", "tv"],
        outputs,
    )
}

/// Counts summed over `factor` native profiles: the scene is oversampled
/// in time, sampled, and accumulated back onto the original grid.
pub fn accumulated_pair(
    scene: &ScatterScene,
    calib: &Calibration,
    factor: usize,
    seed: u64,
) -> Result<(PhotonImage, PhotonImage, Calibration)> {
    let (fine_scene, fine_calib) = oversample_columns(scene, calib, factor)?;
    let (y_c, y_m) = sample_pair(&fine_scene, &fine_calib, seed)?;
    let coarse = calib.scaled(factor as f64)?;
    let mut y_c = accumulate(&y_c, 1, factor)?;
    let mut y_m = accumulate(&y_m, 1, factor)?;
    // the accumulated grid equals the original up to rounding in dt
    y_c.grid = coarse.grid;
    y_m.grid = coarse.grid;
    Ok((y_c, y_m, coarse))
}

/// Extinction, lidar ratio and optical depth from accumulated profiles:
/// the filtered baseline against both TV retrievals.
pub fn experiment_two(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let (scene, calib) = make_cirrus_scene(&cfg.recipe)?;
    let std_opts = StandardOptions {
        averaging: Averaging::None,
        sg_temporal: cfg.sg_temporal,
        sg_range: cfg.sg_range,
        derivative: DerivativeScheme::Backward,
    };
    let outputs = (0..cfg.runs)
        .into_par_iter()
        .map(|run| -> Result<RunOutput> {
            let seed = derive_seed(cfg.seed, run as u64);
            let (y_c, y_m, coarse) = accumulated_pair(&scene, &calib, cfg.snr_factor, seed)?;
            let plain = algorithm1(&y_c, &y_m, &coarse, &scene.rho, &std_opts)?;
            let tv = algorithm2(&y_c, &y_m, &coarse, &scene.rho, &cfg.tv, derive_seed(seed, 20))?;
            let alt = algorithm3(&y_m, &tv.products.nu_hat, &scene.rho, &coarse, &cfg.tv, derive_seed(seed, 21))?;

            let field = |p: &crate::types::InversionProducts, name: &'static str| -> Array2<f64> {
                p.fields()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, f)| f.clone())
                    .expect("field present")
            };
            let mut estimates = Vec::new();
            let mut invalid = vec![("standard", "tau_raw", plain.invalid_tau)];
            for (alg, p, tau) in [
                ("standard", &plain.products, plain.tau_smoothed.clone()),
                ("tv", &tv.products, field(&tv.products, "tau")),
                ("alt", &alt.products, field(&alt.products, "tau")),
            ] {
                let set: FieldSet = vec![
                    ("nu_plus", field(p, "nu_plus")),
                    ("beta", field(p, "beta")),
                    ("mu", field(p, "mu")),
                    ("tau", tau),
                ];
                for (f, v) in &set {
                    invalid.push((alg, *f, invalid_count(v)));
                }
                estimates.push((alg, set));
            }
            let record = RunRecord {
                run,
                seed,
                lambdas: vec![
                    ("omega_c".into(), tv.omega_c.lambda_star),
                    ("omega_m".into(), tv.omega_m.lambda_star),
                    ("mu".into(), tv.mu.lambda_star),
                    ("beta".into(), alt.beta.lambda_star),
                ],
                bounds: vec![("mu".into(), tv.mu_upper), ("beta".into(), alt.beta_upper)],
                pinned: alt.pinned,
                converged: tv.converged() && alt.converged(),
            };
            Ok(RunOutput {
                estimates,
                invalid,
                record,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(
        &[
            ("nu_plus", scene.nu_plus()),
            ("beta", scene.beta.clone()),
            ("mu", scene.lidar_ratio()),
            ("tau", scene.optical_depth()),
        ],
        &["standard", "tv", "alt"],
        outputs,
    )
}

/// A single noiseless profile with a sharp cloud base.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBiasConfig {
    pub n_range: usize,
    pub dr: f64,
    /// First bin inside the cloud.
    pub cloud_base: usize,
    pub clear_nu: f64,
    pub clear_mu: f64,
    pub cloud_nu: f64,
    pub cloud_mu: f64,
    /// Range window of the first-order filter applied to optical depth.
    pub window: usize,
}

impl Default for FilterBiasConfig {
    fn default() -> Self {
        FilterBiasConfig {
            n_range: 64,
            dr: 7.5,
            cloud_base: 32,
            clear_nu: 1e-7,
            clear_mu: 35.0,
            cloud_nu: 2.4e-6,
            cloud_mu: 25.0,
            window: 15,
        }
    }
}

/// True and filter-derived quantities along the profile.
#[derive(Debug, Clone)]
pub struct FilterBiasProfile {
    pub cloud_base: usize,
    pub nu: Vec<f64>,
    pub beta_true: Vec<f64>,
    pub beta_smoothed: Vec<f64>,
    pub mu_true: Vec<f64>,
    pub mu_implied: Vec<f64>,
}

impl FilterBiasProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,nu,beta_true,beta_smoothed,mu_true,mu_implied\n");
        for i in 0..self.nu.len() {
            let _ = writeln!(
                out,
                "{i},{:e},{:e},{:e},{},{}",
                self.nu[i], self.beta_true[i], self.beta_smoothed[i], self.mu_true[i], self.mu_implied[i]
            );
        }
        out
    }
}

/// Smooths the exact optical depth of a step profile along range,
/// differentiates it and reports the lidar ratio the smoothed extinction
/// implies.
pub fn filter_bias(cfg: &FilterBiasConfig) -> Result<FilterBiasProfile> {
    if cfg.cloud_base == 0 || cfg.cloud_base >= cfg.n_range {
        return Err(Error::invalid("cloud base", format!("{} is outside 1..{}", cfg.cloud_base, cfg.n_range)));
    }
    let grid = Grid::new(cfg.n_range, 1, cfg.dr, 1.0)?;
    let cloudy = |i: usize| i >= cfg.cloud_base;
    let nu = Array2::from_shape_fn(grid.shape(), |(i, _)| if cloudy(i) { cfg.cloud_nu } else { cfg.clear_nu });
    let mu = Array2::from_shape_fn(grid.shape(), |(i, _)| if cloudy(i) { cfg.cloud_mu } else { cfg.clear_mu });
    let beta = &nu * &mu;
    let tau = cumulative_integral(&beta, cfg.dr);
    let smooth = savitzky_golay_axis(&tau, 0, SgWindow::new(cfg.window, 1)?)?;
    let beta_s = finite_difference(&smooth, cfg.dr, DerivativeScheme::Central)?;
    let implied = &beta_s / &nu;
    let col = |a: &Array2<f64>| a.column(0).to_vec();
    Ok(FilterBiasProfile {
        cloud_base: cfg.cloud_base,
        nu: col(&nu),
        beta_true: col(&beta),
        beta_smoothed: col(&beta_s),
        mu_true: col(&mu),
        mu_implied: col(&implied),
    })
}

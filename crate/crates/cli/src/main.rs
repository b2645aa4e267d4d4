//! `hsrl`: simulate, invert and score photon-counting HSRL images, and
//! rerun the Monte-Carlo comparisons.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 solver did not
//! converge (the best iterate is still written), 4 infeasible constraints.

mod dataset;
mod raster;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hsrl::crossval::{format_lambda_table, format_trace, LambdaGrid, Selection};
use hsrl::experiment::{experiment_one, experiment_two, filter_bias, sample_pair, ExperimentConfig, ExperimentSummary, FilterBiasConfig};
use hsrl::forward::{forward_combined, forward_molecular};
use hsrl::io::{read_key_values, KeyValues};
use hsrl::metrics::{format_report_rows, ErrorAccumulator, ReportRow};
use hsrl::pipelines::{algorithm2, algorithm3, TvOptions};
use hsrl::simulate::{make_cirrus_scene, SceneRecipe};
use hsrl::standard::{algorithm1, Averaging, DerivativeScheme, SgWindow, StandardOptions};
use hsrl::{invalid_count, InversionProducts};

use dataset::{
    create_dir, matrix_path, read_any, read_field, read_inputs, read_manifest, read_truth, write_field,
    write_manifest, SCORED_FIELDS,
};

#[derive(Parser)]
#[command(name = "hsrl", version, about = "Photon-counting HSRL retrievals with total-variation regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a cirrus scene, write its fields and sample both channels.
    Simulate(SimulateArgs),
    /// Retrieve backscatter, extinction, lidar ratio and optical depth.
    Invert(InvertArgs),
    /// Error report of estimate directories against a truth directory.
    Score(ScoreArgs),
    /// Rerun one of the Monte-Carlo comparisons.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene recipe (`key = value` lines); defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sampling seed; defaults to the recipe's.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a PNG preview per field.
    #[arg(long)]
    png: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algorithm {
    Standard,
    Tv,
    Alt,
}

impl Algorithm {
    fn name(self) -> &'static str {
        match self {
            Algorithm::Standard => "standard",
            Algorithm::Tv => "tv",
            Algorithm::Alt => "alt",
        }
    }
}

#[derive(Args)]
struct TvFlags {
    /// Candidate TV weights as a comma list. Prefix with `omega:`, `mu:`
    /// or `beta:` to set one stage; without a prefix every stage gets the
    /// list. Repeatable.
    #[arg(long = "lambda-grid", value_name = "[STAGE:]LIST")]
    lambda_grid: Vec<String>,
    /// Fixed upper end of the lidar-ratio box instead of the computed one.
    #[arg(long)]
    mu_upper: Option<f64>,
}

#[derive(Args)]
struct SgFlags {
    /// Savitzky-Golay filter along time, as `WINDOW` or `WINDOW,ORDER`.
    #[arg(long, value_name = "W[,P]")]
    sg_temporal: Option<String>,
    /// Savitzky-Golay filter along range, as `WINDOW` or `WINDOW,ORDER`.
    #[arg(long, value_name = "W[,P]")]
    sg_range: Option<String>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(value_enum)]
    algorithm: Algorithm,
    /// Directory written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    tv: TvFlags,
    #[command(flatten)]
    sg: SgFlags,
    /// Averaging before the standard inversion.
    #[arg(long, value_name = "none|block:R,C|moving:R,C")]
    avg: Option<Averaging>,
    /// Backscatter estimate for `alt`, e.g. the `nu.csv` of a `tv` run.
    #[arg(long)]
    nu_hat: Option<PathBuf>,
    /// Write the solver trace of every selected solve.
    #[arg(long)]
    trace: bool,
    /// Invert the expected counts instead of the sampled ones (`standard`
    /// only).
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Directory with the true fields.
    #[arg(long)]
    truth: PathBuf,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Estimate directories. Directories whose manifests name the same
    /// algorithm are pooled as Monte-Carlo runs.
    #[arg(required = true)]
    estimates: Vec<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    One,
    Two,
    Filterbias,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    which: Which,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Recipe keys that replace the experiment's scene settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    tv: TvFlags,
    #[command(flatten)]
    sg: SgFlags,
    /// Profiles summed per accumulated profile in experiment two.
    #[arg(long)]
    snr_factor: Option<usize>,
    /// Block used by the averaged baseline of experiment one.
    #[arg(long, value_name = "block:R,C")]
    avg: Option<Averaging>,
}

/// Raised after the outputs are written when a solve hit its iteration cap.
#[derive(Debug)]
struct NotConverged(String);

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "solver did not converge: {}", self.0)
    }
}

impl std::error::Error for NotConverged {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NotConverged>().is_some() {
        return 3;
    }
    match err.chain().find_map(|c| c.downcast_ref::<hsrl::Error>()) {
        Some(hsrl::Error::Infeasible(_)) => 4,
        Some(hsrl::Error::Solver(_)) => 3,
        _ => 2,
    }
}

fn parse_sg(text: &str) -> Result<SgWindow> {
    let mut parts = text.split(',').map(str::trim);
    let window: usize = parts.next().unwrap_or("").parse().with_context(|| format!("bad filter '{text}'"))?;
    let order: usize = match parts.next() {
        Some(p) => p.parse().with_context(|| format!("bad filter order in '{text}'"))?,
        None if window == 1 => 0,
        None => 1,
    };
    if parts.next().is_some() {
        bail!("filter '{text}' has more than two parts");
    }
    Ok(SgWindow::new(window, order)?)
}

fn apply_tv_flags(opts: &mut TvOptions, flags: &TvFlags) -> Result<()> {
    for entry in &flags.lambda_grid {
        match entry.split_once(':') {
            Some((stage, list)) => {
                let grid = LambdaGrid::parse(list)?;
                match stage.trim() {
                    "omega" => opts.omega_grid = grid,
                    "mu" => opts.mu_grid = grid,
                    "beta" => opts.beta_grid = grid,
                    other => bail!("unknown lambda-grid stage '{other}' (expected omega, mu or beta)"),
                }
            }
            None => {
                let grid = LambdaGrid::parse(entry)?;
                opts.omega_grid = grid.clone();
                opts.mu_grid = grid.clone();
                opts.beta_grid = grid;
            }
        }
    }
    if flags.mu_upper.is_some() {
        opts.mu_upper = flags.mu_upper;
    }
    opts.validate()?;
    Ok(())
}

fn list(grid: &LambdaGrid) -> String {
    grid.values().iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
}

fn put(kv: &mut KeyValues, key: &str, value: impl ToString) {
    kv.insert(key.to_string(), value.to_string());
}

fn record_tv_options(kv: &mut KeyValues, opts: &TvOptions) {
    put(kv, "lambda_grid_omega", list(&opts.omega_grid));
    put(kv, "lambda_grid_mu", list(&opts.mu_grid));
    put(kv, "lambda_grid_beta", list(&opts.beta_grid));
    put(kv, "thin_p", opts.thin_p);
    put(kv, "mu_upper_override", opts.mu_upper.map_or("none".to_string(), |m| m.to_string()));
    let s = &opts.solver;
    put(kv, "solver_max_iters", s.max_iters);
    put(kv, "solver_objective_tol", s.objective_tol);
    put(kv, "solver_step_tol", s.step_tol);
    put(kv, "solver_prox_iters", s.prox_iters);
    put(kv, "solver_prox_tol", s.prox_tol);
}

fn sg_text(sg: SgWindow) -> String {
    format!("{},{}", sg.window, sg.order)
}

fn write_products(dir: &Path, products: &InversionProducts, png: bool, kv: &mut KeyValues) -> Result<()> {
    for (name, field) in products.fields() {
        write_field(dir, name, field, &products.grid)?;
        put(kv, &format!("invalid_{name}"), invalid_count(field));
        if png {
            raster::write_png(&dir.join(format!("{name}.png")), name, field)?;
        }
    }
    Ok(())
}

fn write_selections(dir: &Path, stages: &[(&str, &Selection)], trace: bool, kv: &mut KeyValues) -> Result<()> {
    let mut table = String::from("stage,lambda,train_objective,test_loss,iterations,converged\n");
    for (stage, sel) in stages {
        for line in format_lambda_table(&sel.table).lines().skip(1) {
            let _ = writeln!(table, "{stage},{line}");
        }
        put(kv, &format!("lambda_{stage}"), format!("{:e}", sel.lambda_star));
        put(kv, &format!("converged_{stage}"), sel.converged());
        if trace {
            let path = dir.join(format!("trace_{stage}.csv"));
            fs::write(&path, format_trace(&sel.solve)).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let path = dir.join("lambda_table.csv");
    fs::write(&path, table).with_context(|| format!("writing {}", path.display()))
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let recipe = match &args.config {
        Some(p) => SceneRecipe::from_key_values(&read_key_values(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SceneRecipe::default(),
    };
    let seed = args.seed.unwrap_or(recipe.seed);
    let (scene, calib) = make_cirrus_scene(&recipe)?;
    let expected_c = forward_combined(&scene, &calib)?;
    let expected_m = forward_molecular(&scene, &calib)?;
    let (y_c, y_m) = sample_pair(&scene, &calib, seed)?;

    create_dir(&args.out)?;
    let fields = [
        ("nu", scene.nu.clone()),
        ("beta", scene.beta.clone()),
        ("mu", scene.lidar_ratio()),
        ("tau", scene.optical_depth()),
        ("rho", scene.rho.clone()),
        ("c_g", calib.c_g.clone()),
        ("c_mc", calib.c_mc.clone()),
        ("c_mm", calib.c_mm.clone()),
        ("b_c", calib.b_c.clone()),
        ("b_m", calib.b_m.clone()),
        ("expected_c", expected_c.values),
        ("expected_m", expected_m.values),
        ("counts_c", y_c.counts),
        ("counts_m", y_m.counts),
    ];
    for (name, field) in &fields {
        write_field(&args.out, name, field, &scene.grid)?;
        if args.png {
            raster::write_png(&args.out.join(format!("{name}.png")), name, field)?;
        }
    }
    let mut kv = recipe.to_key_values();
    put(&mut kv, "command", "simulate");
    put(&mut kv, "seed", seed);
    put(&mut kv, "files", fields.iter().map(|(n, _)| format!("{n}.csv")).collect::<Vec<_>>().join(","));
    write_manifest(&args.out, &kv)?;
    println!("wrote {} fields to {}", fields.len(), args.out.display());
    Ok(())
}

fn invert(args: &InvertArgs) -> Result<()> {
    if args.noiseless && args.algorithm != Algorithm::Standard {
        bail!("--noiseless only applies to the standard algorithm");
    }
    if args.algorithm == Algorithm::Alt && args.nu_hat.is_none() {
        bail!("the alt algorithm needs a backscatter estimate (--nu-hat)");
    }
    let inputs = read_inputs(&args.input, args.noiseless)?;
    let mut tv_opts = TvOptions::default();
    apply_tv_flags(&mut tv_opts, &args.tv)?;

    let mut kv = KeyValues::new();
    put(&mut kv, "command", "invert");
    put(&mut kv, "algorithm", args.algorithm.name());
    put(&mut kv, "input", args.input.display());
    put(&mut kv, "seed", args.seed);
    create_dir(&args.out)?;

    let mut unconverged = Vec::new();
    match args.algorithm {
        Algorithm::Standard => {
            let mut opts = StandardOptions {
                averaging: args.avg.unwrap_or_default(),
                derivative: DerivativeScheme::Backward,
                ..StandardOptions::default()
            };
            if let Some(s) = &args.sg.sg_temporal {
                opts.sg_temporal = parse_sg(s)?;
            }
            if let Some(s) = &args.sg.sg_range {
                opts.sg_range = parse_sg(s)?;
            }
            let run = if args.noiseless {
                let (c, m) = inputs.energies()?;
                algorithm1(&c, &m, &inputs.calib, &inputs.rho, &opts)?
            } else {
                let (c, m) = inputs.photons()?;
                algorithm1(&c, &m, &inputs.calib, &inputs.rho, &opts)?
            };
            put(&mut kv, "noiseless", args.noiseless);
            put(&mut kv, "averaging", opts.averaging);
            put(&mut kv, "sg_temporal", sg_text(opts.sg_temporal));
            put(&mut kv, "sg_range", sg_text(opts.sg_range));
            put(&mut kv, "invalid_tau_raw", run.invalid_tau);
            put(&mut kv, "dead_columns", run.dead_columns.len());
            write_products(&args.out, &run.products, args.png, &mut kv)?;
        }
        Algorithm::Tv => {
            let (c, m) = inputs.photons()?;
            let run = algorithm2(&c, &m, &inputs.calib, &inputs.rho, &tv_opts, args.seed)?;
            record_tv_options(&mut kv, &tv_opts);
            put(&mut kv, "mu_upper", run.mu_upper);
            let stages = [("omega_c", &run.omega_c), ("omega_m", &run.omega_m), ("mu", &run.mu)];
            write_selections(&args.out, &stages, args.trace, &mut kv)?;
            unconverged.extend(stages.iter().filter(|(_, s)| !s.converged()).map(|(n, _)| *n));
            write_products(&args.out, &run.products, args.png, &mut kv)?;
        }
        Algorithm::Alt => {
            let path = args.nu_hat.as_deref().expect("checked above");
            let (nu_hat, grid) = read_any(path)?;
            if grid != inputs.grid {
                bail!("{} is on grid {grid:?}, the counts on {:?}", path.display(), inputs.grid);
            }
            let (_, m) = inputs.photons()?;
            let run = algorithm3(&m, &nu_hat, &inputs.rho, &inputs.calib, &tv_opts, args.seed)?;
            record_tv_options(&mut kv, &tv_opts);
            put(&mut kv, "nu_hat", path.display());
            put(&mut kv, "beta_upper", run.beta_upper);
            put(&mut kv, "beta_pinned", run.pinned);
            write_selections(&args.out, &[("beta", &run.beta)], args.trace, &mut kv)?;
            if !run.converged() {
                unconverged.push("beta");
            }
            write_products(&args.out, &run.products, args.png, &mut kv)?;
        }
    }
    put(&mut kv, "converged", unconverged.is_empty());
    write_manifest(&args.out, &kv)?;
    if !unconverged.is_empty() {
        return Err(NotConverged(format!("stages {}", unconverged.join(", "))).into());
    }
    println!("wrote {} products to {}", args.algorithm.name(), args.out.display());
    Ok(())
}

fn algorithm_of(dir: &Path) -> String {
    read_manifest(dir)
        .ok()
        .and_then(|kv| kv.get("algorithm").cloned())
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string())
}

fn score(args: &ScoreArgs) -> Result<()> {
    let truth = read_truth(&args.truth)?;
    let mut groups: Vec<(String, Vec<&Path>)> = Vec::new();
    for dir in &args.estimates {
        let name = algorithm_of(dir);
        match groups.iter_mut().find(|(n, _)| *n == name) {
            Some((_, dirs)) => dirs.push(dir),
            None => groups.push((name, vec![dir])),
        }
    }
    let mut rows = Vec::new();
    for field in SCORED_FIELDS {
        let Some((_, t, tgrid)) = truth.iter().find(|(n, _, _)| *n == field) else {
            continue;
        };
        for (alg, dirs) in &groups {
            let mut acc = ErrorAccumulator::new(t.clone());
            for dir in dirs.iter().filter(|d| matrix_path(d, field).exists()) {
                let (est, grid) = read_field(dir, field)?;
                if grid.shape() != tgrid.shape() {
                    return Err(hsrl::Error::ShapeMismatch {
                        expected: tgrid.shape(),
                        found: grid.shape(),
                    })
                    .with_context(|| format!("{field} in {}", dir.display()));
                }
                acc.push(&est)?;
            }
            if acc.runs() > 0 {
                let report = acc.report().with_context(|| format!("{field} of {alg}"))?;
                rows.push(ReportRow {
                    field: field.to_string(),
                    algorithm: alg.clone(),
                    report,
                });
            }
        }
    }
    let csv = format_report_rows(&rows);
    match &args.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_summary(dir: &Path, s: &ExperimentSummary) -> Result<()> {
    write_text(dir, "summary.csv", &s.summary_csv())?;
    write_text(dir, "invalid.csv", &s.invalid_csv())?;
    write_text(dir, "runs.csv", &s.runs_csv())
}

fn experiment(args: &ExperimentArgs) -> Result<()> {
    create_dir(&args.out)?;
    let mut kv = KeyValues::new();
    put(&mut kv, "command", "experiment");
    if args.which == Which::Filterbias {
        let cfg = FilterBiasConfig::default();
        let profile = filter_bias(&cfg)?;
        write_text(&args.out, "profile.csv", &profile.to_csv())?;
        put(&mut kv, "which", "filterbias");
        put(&mut kv, "n_range", cfg.n_range);
        put(&mut kv, "dr", cfg.dr);
        put(&mut kv, "cloud_base", cfg.cloud_base);
        put(&mut kv, "clear_nu", cfg.clear_nu);
        put(&mut kv, "clear_mu", cfg.clear_mu);
        put(&mut kv, "cloud_nu", cfg.cloud_nu);
        put(&mut kv, "cloud_mu", cfg.cloud_mu);
        put(&mut kv, "window", cfg.window);
        write_manifest(&args.out, &kv)?;
        let i = profile.cloud_base - 1;
        println!(
            "bin {i} below the cloud base: smoothed extinction {:.3e} (true {:.3e}), implied lidar ratio {:.1} (true {:.1})",
            profile.beta_smoothed[i], profile.beta_true[i], profile.mu_implied[i], profile.mu_true[i]
        );
        return Ok(());
    }

    let mut cfg = match args.which {
        Which::One => ExperimentConfig::one(),
        _ => ExperimentConfig::two(),
    };
    cfg.runs = args.runs;
    cfg.seed = args.seed;
    if let Some(p) = &args.config {
        let overrides = read_key_values(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.recipe = cfg.recipe.with_key_values(&overrides)?;
    }
    apply_tv_flags(&mut cfg.tv, &args.tv)?;
    if let Some(f) = args.snr_factor {
        cfg.snr_factor = f;
    }
    if let Some(s) = &args.sg.sg_temporal {
        cfg.sg_temporal = parse_sg(s)?;
    }
    if let Some(s) = &args.sg.sg_range {
        cfg.sg_range = parse_sg(s)?;
    }
    match args.avg {
        None => {}
        Some(Averaging::Block { rows, cols }) => cfg.block = (rows, cols),
        Some(other) => bail!("experiment one compares against block averaging, not '{other}'"),
    }

    let summary = match args.which {
        Which::One => experiment_one(&cfg)?,
        _ => experiment_two(&cfg)?,
    };
    write_summary(&args.out, &summary)?;
    put(&mut kv, "which", if args.which == Which::One { "one" } else { "two" });
    put(&mut kv, "runs", cfg.runs);
    put(&mut kv, "seed", cfg.seed);
    for (k, v) in cfg.recipe.to_key_values() {
        put(&mut kv, &format!("recipe_{k}"), v);
    }
    put(&mut kv, "block", format!("{},{}", cfg.block.0, cfg.block.1));
    put(&mut kv, "snr_factor", cfg.snr_factor);
    put(&mut kv, "sg_temporal", sg_text(cfg.sg_temporal));
    put(&mut kv, "sg_range", sg_text(cfg.sg_range));
    record_tv_options(&mut kv, &cfg.tv);
    put(&mut kv, "all_converged", summary.all_converged());
    write_manifest(&args.out, &kv)?;
    if !summary.all_converged() {
        eprintln!("warning: some cross-validation solves stopped at the iteration cap; see runs.csv");
    }
    print!("{}", summary.summary_csv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Invert(a) => invert(a),
        Command::Score(a) => score(a),
        Command::Experiment(a) => experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

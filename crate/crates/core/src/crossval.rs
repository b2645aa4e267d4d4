//! Choosing the TV weight by Poisson-thinning cross-validation.
//!
//! The counts are split once into independent train and test halves. The
//! penalized problem is solved on the train half for every candidate
//! weight, and the weight whose estimate has the smallest Poisson loss on
//! the test half wins. Ties go to the smaller weight.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::simulate::{derive_seed, poisson_thin};
use crate::tv::{spiral_minimize, BoxConstraint, Objective, SolveResult, SolverOptions};
use crate::types::PhotonImage;

/// Default train fraction of a thinning split.
pub const DEFAULT_THIN_P: f64 = 0.5;

/// Candidate TV weights, strictly increasing and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("lambda grid", "is empty"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("lambda grid", "values must be finite and non-negative"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("lambda grid", "values must be strictly increasing"));
        }
        Ok(LambdaGrid { values })
    }

    /// `10^lo, 10^(lo + step), ..., 10^hi`.
    pub fn log_spaced(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0 && hi >= lo) {
            return Err(Error::invalid("lambda grid", format!("bad exponent range {lo}..{hi} step {step}")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        LambdaGrid::new((0..=n).map(|i| 10f64.powf(lo + i as f64 * step)).collect())
    }

    /// `{10^-2, 10^-1.8, ..., 10^0.8, 10}`.
    pub fn standard() -> Self {
        LambdaGrid::log_spaced(-2.0, 1.0, 0.2).expect("valid exponents")
    }

    /// Parses a comma-separated list.
    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid("lambda grid", format!("'{t}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        LambdaGrid::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One line of the cross-validation table.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    /// Penalized train objective at the estimate (NaN if the solve failed).
    pub train_objective: f64,
    /// Poisson loss of the estimate on the test half.
    pub test_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// Outcome of a cross-validated solve.
#[derive(Debug, Clone)]
pub struct Selection {
    pub lambda_star: f64,
    /// Train-half estimate at the selected weight.
    pub estimate: Array2<f64>,
    /// Solver result at the selected weight (holds the trace).
    pub solve: SolveResult,
    pub table: Vec<LambdaRow>,
}

impl Selection {
    pub fn converged(&self) -> bool {
        self.solve.converged
    }
}

/// Solves on `train` for every weight and keeps the one with the smallest
/// `test` loss.
pub fn select_lambda<O: Objective>(
    train: &O,
    test: &O,
    grid: &LambdaGrid,
    constraint: &BoxConstraint,
    x0: &Array2<f64>,
    opts: &SolverOptions,
) -> Result<Selection> {
    let solves: Vec<Result<SolveResult>> = grid
        .values()
        .par_iter()
        .map(|&lambda| spiral_minimize(train, constraint, lambda, x0, opts))
        .collect();

    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, (&lambda, solve)) in grid.values().iter().zip(&solves).enumerate() {
        let row = match solve {
            Ok(s) => {
                let test_loss = test.loss(&s.estimate);
                if test_loss.is_finite() && best.is_none_or(|(_, b)| test_loss < b) {
                    best = Some((i, test_loss));
                }
                LambdaRow {
                    lambda,
                    train_objective: s.objective,
                    test_loss,
                    iterations: s.iterations,
                    converged: s.converged,
                    error: None,
                }
            }
            Err(e) => LambdaRow {
                lambda,
                train_objective: f64::NAN,
                test_loss: f64::NAN,
                iterations: 0,
                converged: false,
                error: Some(e.to_string()),
            },
        };
        table.push(row);
    }
    let Some((i, _)) = best else {
        let reasons: Vec<String> = table
            .iter()
            .map(|r| format!("lambda {}: {}", r.lambda, r.error.as_deref().unwrap_or("non-finite test loss")))
            .collect();
        return Err(Error::Solver(format!("every cross-validation solve failed ({})", reasons.join("; "))));
    };
    let solve = solves.into_iter().nth(i).expect("index in range").expect("selected solve succeeded");
    Ok(Selection {
        lambda_star: grid.values()[i],
        estimate: solve.estimate.clone(),
        solve,
        table,
    })
}

/// Thins every channel with probability `p`, builds train and test
/// objectives through `make(channels, scale)` and runs [`select_lambda`].
/// Channel `i` is thinned with a sub-seed derived from `seed` and `i`.
pub fn cross_validate<O, F, X>(
    counts: &[&PhotonImage],
    p: f64,
    seed: u64,
    make: F,
    x0: X,
    grid: &LambdaGrid,
    constraint: &BoxConstraint,
    opts: &SolverOptions,
) -> Result<Selection>
where
    O: Objective,
    F: Fn(&[PhotonImage], f64) -> Result<O>,
    X: Fn(&O) -> Array2<f64>,
{
    let mut train = Vec::with_capacity(counts.len());
    let mut test = Vec::with_capacity(counts.len());
    for (i, c) in counts.iter().enumerate() {
        let (a, b) = poisson_thin(c, p, derive_seed(seed, i as u64))?;
        train.push(a);
        test.push(b);
    }
    let train_obj = make(&train, p)?;
    let test_obj = make(&test, 1.0 - p)?;
    let start = constraint.projected(&x0(&train_obj));
    select_lambda(&train_obj, &test_obj, grid, constraint, &start, opts)
}

/// CSV rendering of a cross-validation table.
pub fn format_lambda_table(rows: &[LambdaRow]) -> String {
    let mut out = String::from("lambda,train_objective,test_loss,iterations,converged\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:e},{:.12e},{:.12e},{},{}",
            r.lambda, r.train_objective, r.test_loss, r.iterations, r.converged
        );
    }
    out
}

/// CSV rendering of a solver trace.
pub fn format_trace(solve: &SolveResult) -> String {
    let mut out = String::from("iteration,objective,step,accepted\n");
    for t in &solve.trace {
        let _ = writeln!(out, "{},{:.12e},{:e},{}", t.iteration, t.objective, t.step, t.accepted);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::simulate::sample_poisson;
    use crate::tv::OmegaObjective;
    use crate::types::{Channel, EnergyImage};

    #[test]
    fn grid_construction() {
        let g = LambdaGrid::standard();
        assert_eq!(g.len(), 16);
        assert!((g.values()[0] - 0.01).abs() < 1e-15);
        assert!((g.values()[15] - 10.0).abs() < 1e-12);
        assert!((g.values()[1] - 10f64.powf(-1.8)).abs() < 1e-15);
        assert!(LambdaGrid::new(vec![]).is_err());
        assert!(LambdaGrid::new(vec![1.0, 1.0]).is_err());
        assert!(LambdaGrid::new(vec![-1.0]).is_err());
        assert_eq!(LambdaGrid::parse("0, 0.5,2").unwrap().values(), &[0.0, 0.5, 2.0]);
        assert!(LambdaGrid::parse("1,x").is_err());
    }

    fn blocky(seed: u64) -> (PhotonImage, Array2<f64>) {
        let g = Grid::new(12, 12, 1.0, 1.0).unwrap();
        let truth = Array2::from_shape_fn(g.shape(), |(i, j)| if (3..9).contains(&i) && j < 7 { 30.0 } else { 8.0 });
        let b = Array2::from_elem(g.shape(), 2.0);
        let y = sample_poisson(&EnergyImage::new(g, &truth + &b).unwrap(), Channel::Combined, seed);
        (y, b)
    }

    fn run(grid: &LambdaGrid, seed: u64) -> Selection {
        let (y, b) = blocky(seed);
        let g = y.grid;
        cross_validate(
            &[&y],
            DEFAULT_THIN_P,
            seed,
            |ch: &[PhotonImage], s| OmegaObjective::new(&ch[0], &b, s),
            |o: &OmegaObjective| o.initial_point(),
            grid,
            &BoxConstraint::nonnegative(g),
            &SolverOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn singleton_grid() {
        let s = run(&LambdaGrid::new(vec![0.7]).unwrap(), 1);
        assert_eq!(s.lambda_star, 0.7);
        assert_eq!(s.table.len(), 1);
        assert_eq!(s.estimate, s.solve.estimate);
    }

    #[test]
    fn selection_attains_table_minimum() {
        let grid = LambdaGrid::new(vec![0.0, 0.1, 1.0, 3.0, 1e4]).unwrap();
        let s = run(&grid, 2);
        let min = s.table.iter().map(|r| r.test_loss).fold(f64::INFINITY, f64::min);
        let chosen = s.table.iter().find(|r| r.lambda == s.lambda_star).unwrap();
        assert_eq!(chosen.test_loss, min);
        assert!(chosen.test_loss <= s.table[0].test_loss && chosen.test_loss <= s.table[4].test_loss);
        // neither extreme should win on a piecewise-constant truth
        assert!(s.lambda_star > 0.0 && s.lambda_star < 1e4);
    }

    #[test]
    fn deterministic_under_seed() {
        let grid = LambdaGrid::new(vec![0.1, 1.0, 5.0]).unwrap();
        let a = run(&grid, 3);
        let b = run(&grid, 3);
        assert_eq!(a.lambda_star, b.lambda_star);
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn ties_go_to_smaller_lambda() {
        // with a zero gradient every weight returns the start
        let g = Grid::new(3, 3, 1.0, 1.0).unwrap();
        let y = PhotonImage::new(g, Array2::from_elem(g.shape(), 5.0), Channel::Combined).unwrap();
        let b = Array2::from_elem(g.shape(), 1.0);
        let train = OmegaObjective::new(&y, &b, 1.0).unwrap();
        let test = train.clone();
        let grid = LambdaGrid::new(vec![0.5, 1.0, 2.0]).unwrap();
        let x0 = Array2::from_elem(g.shape(), 4.0);
        let s = select_lambda(&train, &test, &grid, &BoxConstraint::nonnegative(g), &x0, &SolverOptions::default()).unwrap();
        assert_eq!(s.lambda_star, 0.5);
    }

    #[test]
    fn table_csv_has_one_row_per_lambda() {
        let s = run(&LambdaGrid::new(vec![0.1, 1.0]).unwrap(), 4);
        let csv = format_lambda_table(&s.table);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("lambda,train_objective,test_loss,iterations,converged"));
        assert!(format_trace(&s.solve).lines().count() > 1);
    }
}

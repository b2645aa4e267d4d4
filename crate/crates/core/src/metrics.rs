//! Monte-Carlo error summaries: mean squared error and its split into
//! squared bias and variance, all on whole-image Frobenius norms.
//!
//! Pixels where either the truth or an estimate is NaN are skipped for that
//! run only. Per pixel, the empirical mean is taken over the runs in which
//! the pixel was valid, and the variance uses the `1/n` divisor, so
//! `mse = bias_sq + variance` holds exactly up to rounding.

use std::fmt::Write as _;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub rmse_db: f64,
    pub bias_db: f64,
    pub std_db: f64,
    pub mse: f64,
    pub bias_sq: f64,
    pub variance: f64,
    pub n_runs: usize,
    /// Share of (run, pixel) pairs left out as invalid.
    pub invalid_fraction: f64,
}

/// `20 log10(sqrt(x))`; `-inf` for zero.
pub fn db_of_squared(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Streaming accumulator of estimates against a fixed truth.
#[derive(Debug, Clone)]
pub struct ErrorAccumulator {
    truth: Array2<f64>,
    count: Array2<f64>,
    mean: Array2<f64>,
    m2: Array2<f64>,
    sum_sq: f64,
    runs: usize,
    invalid: usize,
}

impl ErrorAccumulator {
    pub fn new(truth: Array2<f64>) -> Self {
        let shape = truth.dim();
        ErrorAccumulator {
            truth,
            count: Array2::zeros(shape),
            mean: Array2::zeros(shape),
            m2: Array2::zeros(shape),
            sum_sq: 0.0,
            runs: 0,
            invalid: 0,
        }
    }

    pub fn push(&mut self, estimate: &Array2<f64>) -> Result<()> {
        if estimate.dim() != self.truth.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.truth.dim(),
                found: estimate.dim(),
            });
        }
        let mut sum_sq = 0.0;
        let mut invalid = 0;
        Zip::from(&mut self.count)
            .and(&mut self.mean)
            .and(&mut self.m2)
            .and(&self.truth)
            .and(estimate)
            .for_each(|c, m, m2, &t, &e| {
                let d = e - t;
                if !d.is_finite() {
                    invalid += 1;
                    return;
                }
                sum_sq += d * d;
                *c += 1.0;
                let delta = d - *m;
                *m += delta / *c;
                *m2 += delta * (d - *m);
            });
        self.sum_sq += sum_sq;
        self.invalid += invalid;
        self.runs += 1;
        Ok(())
    }

    pub fn runs(&self) -> usize {
        self.runs
    }

    pub fn report(&self) -> Result<ErrorReport> {
        if self.runs == 0 {
            return Err(Error::invalid("error report", "no estimates were supplied"));
        }
        let total = self.runs * self.truth.len();
        if self.invalid == total {
            return Err(Error::AllInvalid);
        }
        let n = self.runs as f64;
        let bias_sum = Zip::from(&self.count)
            .and(&self.mean)
            .fold(0.0, |acc, &c, &m| acc + c * m * m);
        let bias_sq = bias_sum / n;
        let variance = self.m2.sum() / n;
        let mse = self.sum_sq / n;
        Ok(ErrorReport {
            rmse_db: db_of_squared(mse),
            bias_db: db_of_squared(bias_sq),
            std_db: db_of_squared(variance),
            mse,
            bias_sq,
            variance,
            n_runs: self.runs,
            invalid_fraction: self.invalid as f64 / total as f64,
        })
    }
}

/// Error report of a set of estimates of one field.
pub fn monte_carlo_errors(truth: &Array2<f64>, estimates: &[Array2<f64>]) -> Result<ErrorReport> {
    let mut acc = ErrorAccumulator::new(truth.clone());
    for e in estimates {
        acc.push(e)?;
    }
    acc.report()
}

/// One summary line: the field, the algorithm and its report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub field: String,
    pub algorithm: String,
    pub report: ErrorReport,
}

pub const REPORT_HEADER: &str = "field,algorithm,rmse_db,bias_db,std_db,invalid_fraction,n_runs";

fn fmt_db(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        format!("{x}")
    }
}

/// CSV with a header line and one line per row.
pub fn format_report_rows(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let e = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{}",
            r.field,
            r.algorithm,
            fmt_db(e.rmse_db),
            fmt_db(e.bias_db),
            fmt_db(e.std_db),
            e.invalid_fraction,
            e.n_runs
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn perfect_estimates() {
        let t = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let r = monte_carlo_errors(&t, &[t.clone(), t.clone()]).unwrap();
        assert_eq!((r.mse, r.bias_sq, r.variance), (0.0, 0.0, 0.0));
        assert_eq!(r.rmse_db, f64::NEG_INFINITY);
        assert_eq!(r.n_runs, 2);
    }

    #[test]
    fn single_run_has_no_variance() {
        let t = Array2::<f64>::zeros((2, 2));
        let e = ndarray::array![[1.0, -2.0], [0.5, 3.0]];
        let r = monte_carlo_errors(&t, &[e]).unwrap();
        assert_eq!(r.variance, 0.0);
        assert_eq!(r.std_db, f64::NEG_INFINITY);
        assert!(close(r.mse, r.bias_sq));
        assert!(close(r.mse, 1.0 + 4.0 + 0.25 + 9.0));
        assert!(close(r.rmse_db, 20.0 * (14.25f64).sqrt().log10()));
    }

    #[test]
    fn gaussian_noise_mse_concentrates() {
        let t = Array2::from_elem((4, 4), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let runs: Vec<_> = (0..100)
            .map(|_| t.mapv(|v| v + normal(&mut rng)))
            .collect();
        let r = monte_carlo_errors(&t, &runs).unwrap();
        assert!((12.0..=20.0).contains(&r.mse), "{}", r.mse);
        assert!(close(r.mse, r.bias_sq + r.variance));
    }

    #[test]
    fn decomposition_against_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = Array2::from_shape_fn((5, 3), |_| normal(&mut rng));
        let runs: Vec<Array2<f64>> = (0..7)
            .map(|_| t.mapv(|v: f64| 0.3 + v + 2.0 * normal(&mut rng)))
            .collect();
        let r = monte_carlo_errors(&t, &runs).unwrap();
        let n = runs.len() as f64;
        let mean: Array2<f64> = runs.iter().fold(Array2::<f64>::zeros(t.dim()), |a, e| a + e) / n;
        let bias_sq: f64 = (&t - &mean).mapv(|v| v * v).sum();
        let variance: f64 = runs.iter().map(|e| (e - &mean).mapv(|v| v * v).sum()).sum::<f64>() / n;
        let mse: f64 = runs.iter().map(|e| (e - &t).mapv(|v| v * v).sum()).sum::<f64>() / n;
        assert!(close(r.bias_sq, bias_sq) && close(r.variance, variance) && close(r.mse, mse));
        assert!(close(r.mse, r.bias_sq + r.variance));
    }

    #[test]
    fn invalid_pixels_are_excluded_pairwise() {
        let t = ndarray::array![[1.0, 2.0]];
        let a = ndarray::array![[f64::NAN, 3.0]];
        let b = ndarray::array![[2.0, 1.0]];
        let r = monte_carlo_errors(&t, &[a, b]).unwrap();
        assert!(close(r.invalid_fraction, 0.25));
        // pixel 0: one valid run with error 1; pixel 1: errors +1 and -1
        assert!(close(r.mse, (1.0 + 1.0 + 1.0) / 2.0));
        assert!(close(r.bias_sq, 0.5));
        assert!(close(r.variance, 1.0));
        let all_nan = Array2::from_elem((1, 2), f64::NAN);
        assert!(matches!(monte_carlo_errors(&t, &[all_nan]), Err(Error::AllInvalid)));
        assert!(monte_carlo_errors(&t, &[Array2::zeros((2, 1))]).is_err());
    }

    #[test]
    fn csv_rows() {
        let t = Array2::<f64>::zeros((1, 1));
        let rep = monte_carlo_errors(&t, &[t.clone()]).unwrap();
        let csv = format_report_rows(&[ReportRow {
            field: "tau".into(),
            algorithm: "tv".into(),
            report: rep,
        }]);
        assert_eq!(csv, format!("{REPORT_HEADER}\ntau,tv,-inf,-inf,-inf,0.000000,1\n"));
    }
}

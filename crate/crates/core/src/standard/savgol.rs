//! Savitzky-Golay smoothing with truncated windows and gap skipping.
//!
//! Each output sample is the value at the sample position of a least-squares
//! polynomial fitted to the valid (non-NaN) samples inside a window centred
//! on it. Windows that overhang the signal ends are truncated and refitted
//! rather than padded, so no data is invented at the boundaries.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Window length and polynomial order of one Savitzky-Golay pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SgWindow {
    pub window: usize,
    pub order: usize,
}

impl SgWindow {
    pub fn new(window: usize, order: usize) -> Result<Self> {
        let w = SgWindow { window, order };
        w.validate()?;
        Ok(w)
    }

    /// A window of one sample, which leaves every valid sample untouched.
    pub fn identity() -> Self {
        SgWindow { window: 1, order: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::invalid("SG window", format!("{} is not odd", self.window)));
        }
        if self.window < self.order + 1 {
            return Err(Error::invalid(
                "SG window",
                format!("window {} cannot fit a degree-{} polynomial", self.window, self.order),
            ));
        }
        Ok(())
    }

    /// Odd window covering roughly `fraction` of an axis of `len` samples,
    /// at least 3 and never longer than the axis (kept odd).
    pub fn scaled(fraction: f64, len: usize, order: usize) -> Result<Self> {
        let mut w = ((fraction * len as f64).round() as usize).max(3);
        if w % 2 == 0 {
            w += 1;
        }
        let cap = if len % 2 == 1 { len } else { len.saturating_sub(1) }.max(1);
        w = w.min(cap).max(order + 1 + (order % 2 == 1) as usize);
        if w % 2 == 0 {
            w += 1;
        }
        SgWindow::new(w, order)
    }
}

/// Solves the small dense system `a x = b` by Gaussian elimination with
/// partial pivoting. `a` is row-major `m x m`.
fn solve_dense(a: &mut [f64], b: &mut [f64], m: usize) -> Option<()> {
    for col in 0..m {
        let pivot = (col..m).max_by(|&i, &j| a[i * m + col].abs().total_cmp(&a[j * m + col].abs()))?;
        if a[pivot * m + col] == 0.0 {
            return None;
        }
        if pivot != col {
            for c in 0..m {
                a.swap(col * m + c, pivot * m + c);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..m {
            let f = a[row * m + col] / a[col * m + col];
            for c in col..m {
                a[row * m + c] -= f * a[col * m + c];
            }
            b[row] -= f * b[col];
        }
    }
    for row in (0..m).rev() {
        let mut s = b[row];
        for c in row + 1..m {
            s -= a[row * m + c] * b[c];
        }
        b[row] = s / a[row * m + row];
    }
    Some(())
}

/// Smooths a 1-D signal. NaN samples are skipped; an output sample is NaN
/// when its window holds fewer than `order + 1` valid samples.
pub fn savitzky_golay(signal: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    SgWindow::new(window, order)?;
    let half = (window / 2) as isize;
    let len = signal.len() as isize;
    let m = order + 1;
    let mut out = Vec::with_capacity(signal.len());
    let mut a = vec![0.0; m * m];
    let mut b = vec![0.0; m];
    let mut pow = vec![0.0; 2 * m - 1];
    for i in 0..len {
        a.iter_mut().for_each(|v| *v = 0.0);
        b.iter_mut().for_each(|v| *v = 0.0);
        let mut count = 0;
        for j in (i - half).max(0)..=(i + half).min(len - 1) {
            let y = signal[j as usize];
            if y.is_nan() {
                continue;
            }
            count += 1;
            // offsets scaled by the half width keep the normal equations
            // well conditioned for long windows
            let x = (j - i) as f64 / half.max(1) as f64;
            pow[0] = 1.0;
            for p in 1..pow.len() {
                pow[p] = pow[p - 1] * x;
            }
            for r in 0..m {
                b[r] += pow[r] * y;
                for c in 0..m {
                    a[r * m + c] += pow[r + c];
                }
            }
        }
        if count < m {
            out.push(f64::NAN);
            continue;
        }
        match solve_dense(&mut a, &mut b, m) {
            Some(()) => out.push(b[0]),
            None => out.push(f64::NAN),
        }
    }
    Ok(out)
}

/// Applies [`savitzky_golay`] along every lane of `axis` (0 smooths each
/// column along range, 1 smooths each row along time).
pub fn savitzky_golay_axis(image: &Array2<f64>, axis: usize, sg: SgWindow) -> Result<Array2<f64>> {
    sg.validate()?;
    if sg.window == 1 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let sig: Vec<f64> = lane.iter().copied().collect();
        let smooth = savitzky_golay(&sig, sg.window, sg.order)?;
        lane.iter_mut().zip(smooth).for_each(|(d, s)| *d = s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Least-squares oracle built on nalgebra's SVD solver, with the
    /// polynomial expressed in unscaled sample offsets.
    fn lsq_oracle(signal: &[f64], window: usize, order: usize) -> Vec<f64> {
        let half = (window / 2) as isize;
        let n = signal.len() as isize;
        (0..n)
            .map(|i| {
                let idx: Vec<isize> = ((i - half).max(0)..=(i + half).min(n - 1))
                    .filter(|&j| !signal[j as usize].is_nan())
                    .collect();
                if idx.len() < order + 1 {
                    return f64::NAN;
                }
                let a = DMatrix::from_fn(idx.len(), order + 1, |r, c| ((idx[r] - i) as f64).powi(c as i32));
                let y = DVector::from_iterator(idx.len(), idx.iter().map(|&j| signal[j as usize]));
                a.svd(true, true).solve(&y, 1e-14).unwrap()[0]
            })
            .collect()
    }

    #[test]
    fn rejects_bad_windows() {
        assert!(savitzky_golay(&[1.0, 2.0], 4, 1).is_err());
        assert!(savitzky_golay(&[1.0, 2.0], 1, 1).is_err());
        assert!(SgWindow::new(3, 2).is_ok());
    }

    #[test]
    fn reproduces_polynomials() {
        let sig: Vec<f64> = (0..40).map(|i| {
            let x = i as f64;
            2.0 - 0.3 * x + 0.01 * x * x
        }).collect();
        let out = savitzky_golay(&sig, 9, 2).unwrap();
        for (a, b) in out.iter().zip(&sig) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
        let lin: Vec<f64> = (0..20).map(|i| 1.5 * i as f64 - 4.0).collect();
        let out = savitzky_golay(&lin, 7, 1).unwrap();
        for (a, b) in out.iter().zip(&lin) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_signal_unchanged() {
        let c = vec![3.25; 15];
        assert!(savitzky_golay(&c, 5, 0).unwrap().iter().all(|v| (v - 3.25).abs() < 1e-14));
        assert!(savitzky_golay(&c, 15, 3).unwrap().iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn matches_least_squares_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (window, order) in [(5, 1), (7, 2), (9, 3), (3, 0)] {
            let sig: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = savitzky_golay(&sig, window, order).unwrap();
            let want = lsq_oracle(&sig, window, order);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-11, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn skips_invalid_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sig: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        for i in [0, 4, 5, 11, 24] {
            sig[i] = f64::NAN;
        }
        let got = savitzky_golay(&sig, 5, 1).unwrap();
        let want = lsq_oracle(&sig, 5, 1);
        for (g, w) in got.iter().zip(&want) {
            assert!((g.is_nan() && w.is_nan()) || (g - w).abs() < 1e-11);
        }
        // a window with a single valid sample cannot support a line
        let sparse = [f64::NAN, f64::NAN, 1.0, f64::NAN, f64::NAN, f64::NAN, f64::NAN];
        let out = savitzky_golay(&sparse, 3, 1).unwrap();
        assert!(out.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn scaled_windows_are_odd_and_bounded() {
        for len in [1usize, 2, 5, 32, 64, 2000] {
            for frac in [0.0, 0.05, 0.3, 1.0, 3.0] {
                let w = SgWindow::scaled(frac, len, 1).unwrap();
                assert!(w.window % 2 == 1 && w.window >= 1);
                assert!(w.window <= len.max(3));
            }
        }
        assert_eq!(SgWindow::scaled(0.05, 2000, 1).unwrap().window, 101);
    }

    #[test]
    fn axis_application() {
        let img = Array2::from_shape_fn((6, 4), |(i, j)| i as f64 + 10.0 * j as f64);
        let rows = savitzky_golay_axis(&img, 1, SgWindow::new(3, 1).unwrap()).unwrap();
        let cols = savitzky_golay_axis(&img, 0, SgWindow::new(5, 1).unwrap()).unwrap();
        for (a, b) in rows.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in cols.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

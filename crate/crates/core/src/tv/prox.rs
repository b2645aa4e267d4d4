//! Anisotropic total variation and its proximal operator.
//!
//! The discrete gradient `D` maps an `N x K` image to vertical differences
//! `x[n,k] - x[n+1,k]` (an `(N-1) x K` field) and horizontal differences
//! `x[n,k] - x[n,k+1]` (an `N x (K-1)` field). The proximal problem
//!
//! ```text
//! minimize 0.5 ||x - z||^2 + w TV(x),   TV(x) = ||D x||_1
//! ```
//!
//! is solved through its dual `x = z - w D^T p` with `|p| <= 1`, using the
//! fast gradient projection of Beck and Teboulle with step `1 / (8 w)`.

use ndarray::Array2;

/// Anisotropic TV seminorm: summed absolute vertical and horizontal
/// first differences.
pub fn tv_seminorm(image: &Array2<f64>) -> f64 {
    let (n, k) = image.dim();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..k {
            let v = image[[i, j]];
            if i + 1 < n {
                s += (v - image[[i + 1, j]]).abs();
            }
            if j + 1 < k {
                s += (v - image[[i, j + 1]]).abs();
            }
        }
    }
    s
}

/// Dual field of the TV prox, one entry per image edge, each in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TvDual {
    /// Vertical edges, `(N-1) x K`.
    pub vertical: Array2<f64>,
    /// Horizontal edges, `N x (K-1)`.
    pub horizontal: Array2<f64>,
}

impl TvDual {
    pub fn zeros(shape: (usize, usize)) -> Self {
        let (n, k) = shape;
        TvDual {
            vertical: Array2::zeros((n.saturating_sub(1), k)),
            horizontal: Array2::zeros((n, k.saturating_sub(1))),
        }
    }

    fn fits(&self, shape: (usize, usize)) -> bool {
        let (n, k) = shape;
        self.vertical.dim() == (n.saturating_sub(1), k) && self.horizontal.dim() == (n, k.saturating_sub(1))
    }
}

/// Result of one prox evaluation.
#[derive(Debug, Clone)]
pub struct ProxResult {
    pub x: Array2<f64>,
    /// Dual certificate with `x = z - w D^T dual`.
    pub dual: TvDual,
    /// Duality gap `w (TV(x) - <D x, dual>)`, never negative.
    pub gap: f64,
    pub iterations: usize,
    /// Whether the gap met the tolerance before the iteration cap.
    pub converged: bool,
}

/// `D x` written into the two edge buffers (row-major, contiguous).
fn grad_into(x: &[f64], n: usize, k: usize, dv: &mut [f64], dh: &mut [f64]) {
    for i in 0..n.saturating_sub(1) {
        let (a, b) = (&x[i * k..(i + 1) * k], &x[(i + 1) * k..(i + 2) * k]);
        for ((d, &u), &w) in dv[i * k..(i + 1) * k].iter_mut().zip(a).zip(b) {
            *d = u - w;
        }
    }
    if k > 1 {
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            for (d, w) in dh[i * (k - 1)..(i + 1) * (k - 1)].iter_mut().zip(row.windows(2)) {
                *d = w[0] - w[1];
            }
        }
    }
}

/// `out = z - w D^T p`.
fn primal_into(z: &[f64], w: f64, pv: &[f64], ph: &[f64], n: usize, k: usize, out: &mut [f64]) {
    out.copy_from_slice(z);
    for i in 0..n {
        for j in 0..k {
            let mut div = 0.0;
            if i + 1 < n {
                div += pv[i * k + j];
            }
            if i > 0 {
                div -= pv[(i - 1) * k + j];
            }
            if j + 1 < k {
                div += ph[i * (k - 1) + j];
            }
            if j > 0 {
                div -= ph[i * (k - 1) + j - 1];
            }
            out[i * k + j] -= w * div;
        }
    }
}

fn gap_of(x: &[f64], pv: &[f64], ph: &[f64], n: usize, k: usize, w: f64, dv: &mut [f64], dh: &mut [f64]) -> f64 {
    grad_into(x, n, k, dv, dh);
    let mut g = 0.0;
    for (d, p) in dv.iter().zip(pv).chain(dh.iter().zip(ph)) {
        g += d.abs() - d * p;
    }
    (w * g).max(0.0)
}

/// Evaluates the TV prox of `z` with weight `w`, starting the dual iteration
/// from `warm` when given. Stops once the duality gap is at most
/// `tol * max(||z||^2, 1)` or after `max_iters` iterations.
pub fn tv_prox_warm(
    z: &Array2<f64>,
    w: f64,
    warm: Option<&TvDual>,
    max_iters: usize,
    tol: f64,
) -> ProxResult {
    let (n, k) = z.dim();
    if w <= 0.0 || z.len() <= 1 {
        return ProxResult {
            x: z.clone(),
            dual: TvDual::zeros((n, k)),
            gap: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let z_std = z.as_standard_layout();
    let zs = z_std.as_slice().expect("standard layout");
    let mut dual = match warm {
        Some(d) if d.fits((n, k)) => d.clone(),
        _ => TvDual::zeros((n, k)),
    };
    let threshold = tol * zs.iter().map(|v| v * v).sum::<f64>().max(1.0);

    let nv = dual.vertical.len();
    let nh = dual.horizontal.len();
    let mut pv = dual.vertical.as_slice().expect("owned").to_vec();
    let mut ph = dual.horizontal.as_slice().expect("owned").to_vec();
    let (mut rv, mut rh) = (pv.clone(), ph.clone());
    let (mut dv, mut dh) = (vec![0.0; nv], vec![0.0; nh]);
    let mut x = vec![0.0; n * k];
    let step = 1.0 / (8.0 * w);
    let mut t = 1.0f64;
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    primal_into(zs, w, &pv, &ph, n, k, &mut x);
    if gap_of(&x, &pv, &ph, n, k, w, &mut dv, &mut dh) <= threshold {
        converged = true;
    }

    while !converged && iterations < max_iters {
        iterations += 1;
        primal_into(zs, w, &rv, &rh, n, k, &mut x);
        grad_into(&x, n, k, &mut dv, &mut dh);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        for ((p, r), d) in pv.iter_mut().zip(rv.iter_mut()).zip(&dv) {
            let new = (*r + step * d).clamp(-1.0, 1.0);
            *r = new + mom * (new - *p);
            *p = new;
        }
        for ((p, r), d) in ph.iter_mut().zip(rh.iter_mut()).zip(&dh) {
            let new = (*r + step * d).clamp(-1.0, 1.0);
            *r = new + mom * (new - *p);
            *p = new;
        }
        t = t_next;
        if iterations % 5 == 0 || iterations == max_iters {
            primal_into(zs, w, &pv, &ph, n, k, &mut x);
            gap = gap_of(&x, &pv, &ph, n, k, w, &mut dv, &mut dh);
            if gap <= threshold {
                converged = true;
            }
        }
    }
    primal_into(zs, w, &pv, &ph, n, k, &mut x);
    if gap.is_infinite() || converged {
        gap = gap_of(&x, &pv, &ph, n, k, w, &mut dv, &mut dh);
    }
    dual.vertical = Array2::from_shape_vec(dual.vertical.dim(), pv).expect("shape kept");
    dual.horizontal = Array2::from_shape_vec(dual.horizontal.dim(), ph).expect("shape kept");
    ProxResult {
        x: Array2::from_shape_vec((n, k), x).expect("shape kept"),
        dual,
        gap,
        iterations,
        converged,
    }
}

/// TV prox from a cold start.
pub fn tv_prox(z: &Array2<f64>, w: f64, max_iters: usize, tol: f64) -> ProxResult {
    tv_prox_warm(z, w, None, max_iters, tol)
}

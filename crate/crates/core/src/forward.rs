//! HSRL channel models and their reparameterizations.
//!
//! The combined and molecular channels see
//!
//! ```text
//! S_c = C_g (nu + C_mc) exp(-2 Q beta) + b_c
//! S_m = C_g (C_am nu + C_mm) exp(-2 Q beta) + b_m
//! ```
//!
//! with every product taken pixelwise. The estimators work with three
//! reparameterized versions of these maps:
//!
//! * `f(omega) = omega + b`, the background-free energy of one channel;
//! * `g(mu) = C_bm exp(-2 Q [nu_hat mu]) + b_m`, the molecular channel as a
//!   function of the (depolarization-uncorrected) lidar ratio;
//! * `h(beta) = C_bm exp(-2 Q beta) + b_m`, the molecular channel as a
//!   function of extinction;
//!
//! where `C_bm = C_g (nu_hat C_am + C_mm)` is fixed once `nu_hat` is known.

use ndarray::{Array2, Zip};

use crate::error::Result;
use crate::grid::{cumulative_integral, transmittance, Grid};
use crate::types::{Calibration, EnergyImage, ScatterScene};

fn check_grids(scene: &ScatterScene, calib: &Calibration) -> Result<()> {
    if scene.grid.shape() != calib.grid.shape() {
        return Err(crate::Error::ShapeMismatch {
            expected: calib.grid.shape(),
            found: scene.grid.shape(),
        });
    }
    Ok(())
}

/// Expected counts of the combined channel.
pub fn forward_combined(scene: &ScatterScene, calib: &Calibration) -> Result<EnergyImage> {
    check_grids(scene, calib)?;
    let t = transmittance(&scene.beta, calib.grid.dr);
    let mut s = calib.b_c.clone();
    Zip::from(&mut s)
        .and(&calib.c_g)
        .and(&scene.nu)
        .and(&calib.c_mc)
        .and(&t)
        .for_each(|s, &g, &nu, &mc, &t| *s += g * (nu + mc) * t);
    EnergyImage::new(calib.grid, s)
}

/// Expected counts of the molecular channel.
pub fn forward_molecular(scene: &ScatterScene, calib: &Calibration) -> Result<EnergyImage> {
    check_grids(scene, calib)?;
    let t = transmittance(&scene.beta, calib.grid.dr);
    let c_am = calib.c_am;
    let mut s = calib.b_m.clone();
    Zip::from(&mut s)
        .and(&calib.c_g)
        .and(&scene.nu)
        .and(&calib.c_mm)
        .and(&t)
        .for_each(|s, &g, &nu, &mm, &t| *s += g * (c_am * nu + mm) * t);
    EnergyImage::new(calib.grid, s)
}

/// `f(omega) = omega + b`. Not validated: a zero rate is only an error
/// where the matching count is positive, which the loss detects.
pub fn reparam_f(omega: &Array2<f64>, background: &Array2<f64>) -> Array2<f64> {
    omega + background
}

/// Molecular-channel model with the backscatter held fixed at `nu_hat`.
///
/// Negative backscatter estimates are clamped to zero: the exponential
/// model is only meaningful for non-negative optical depth.
#[derive(Debug, Clone)]
pub struct ExtinctionModel {
    pub grid: Grid,
    /// Backscatter used by the model, clamped to `>= 0`.
    pub nu_hat: Array2<f64>,
    /// `C_bm = C_g (nu_hat C_am + C_mm)`.
    pub c_bm: Array2<f64>,
    pub b_m: Array2<f64>,
}

impl ExtinctionModel {
    pub fn new(nu_hat: &Array2<f64>, calib: &Calibration) -> Result<Self> {
        calib.grid.check(nu_hat)?;
        let nu = nu_hat.mapv(|v| if v > 0.0 { v } else { 0.0 });
        let mut c_bm = calib.c_mm.clone();
        Zip::from(&mut c_bm)
            .and(&calib.c_g)
            .and(&nu)
            .for_each(|c, &g, &nu| *c = g * (nu * calib.c_am + *c));
        Ok(ExtinctionModel {
            grid: calib.grid,
            nu_hat: nu,
            c_bm,
            b_m: calib.b_m.clone(),
        })
    }

    /// Same model with every expected-count term scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        ExtinctionModel {
            grid: self.grid,
            nu_hat: self.nu_hat.clone(),
            c_bm: &self.c_bm * factor,
            b_m: &self.b_m * factor,
        }
    }

    /// `C_bm exp(-2 Q beta) + b_m`, the `h` map.
    pub fn h(&self, beta: &Array2<f64>) -> Array2<f64> {
        let t = transmittance(beta, self.grid.dr);
        let mut out = self.b_m.clone();
        Zip::from(&mut out)
            .and(&self.c_bm)
            .and(&t)
            .for_each(|o, &c, &t| *o += c * t);
        out
    }

    /// Extinction implied by a lidar ratio: `nu_hat * mu`.
    pub fn extinction(&self, mu_tilde: &Array2<f64>) -> Array2<f64> {
        &self.nu_hat * mu_tilde
    }

    /// The `g` map.
    pub fn g(&self, mu_tilde: &Array2<f64>) -> Array2<f64> {
        self.h(&self.extinction(mu_tilde))
    }

    /// Optical depth of the model for a lidar ratio.
    pub fn optical_depth(&self, mu_tilde: &Array2<f64>) -> Array2<f64> {
        cumulative_integral(&self.extinction(mu_tilde), self.grid.dr)
    }
}

/// `g(mu) = C_bm exp(-2 Q [nu_hat mu]) + b_m`.
pub fn reparam_g(mu_tilde: &Array2<f64>, nu_hat: &Array2<f64>, calib: &Calibration) -> Result<Array2<f64>> {
    calib.grid.check(mu_tilde)?;
    Ok(ExtinctionModel::new(nu_hat, calib)?.g(mu_tilde))
}

/// `h(beta) = C_bm exp(-2 Q beta) + b_m`.
pub fn reparam_h(beta: &Array2<f64>, nu_hat: &Array2<f64>, calib: &Calibration) -> Result<Array2<f64>> {
    calib.grid.check(beta)?;
    Ok(ExtinctionModel::new(nu_hat, calib)?.h(beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar-loop evaluation of both channel models, written out pixel by
    /// pixel with its own optical-depth sum.
    fn oracle(scene: &ScatterScene, calib: &Calibration) -> (Array2<f64>, Array2<f64>) {
        let (n, k) = scene.grid.shape();
        let mut sc = Array2::zeros((n, k));
        let mut sm = Array2::zeros((n, k));
        for j in 0..k {
            for i in 0..n {
                let mut tau = 0.0;
                for l in 0..=i {
                    tau += scene.beta[[l, j]] * calib.grid.dr;
                }
                let t = (-2.0 * tau).exp();
                let g = calib.c_g[[i, j]];
                let nu = scene.nu[[i, j]];
                sc[[i, j]] = g * (nu + calib.c_mc[[i, j]]) * t + calib.b_c[[i, j]];
                sm[[i, j]] = g * (calib.c_am * nu + calib.c_mm[[i, j]]) * t + calib.b_m[[i, j]];
            }
        }
        (sc, sm)
    }

    fn random_case(seed: u64) -> (ScatterScene, Calibration) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(9, 4, 7.5, 2.5).unwrap();
        let f = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            Array2::from_shape_fn(grid.shape(), |_| rng.random_range(lo..hi))
        };
        let nu = f(&mut rng, 1e-7, 5e-5);
        let mu = f(&mut rng, 1.0, 60.0);
        let beta = &nu * &mu;
        let scene = ScatterScene::new(grid, nu, beta, Array2::zeros(grid.shape())).unwrap();
        let calib = Calibration::new(
            grid,
            f(&mut rng, 1e7, 1e8),
            f(&mut rng, 5e-7, 2e-6),
            rng.random_range(0.0..1e-3),
            f(&mut rng, 5e-7, 2e-6),
            f(&mut rng, 0.0, 100.0),
            f(&mut rng, 0.0, 30.0),
        )
        .unwrap();
        (scene, calib)
    }

    fn rel_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * y.abs().max(1e-300), "{x} vs {y}");
        }
    }

    fn constant_case(nu: f64, beta: f64) -> (ScatterScene, Grid) {
        let grid = Grid::new(5, 3, 1.0, 1.0).unwrap();
        let c = |v| Array2::from_elem(grid.shape(), v);
        (ScatterScene::new(grid, c(nu), c(beta), c(0.0)).unwrap(), grid)
    }

    #[test]
    fn zero_scatter_identity() {
        let (scene, grid) = constant_case(0.0, 0.0);
        let calib = Calibration::uniform(grid, 1.0, 3.0, 0.0, 4.0, 2.0, 1.0).unwrap();
        assert!(forward_combined(&scene, &calib).unwrap().values.iter().all(|&v| v == 5.0));
        assert!(forward_molecular(&scene, &calib).unwrap().values.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn constant_extinction_decays_geometrically() {
        let b0 = 0.01;
        let (scene, grid) = constant_case(0.0, b0);
        let (clear, _) = constant_case(0.0, 0.0);
        let calib = Calibration::uniform(grid, 2.0, 1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let s = forward_combined(&scene, &calib).unwrap().values;
        let s0 = forward_combined(&clear, &calib).unwrap().values;
        for ((n, k), v) in s.indexed_iter() {
            let expect = s0[[n, k]] * (-2.0 * grid.dr * (n + 1) as f64 * b0).exp();
            assert!((v - expect).abs() < 1e-14 * expect);
        }
    }

    #[test]
    fn channels_match_scalar_oracle() {
        for seed in 0..5 {
            let (scene, calib) = random_case(seed);
            let (sc, sm) = oracle(&scene, &calib);
            rel_close(&forward_combined(&scene, &calib).unwrap().values, &sc, 1e-14);
            rel_close(&forward_molecular(&scene, &calib).unwrap().values, &sm, 1e-14);
        }
    }

    #[test]
    fn no_leakage_means_molecular_ignores_backscatter() {
        let (scene, calib) = random_case(7);
        let mut calib = calib;
        calib.c_am = 0.0;
        let mut other = scene.clone();
        other.nu = &scene.nu * 3.0;
        other.beta = &scene.beta * 3.0;
        other.nu.fill(0.0);
        let a = forward_molecular(&ScatterScene { nu: scene.nu.clone(), ..other.clone() }, &calib).unwrap();
        let b = forward_molecular(&other, &calib).unwrap();
        rel_close(&a.values, &b.values, 0.0);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let (scene, _) = random_case(1);
        let other = Grid::new(3, 3, 1.0, 1.0).unwrap();
        let calib = Calibration::uniform(other, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        assert!(forward_combined(&scene, &calib).is_err());
    }

    #[test]
    fn underflowing_transmittance_is_rejected() {
        let (scene, grid) = constant_case(0.0, 200.0);
        let calib = Calibration::uniform(grid, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        assert!(forward_combined(&scene, &calib).is_err());
    }

    #[test]
    fn reparam_f_round_trip() {
        let (scene, calib) = random_case(3);
        let s = forward_combined(&scene, &calib).unwrap().values;
        let omega = &s - &calib.b_c;
        rel_close(&reparam_f(&omega, &calib.b_c), &s, 1e-15);
        let two = reparam_f(&Array2::zeros((2, 2)), &Array2::from_elem((2, 2), 2.0));
        assert!(two.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn g_matches_molecular_channel() {
        let (scene, calib) = random_case(4);
        let mu = scene.lidar_ratio();
        let g = reparam_g(&mu, &scene.nu, &calib).unwrap();
        rel_close(&g, &forward_molecular(&scene, &calib).unwrap().values, 1e-13);
        let h = reparam_h(&scene.beta, &scene.nu, &calib).unwrap();
        rel_close(&h, &g, 1e-13);
    }

    #[test]
    fn g_and_h_scalar_oracle() {
        let (scene, calib) = random_case(5);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mu = Array2::from_shape_fn(scene.grid.shape(), |_| rng.random_range(1.0..80.0));
        let g = reparam_g(&mu, &scene.nu, &calib).unwrap();
        let (n, k) = scene.grid.shape();
        for j in 0..k {
            let mut tau = 0.0;
            for i in 0..n {
                tau += calib.grid.dr * scene.nu[[i, j]] * mu[[i, j]];
                let cbm = calib.c_g[[i, j]] * (scene.nu[[i, j]] * calib.c_am + calib.c_mm[[i, j]]);
                let expect = cbm * (-2.0 * tau).exp() + calib.b_m[[i, j]];
                assert!((g[[i, j]] - expect).abs() <= 1e-14 * expect);
            }
        }
    }

    #[test]
    fn zero_backscatter_makes_g_constant() {
        let (scene, calib) = random_case(6);
        let zero = Array2::zeros(scene.grid.shape());
        let a = reparam_g(&Array2::ones(scene.grid.shape()), &zero, &calib).unwrap();
        let b = reparam_g(&Array2::from_elem(scene.grid.shape(), 50.0), &zero, &calib).unwrap();
        let expect = &calib.c_g * &calib.c_mm + &calib.b_m;
        rel_close(&a, &expect, 1e-15);
        rel_close(&b, &expect, 1e-15);
        let h0 = reparam_h(&zero, &scene.nu, &calib).unwrap();
        let model = ExtinctionModel::new(&scene.nu, &calib).unwrap();
        rel_close(&h0, &(&model.c_bm + &calib.b_m), 1e-15);
    }

    #[test]
    fn more_extinction_never_brightens_farther_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (scene, calib) = random_case(rng.random());
            let (n, k) = scene.grid.shape();
            let (pi, pk) = (rng.random_range(0..n), rng.random_range(0..k));
            let mut bumped = scene.clone();
            bumped.beta[[pi, pk]] += rng.random_range(1e-5..1e-3);
            let a = forward_combined(&scene, &calib).unwrap().values;
            let b = forward_combined(&bumped, &calib).unwrap().values;
            for i in pi..n {
                assert!(b[[i, pk]] <= a[[i, pk]]);
            }
            let am = forward_molecular(&scene, &calib).unwrap().values;
            let bm = forward_molecular(&bumped, &calib).unwrap().values;
            for i in pi..n {
                assert!(bm[[i, pk]] <= am[[i, pk]]);
            }
        }
    }
}

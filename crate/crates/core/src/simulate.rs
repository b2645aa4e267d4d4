//! Photon-count simulation: Poisson sampling, binomial thinning, count
//! accumulation and the synthetic cirrus scene.
//!
//! Every pixel draws from its own ChaCha8 stream (key from the seed, stream
//! id from the flat pixel index), so results do not depend on traversal
//! order or thread count.

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{get_parsed, KeyValues};
use crate::types::{Calibration, Channel, EnergyImage, PhotonImage, ScatterScene};

/// Derives an independent sub-seed for a named purpose.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.wrapping_add(0x9e37_79b9_7f4a_7c15));
    rng.next_u64()
}

fn pixel_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Builds an image by evaluating `f(rng, row, col)` with a dedicated stream
/// per pixel, in parallel over rows.
fn per_pixel(grid: &Grid, seed: u64, f: impl Fn(&mut ChaCha8Rng, usize, usize) -> f64 + Sync) -> Array2<f64> {
    let (n, k) = grid.shape();
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let f = &f;
            (0..k).map(move |j| f(&mut pixel_rng(seed, i * k + j), i, j))
        })
        .collect();
    Array2::from_shape_vec((n, k), data).expect("row-major buffer matches grid")
}

/// Below this rate the sampler inverts the CDF by sequential search.
const INVERSION_LIMIT: f64 = 30.0;

fn poisson_inversion(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    // the cap only triggers through round-off in the tail sum
    while u > cdf && k < 1000 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k as f64
}

/// Hörmann's transformed rejection with squeeze (PTRS).
fn poisson_ptrs(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -lambda + k * loglam - ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k;
        }
    }
}

fn poisson_draw(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda < INVERSION_LIMIT {
        poisson_inversion(rng, lambda)
    } else {
        poisson_ptrs(rng, lambda)
    }
}

/// Draws independent Poisson counts with the given expected values.
pub fn sample_poisson(rates: &EnergyImage, channel: Channel, seed: u64) -> PhotonImage {
    let counts = per_pixel(&rates.grid, seed, |rng, i, j| poisson_draw(rng, rates.values[[i, j]]));
    PhotonImage {
        grid: rates.grid,
        counts,
        channel,
    }
}

/// Per-count Bernoulli trials are used below this count.
const BERNOULLI_LIMIT: f64 = 64.0;

/// Splits every count binomially: `train ~ Binomial(count, p)` and
/// `test = count - train`.
pub fn poisson_thin(counts: &PhotonImage, p: f64, seed: u64) -> Result<(PhotonImage, PhotonImage)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("thinning probability", format!("{p} is outside (0, 1)")));
    }
    let train = per_pixel(&counts.grid, seed, |rng, i, j| {
        let y = counts.counts[[i, j]];
        if y < BERNOULLI_LIMIT {
            (0..y as u64).filter(|_| rng.random::<f64>() < p).count() as f64
        } else {
            Binomial::new(y as u64, p).expect("p checked above").sample(rng) as f64
        }
    });
    let test = &counts.counts - &train;
    let wrap = |c| PhotonImage {
        grid: counts.grid,
        counts: c,
        channel: counts.channel,
    };
    Ok((wrap(train), wrap(test)))
}

/// Sums counts over non-overlapping `rows x cols` blocks.
pub fn accumulate(counts: &PhotonImage, rows: usize, cols: usize) -> Result<PhotonImage> {
    let grid = counts.grid.coarsen(rows, cols)?;
    let summed = Array2::from_shape_fn(grid.shape(), |(i, j)| {
        counts
            .counts
            .slice(ndarray::s![i * rows..(i + 1) * rows, j * cols..(j + 1) * cols])
            .sum()
    });
    Ok(PhotonImage {
        grid,
        counts: summed,
        channel: counts.channel,
    })
}

/// Parameters of the synthetic cirrus scene and its instrument.
///
/// The cloud occupies the half-open bin box `rows.0..rows.1` by
/// `cols.0..cols.1`. Inside it the backscatter rises from `clear_nu` to
/// `cloud_nu_peak` over a raised-cosine ramp `smoothing` bins wide; the
/// lidar ratio is `cloud_mu` everywhere inside the box and `clear_mu`
/// outside.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    pub grid: Grid,
    pub cloud_rows: (usize, usize),
    pub cloud_cols: (usize, usize),
    pub cloud_nu_peak: f64,
    pub cloud_mu: f64,
    pub clear_mu: f64,
    pub clear_nu: f64,
    pub smoothing: usize,
    pub background_c: f64,
    pub background_m: f64,
    pub c_am: f64,
    /// Molecular calibration of the combined channel.
    pub c_mc: f64,
    /// Molecular calibration of the molecular channel.
    pub c_mm: f64,
    /// Gain at the first range bin; it falls off as the inverse square of
    /// range beyond `range_start`.
    pub gain: f64,
    /// Range of the first bin in meters.
    pub range_start: f64,
    pub seed: u64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        SceneRecipe {
            grid: Grid::new(64, 32, 7.5, 2.5).expect("valid default grid"),
            cloud_rows: (12, 52),
            cloud_cols: (4, 28),
            cloud_nu_peak: 2e-5,
            cloud_mu: 25.0,
            clear_mu: 40.0,
            clear_nu: 1e-6,
            smoothing: 8,
            // chosen so that 48x accumulation gives 5725.69 and 1030.18
            background_c: 5725.69 / 48.0,
            background_m: 1030.18 / 48.0,
            c_am: 5e-4,
            c_mc: 1.0e-6,
            c_mm: 0.8e-6,
            gain: 5e7,
            range_start: 2000.0,
            seed: 0,
        }
    }
}

const RECIPE_KEYS: [&str; 21] = [
    "rows",
    "cols",
    "dr",
    "dt",
    "cloud_row_lo",
    "cloud_row_hi",
    "cloud_col_lo",
    "cloud_col_hi",
    "cloud_nu_peak",
    "cloud_mu",
    "clear_mu",
    "clear_nu",
    "smoothing",
    "background_c",
    "background_m",
    "c_am",
    "c_mc",
    "c_mm",
    "gain",
    "range_start",
    "seed",
];

impl SceneRecipe {
    /// Reads a recipe from key-value pairs; absent keys keep their defaults
    /// and unknown keys are rejected.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        SceneRecipe::default().with_key_values(kv)
    }

    /// Copy of `self` with the given keys replaced.
    pub fn with_key_values(&self, kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !RECIPE_KEYS.contains(&k.as_str())) {
            return Err(Error::invalid("configuration", format!("unknown key '{k}'")));
        }
        let d = self;
        let rows = get_parsed(kv, "rows")?.unwrap_or(d.grid.n_range);
        let cols = get_parsed(kv, "cols")?.unwrap_or(d.grid.n_profiles);
        let dr = get_parsed(kv, "dr")?.unwrap_or(d.grid.dr);
        let dt = get_parsed(kv, "dt")?.unwrap_or(d.grid.dt);
        let r = SceneRecipe {
            grid: Grid::new(rows, cols, dr, dt)?,
            cloud_rows: (
                get_parsed(kv, "cloud_row_lo")?.unwrap_or(d.cloud_rows.0),
                get_parsed(kv, "cloud_row_hi")?.unwrap_or(d.cloud_rows.1),
            ),
            cloud_cols: (
                get_parsed(kv, "cloud_col_lo")?.unwrap_or(d.cloud_cols.0),
                get_parsed(kv, "cloud_col_hi")?.unwrap_or(d.cloud_cols.1),
            ),
            cloud_nu_peak: get_parsed(kv, "cloud_nu_peak")?.unwrap_or(d.cloud_nu_peak),
            cloud_mu: get_parsed(kv, "cloud_mu")?.unwrap_or(d.cloud_mu),
            clear_mu: get_parsed(kv, "clear_mu")?.unwrap_or(d.clear_mu),
            clear_nu: get_parsed(kv, "clear_nu")?.unwrap_or(d.clear_nu),
            smoothing: get_parsed(kv, "smoothing")?.unwrap_or(d.smoothing),
            background_c: get_parsed(kv, "background_c")?.unwrap_or(d.background_c),
            background_m: get_parsed(kv, "background_m")?.unwrap_or(d.background_m),
            c_am: get_parsed(kv, "c_am")?.unwrap_or(d.c_am),
            c_mc: get_parsed(kv, "c_mc")?.unwrap_or(d.c_mc),
            c_mm: get_parsed(kv, "c_mm")?.unwrap_or(d.c_mm),
            gain: get_parsed(kv, "gain")?.unwrap_or(d.gain),
            range_start: get_parsed(kv, "range_start")?.unwrap_or(d.range_start),
            seed: get_parsed(kv, "seed")?.unwrap_or(d.seed),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("rows", self.grid.n_range.to_string());
        put("cols", self.grid.n_profiles.to_string());
        put("dr", self.grid.dr.to_string());
        put("dt", self.grid.dt.to_string());
        put("cloud_row_lo", self.cloud_rows.0.to_string());
        put("cloud_row_hi", self.cloud_rows.1.to_string());
        put("cloud_col_lo", self.cloud_cols.0.to_string());
        put("cloud_col_hi", self.cloud_cols.1.to_string());
        put("cloud_nu_peak", self.cloud_nu_peak.to_string());
        put("cloud_mu", self.cloud_mu.to_string());
        put("clear_mu", self.clear_mu.to_string());
        put("clear_nu", self.clear_nu.to_string());
        put("smoothing", self.smoothing.to_string());
        put("background_c", self.background_c.to_string());
        put("background_m", self.background_m.to_string());
        put("c_am", self.c_am.to_string());
        put("c_mc", self.c_mc.to_string());
        put("c_mm", self.c_mm.to_string());
        put("gain", self.gain.to_string());
        put("range_start", self.range_start.to_string());
        put("seed", self.seed.to_string());
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("scene recipe", r));
        let (n, k) = self.grid.shape();
        if self.cloud_rows.0 >= self.cloud_rows.1 || self.cloud_rows.1 > n {
            return bad(format!("cloud rows {:?} outside 0..{n}", self.cloud_rows));
        }
        if self.cloud_cols.0 >= self.cloud_cols.1 || self.cloud_cols.1 > k {
            return bad(format!("cloud columns {:?} outside 0..{k}", self.cloud_cols));
        }
        if !(self.cloud_mu >= 1.0 && self.clear_mu >= 1.0) {
            return bad("lidar ratios must be at least 1".into());
        }
        if !(self.clear_nu >= 0.0 && self.cloud_nu_peak >= self.clear_nu) {
            return bad("need 0 <= clear_nu <= cloud_nu_peak".into());
        }
        if !(self.gain > 0.0 && self.range_start > 0.0) {
            return bad("gain and range_start must be positive".into());
        }
        Ok(())
    }

    /// Raised-cosine weight of a pixel: 0 outside the cloud box, rising to 1
    /// once it is `smoothing` bins inside every edge.
    pub fn cloud_weight(&self, i: usize, j: usize) -> f64 {
        let ramp = |x: usize, (lo, hi): (usize, usize)| -> f64 {
            if x < lo || x >= hi {
                return 0.0;
            }
            let depth = (x - lo).min(hi - 1 - x) + 1;
            if self.smoothing == 0 || depth > self.smoothing {
                1.0
            } else {
                let t = depth as f64 / (self.smoothing + 1) as f64;
                0.5 * (1.0 - (std::f64::consts::PI * t).cos())
            }
        };
        ramp(i, self.cloud_rows) * ramp(j, self.cloud_cols)
    }

    pub fn in_cloud(&self, i: usize, j: usize) -> bool {
        (self.cloud_rows.0..self.cloud_rows.1).contains(&i) && (self.cloud_cols.0..self.cloud_cols.1).contains(&j)
    }
}

/// Builds the truth scene and the instrument calibration for a recipe.
pub fn make_cirrus_scene(recipe: &SceneRecipe) -> Result<(ScatterScene, Calibration)> {
    recipe.validate()?;
    let grid = recipe.grid;
    let nu = Array2::from_shape_fn(grid.shape(), |(i, j)| {
        recipe.clear_nu + recipe.cloud_weight(i, j) * (recipe.cloud_nu_peak - recipe.clear_nu)
    });
    let mu = Array2::from_shape_fn(grid.shape(), |(i, j)| {
        if recipe.in_cloud(i, j) {
            recipe.cloud_mu
        } else {
            recipe.clear_mu
        }
    });
    let beta = &nu * &mu;
    let scene = ScatterScene::new(grid, nu, beta, Array2::zeros(grid.shape()))?;

    let c_g = Array2::from_shape_fn(grid.shape(), |(i, _)| {
        let r = recipe.range_start + i as f64 * grid.dr;
        recipe.gain * (recipe.range_start / r).powi(2)
    });
    let full = |v: f64| Array2::from_elem(grid.shape(), v);
    let calib = Calibration::new(
        grid,
        c_g,
        full(recipe.c_mc),
        recipe.c_am,
        full(recipe.c_mm),
        full(recipe.background_c),
        full(recipe.background_m),
    )?;
    Ok((scene, calib))
}

/// Replicates every profile `factor` times along time, giving a scene and
/// calibration on a grid with `dt / factor` profiles.
pub fn oversample_columns(scene: &ScatterScene, calib: &Calibration, factor: usize) -> Result<(ScatterScene, Calibration)> {
    if factor == 0 {
        return Err(Error::invalid("oversampling factor", "must be positive"));
    }
    let g = scene.grid;
    let fine = Grid::new(g.n_range, g.n_profiles * factor, g.dr, g.dt / factor as f64)?;
    let rep = |f: &Array2<f64>| Array2::from_shape_fn(fine.shape(), |(i, j)| f[[i, j / factor]]);
    let scene = ScatterScene::new(fine, rep(&scene.nu), rep(&scene.beta), rep(&scene.rho))?;
    let calib = Calibration::new(
        fine,
        rep(&calib.c_g),
        rep(&calib.c_mc),
        calib.c_am,
        rep(&calib.c_mm),
        rep(&calib.b_c),
        rep(&calib.b_m),
    )?;
    Ok((scene, calib))
}

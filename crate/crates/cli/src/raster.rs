//! Grayscale previews of fields. Range increases upward and time to the
//! right. Backscatter and extinction use a log10 scale; invalid pixels,
//! and non-positive ones on a log scale, are drawn white.

use std::path::Path;

use anyhow::{Context, Result};
use image::{GrayImage, Luma};
use ndarray::Array2;

const INVALID: u8 = 255;

/// Whether a field is shown on a log scale.
pub fn is_logarithmic(name: &str) -> bool {
    matches!(name, "nu" | "nu_plus" | "beta")
}

/// Maps the field to gray levels `0..=254`.
fn levels(field: &Array2<f64>, log: bool) -> Array2<u8> {
    let value = |v: f64| {
        if log {
            if v > 0.0 {
                v.log10()
            } else {
                f64::NAN
            }
        } else {
            v
        }
    };
    let shown: Vec<f64> = field.iter().map(|&v| value(v)).filter(|v| v.is_finite()).collect();
    let lo = shown.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = shown.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    field.mapv(|v| {
        let s = value(v);
        if s.is_finite() {
            (254.0 * (s - lo) / span).round() as u8
        } else {
            INVALID
        }
    })
}

pub fn write_png(path: &Path, name: &str, field: &Array2<f64>) -> Result<()> {
    let (n, k) = field.dim();
    let lv = levels(field, is_logarithmic(name));
    let img = GrayImage::from_fn(k as u32, n as u32, |x, y| Luma([lv[[n - 1 - y as usize, x as usize]]]));
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

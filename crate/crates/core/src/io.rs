//! Plain-text file formats.
//!
//! Matrices are stored as CSV with a single header line
//!
//! ```text
//! # rows=<N> cols=<K> dr=<dr> dt=<dt>
//! ```
//!
//! followed by `N` rows of `K` comma-separated values written with 17
//! significant digits, so a read-back is bit-exact. Invalid pixels are
//! written as `nan`.
//!
//! Configuration files and run manifests are flat `key = value` files where
//! `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::Grid;

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// Renders a matrix in the repository CSV format.
pub fn format_matrix(field: &Array2<f64>, grid: &Grid) -> String {
    let mut out = String::with_capacity(field.len() * 24 + 64);
    let _ = writeln!(
        out,
        "# rows={} cols={} dr={} dt={}",
        field.nrows(),
        field.ncols(),
        grid.dr,
        grid.dt
    );
    for row in field.rows() {
        let line: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: impl AsRef<Path>, field: &Array2<f64>, grid: &Grid) -> Result<()> {
    fs::write(path, format_matrix(field, grid))?;
    Ok(())
}

/// Parses the repository CSV format, returning the matrix and its grid.
pub fn parse_matrix(text: &str, origin: &str) -> Result<(Array2<f64>, Grid)> {
    let bad = |reason: String| Error::Format {
        path: origin.to_string(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| bad("missing '# rows=.. cols=.. dr=.. dt=..' header".into()))?;
    let mut fields = BTreeMap::new();
    for token in header.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| bad(format!("bad header token '{token}'")))?;
        fields.insert(k, v);
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| bad(format!("header lacks '{key}'")))
    };
    let rows: usize = get("rows")?.parse().map_err(|e| bad(format!("rows: {e}")))?;
    let cols: usize = get("cols")?.parse().map_err(|e| bad(format!("cols: {e}")))?;
    let dr: f64 = get("dr")?.parse().map_err(|e| bad(format!("dr: {e}")))?;
    let dt: f64 = get("dt")?.parse().map_err(|e| bad(format!("dt: {e}")))?;
    let grid = Grid::new(rows, cols, dr, dt)?;

    let mut data = Vec::with_capacity(rows * cols);
    let mut n_rows = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|e| bad(format!("line {}: '{cell}': {e}", i + 2)))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(bad(format!(
                "line {} has {} values, expected {cols}",
                i + 2,
                data.len() - before
            )));
        }
        n_rows += 1;
    }
    if n_rows != rows {
        return Err(bad(format!("found {n_rows} data rows, header says {rows}")));
    }
    let field = Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?;
    Ok((field, grid))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<(Array2<f64>, Grid)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_matrix(&text, &path.display().to_string())
}

/// Ordered `key = value` pairs.
pub type KeyValues = BTreeMap<String, String>;

pub fn parse_key_values(text: &str, origin: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            path: origin.to_string(),
            reason: format!("line {}: expected 'key = value'", i + 1),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_key_values(path: impl AsRef<Path>) -> Result<KeyValues> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_key_values(&text, &path.display().to_string())
}

pub fn format_key_values(kv: &KeyValues) -> String {
    let mut out = String::new();
    for (k, v) in kv {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

pub fn write_key_values(path: impl AsRef<Path>, kv: &KeyValues) -> Result<()> {
    fs::write(path, format_key_values(kv))?;
    Ok(())
}

/// Typed lookup into a key-value map.
pub fn get_parsed<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match kv.get(key) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|e| {
            Error::invalid("configuration", format!("key '{key}' = '{v}': {e}"))
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn header_and_layout() {
        let g = Grid::new(2, 3, 7.5, 2.5).unwrap();
        let m = array![[1.0, 2.5, -3.0], [f64::NAN, 0.0, 1e-300]];
        let text = format_matrix(&m, &g);
        assert!(text.starts_with("# rows=2 cols=3 dr=7.5 dt=2.5\n"));
        assert_eq!(text.lines().count(), 3);
        let (back, g2) = parse_matrix(&text, "mem").unwrap();
        assert_eq!(g2, g);
        assert!(back[[1, 0]].is_nan());
        assert_eq!(back[[1, 2]], 1e-300);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_matrix("", "x").is_err());
        assert!(parse_matrix("1,2\n", "x").is_err());
        assert!(parse_matrix("# rows=2 cols=2 dr=1 dt=1\n1,2\n", "x").is_err());
        assert!(parse_matrix("# rows=1 cols=2 dr=1 dt=1\n1,2,3\n", "x").is_err());
        assert!(parse_matrix("# rows=1 cols=2 dr=1 dt=1\n1,abc\n", "x").is_err());
        assert!(parse_matrix("# rows=1 cols=2 dt=1\n1,2\n", "x").is_err());
    }

    #[test]
    fn key_values_with_comments() {
        let kv = parse_key_values("# header\nrows = 64 # bins\n\ncloud_mu=25\n", "x").unwrap();
        assert_eq!(kv["rows"], "64");
        assert_eq!(kv["cloud_mu"], "25");
        assert_eq!(get_parsed::<usize>(&kv, "rows").unwrap(), Some(64));
        assert_eq!(get_parsed::<usize>(&kv, "missing").unwrap(), None);
        assert!(get_parsed::<usize>(&kv, "cloud_mu").is_ok());
        assert!(parse_key_values("novalue\n", "x").is_err());
        let again = parse_key_values(&format_key_values(&kv), "y").unwrap();
        assert_eq!(again, kv);
    }

    proptest! {
        #[test]
        fn matrix_round_trip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 12)) {
            let g = Grid::new(3, 4, 0.1, 3.0).unwrap();
            let m = Array2::from_shape_vec((3, 4), vals).unwrap();
            let (back, _) = parse_matrix(&format_matrix(&m, &g), "mem").unwrap();
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

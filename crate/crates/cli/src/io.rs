//! Ensemble and time-series CSV formats.
//!
//! Numbers are written with 17 significant digits so every `f64`
//! round-trips exactly; ensembles use the header `p0,...,p{d-1}` with one
//! particle per row, tagged points in a separate file with the same schema.

use std::fs;
use std::path::Path;

use p2flow_core::measures::ParticleEnsemble;

use crate::error::{Error, Result};

/// Full round-trip precision formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn ensemble_header(dim: usize) -> String {
    (0..dim)
        .map(|j| format!("p{j}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn rows_to_csv(dim: usize, flat: &[f64]) -> String {
    let mut out = String::new();
    out.push_str(&ensemble_header(dim));
    out.push('\n');
    for row in flat.chunks_exact(dim) {
        let line = row.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_ensemble_csv(path: &Path, mu: &ParticleEnsemble) -> Result<()> {
    fs::write(path, rows_to_csv(mu.dim(), mu.positions()))
        .map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Writes points that are not an ensemble (tagged points, collapse points)
/// with the ensemble schema.
pub fn write_points_csv(path: &Path, dim: usize, flat: &[f64]) -> Result<()> {
    fs::write(path, rows_to_csv(dim, flat)).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn read_ensemble_csv(path: &Path) -> Result<ParticleEnsemble> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::config("E_CSV", format!("{}: empty file", path.display())))?;
    let dim = header.split(',').count();
    let expected = ensemble_header(dim);
    if header.trim() != expected {
        return Err(Error::config(
            "E_CSV",
            format!("{}: expected header '{expected}'", path.display()),
        ));
    }
    let mut flat = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim {
            return Err(Error::config(
                "E_CSV",
                format!("{}: row {} has {} fields, expected {dim}", path.display(), i + 1, fields.len()),
            ));
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::config(
                    "E_CSV",
                    format!("{}: cannot parse '{f}' on row {}", path.display(), i + 1),
                )
            })?;
            flat.push(v);
        }
    }
    ParticleEnsemble::new(dim, flat).map_err(Into::into)
}

/// Generic time-series CSV: a header plus numeric rows.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let line = row.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Serializes a JSON value to a file with a trailing newline.
pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config("E_JSON", e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path.to_path_buf(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mu.csv");
        let mu = ParticleEnsemble::new(
            2,
            vec![0.1, -1.0 / 3.0, 2e-17, 12345.6789, f64::MIN_POSITIVE, 1.0],
        )
        .unwrap();
        write_ensemble_csv(&path, &mu).unwrap();
        let back = read_ensemble_csv(&path).unwrap();
        assert_eq!(back, mu);
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x0,x1\n1.0,2.0\n").unwrap();
        assert!(read_ensemble_csv(&path).is_err());
    }
}

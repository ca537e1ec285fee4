//! Heatmap export: CSV with six decimals, and binary 8-bit PGM scaled so
//! the smallest value is black and the largest white. A constant matrix
//! maps to all black.

use std::path::{Path, PathBuf};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub fn heatmap_csv(matrix: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..matrix.rows() {
        let row: Vec<String> = matrix.row(r).iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_heatmap_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::invalid(format!("bad heatmap value {v:?}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Binary PGM (`P5`) bytes with min-max scaling to `0..=255`.
pub fn heatmap_pgm(matrix: &Tensor) -> Vec<u8> {
    let (lo, hi) = matrix
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = format!("P5\n{} {}\n255\n", matrix.cols(), matrix.rows()).into_bytes();
    out.extend(matrix.data().iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Writes `<stem>.csv` and `<stem>.pgm`, returning both paths.
pub fn export_heatmap(matrix: &Tensor, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let stem = stem.as_ref();
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    std::fs::write(&csv, heatmap_csv(matrix)).map_err(|e| Error::io(&csv, e))?;
    std::fs::write(&pgm, heatmap_pgm(matrix)).map_err(|e| Error::io(&pgm, e))?;
    Ok((csv, pgm))
}

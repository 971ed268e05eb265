//! FSL-style `bval` (one line) and `bvec` (three lines: x, y, z) tables.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::shore::{QSpaceSamples, SHELL_TOLERANCE};
use crate::sphere::DirectionSet;

fn numbers(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("not a number: {t:?}"))))
        .collect()
}

fn content_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.trim().is_empty()).collect()
}

pub fn parse_bval(text: &str) -> Result<Vec<f64>> {
    let lines = content_lines(text);
    let values: Vec<f64> = lines.iter().map(|l| numbers(l)).collect::<Result<Vec<_>>>()?.concat();
    if values.is_empty() {
        return Err(Error::Format("empty bval table".into()));
    }
    Ok(values)
}

/// Raw gradient vectors; zero vectors (b = 0 volumes) are kept as-is.
pub fn parse_bvec(text: &str) -> Result<Vec<Vector3<f64>>> {
    let lines = content_lines(text);
    if lines.len() != 3 {
        return Err(Error::Format(format!("bvec needs 3 lines, found {}", lines.len())));
    }
    let rows: Vec<Vec<f64>> = lines.iter().map(|l| numbers(l)).collect::<Result<_>>()?;
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format("bvec lines differ in length".into()));
    }
    Ok((0..n).map(|i| Vector3::new(rows[0][i], rows[1][i], rows[2][i])).collect())
}

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

pub fn format_bval(bvalues: &[f64]) -> String {
    join(bvalues.iter().copied()) + "\n"
}

pub fn format_bvec(dirs: &DirectionSet) -> String {
    (0..3)
        .map(|k| join(dirs.iter().map(|d| d[k])) + "\n")
        .collect()
}

/// Pairs the tables into a scheme. Zero vectors are accepted only for
/// b-values below the shell tolerance and are replaced by +z; other vectors
/// are normalized.
pub fn load_scheme(bval: &str, bvec: &str) -> Result<QSpaceSamples> {
    let b = parse_bval(bval)?;
    let g = parse_bvec(bvec)?;
    if b.len() != g.len() {
        return Err(Error::Format(format!(
            "bval has {} entries, bvec has {}",
            b.len(),
            g.len()
        )));
    }
    let dirs = b
        .iter()
        .zip(g)
        .map(|(&b, v)| {
            let n = v.norm();
            if n > 1e-8 {
                Ok(v / n)
            } else if b < SHELL_TOLERANCE {
                Ok(Vector3::z())
            } else {
                Err(Error::Format(format!("zero gradient vector at b = {b}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    QSpaceSamples::new(b, DirectionSet::new(dirs)?)
}

pub fn read_scheme(bval: &Path, bvec: &Path) -> Result<QSpaceSamples> {
    load_scheme(&std::fs::read_to_string(bval)?, &std::fs::read_to_string(bvec)?)
}

pub fn write_scheme(samples: &QSpaceSamples, bval: &Path, bvec: &Path) -> Result<()> {
    std::fs::write(bval, format_bval(samples.bvalues()))?;
    std::fs::write(bvec, format_bvec(samples.directions()))?;
    Ok(())
}

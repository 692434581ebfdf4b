//! Plain-ASCII point files: a header line `xyz mm <count>` followed by one
//! whitespace-separated `x y z` triple per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, PointCloud, Vec3};

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Triples of a point file; shared by clouds and displacement fields.
pub fn read_triples(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(path, &text)
}

pub(crate) fn parse_triples(path: &Path, text: &str) -> Result<Vec<Vec3>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| parse_error(path, 1, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let count = match fields.as_slice() {
        ["xyz", "mm", n] => n
            .parse::<usize>()
            .map_err(|_| parse_error(path, hline, format!("bad point count {n:?}")))?,
        _ => return Err(parse_error(path, hline, format!("expected header `xyz mm <count>`, got {header:?}"))),
    };
    let mut out = Vec::with_capacity(count);
    for (ln, line) in lines {
        let mut p = [0.0; 3];
        let mut parts = line.split_whitespace();
        for c in &mut p {
            let tok = parts.next().ok_or_else(|| parse_error(path, ln, "expected 3 coordinates"))?;
            *c = tok
                .parse::<f64>()
                .map_err(|_| parse_error(path, ln, format!("bad coordinate {tok:?}")))?;
            if !c.is_finite() {
                return Err(parse_error(path, ln, format!("non-finite coordinate {tok:?}")));
            }
        }
        if parts.next().is_some() {
            return Err(parse_error(path, ln, "expected exactly 3 coordinates"));
        }
        out.push(p);
    }
    if out.len() != count {
        return Err(parse_error(
            path,
            hline,
            format!("header declares {count} points, file has {}", out.len()),
        ));
    }
    Ok(out)
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let pts = read_triples(path)?;
    if pts.is_empty() {
        return Err(parse_error(path, 1, "cloud has no points"));
    }
    PointCloud::new(pts)
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    DisplacementField::new(read_triples(path)?)
}

/// Seven significant digits (scientific notation with six decimals).
pub(crate) fn format_triples(points: &[Vec3]) -> String {
    let mut s = String::with_capacity(40 * points.len() + 16);
    let _ = writeln!(s, "xyz mm {}", points.len());
    for p in points {
        let _ = writeln!(s, "{:.6e} {:.6e} {:.6e}", p[0], p[1], p[2]);
    }
    s
}

pub fn write_triples(path: &Path, points: &[Vec3]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_triples(points)).map_err(|e| Error::io(path, e))
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_triples(path, cloud.points())
}

pub fn save_field(path: &Path, field: &DisplacementField) -> Result<()> {
    write_triples(path, field.vectors())
}

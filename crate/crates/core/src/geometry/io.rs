//! Plain-text readers and writers for clouds, matrices and transforms.
//!
//! Point files hold one `x y z` triple per line; `#` starts a comment line.
//! ASCII PLY files with `x`, `y`, `z` vertex properties are also accepted.
//! Transform files are 4×4 row-major homogeneous matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix4};

use super::{Point, PointCloud, RigidTransform};
use crate::error::{Error, Result};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses whitespace-separated numeric rows, skipping blank and `#` lines.
/// Returns `(line number, values)` per data row.
pub fn parse_rows(path: &Path, text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| parse_err(path, no + 1, format!("bad number {tok:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((no + 1, values));
    }
    Ok(rows)
}

/// Reads a dense matrix; every row must have the same width.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let rows = parse_rows(path, &read_text(path)?)?;
    let Some((_, first)) = rows.first() else {
        return Ok(DMatrix::zeros(0, 0));
    };
    let width = first.len();
    for (line, row) in &rows {
        if row.len() != width {
            return Err(parse_err(path, *line, format!("expected {width} columns, got {}", row.len())));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), width, |r, c| rows[r].1[c]))
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_text(path, &format_matrix(m))
}

/// Reads a point file, dispatching on a leading `ply` magic line.
pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let text = read_text(path)?;
    if text.trim_start().starts_with("ply") {
        return parse_ascii_ply(path, &text);
    }
    let rows = parse_rows(path, &text)?;
    let mut points = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if row.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 coordinates, got {}", row.len())));
        }
        points.push(Point::new(row[0], row[1], row[2]));
    }
    PointCloud::new(points)
}

fn parse_ascii_ply(path: &Path, text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    let mut n_vertices = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    for (no, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(parse_err(path, no + 1, format!("unsupported PLY format {fmt}")));
            }
            ["element", "vertex", n] => {
                n_vertices = Some(
                    n.parse::<usize>()
                        .map_err(|e| parse_err(path, no + 1, format!("bad vertex count: {e}")))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(path, no + 1, "list properties on vertices are not supported"));
            }
            ["property", _, name] if in_vertex => props.push((*name).to_string()),
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => {}
        }
    }
    if !header_done {
        return Err(parse_err(path, 1, "PLY header has no end_header"));
    }
    let n = n_vertices.ok_or_else(|| parse_err(path, 1, "PLY header declares no vertex element"))?;
    let pos = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| parse_err(path, 1, format!("PLY vertex lacks property {name}")))
    };
    let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);
    let mut points = Vec::with_capacity(n);
    for (no, line) in lines {
        if points.len() == n {
            break;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(path, no + 1, format!("bad number {t:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() < props.len() {
            return Err(parse_err(path, no + 1, "vertex row shorter than declared properties"));
        }
        points.push(Point::new(vals[ix], vals[iy], vals[iz]));
    }
    if points.len() != n {
        return Err(parse_err(path, 0, format!("expected {n} vertices, found {}", points.len())));
    }
    PointCloud::new(points)
}

pub fn format_point_cloud(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in cloud.iter() {
        // {:?} on f64 prints the shortest representation that round-trips
        let _ = writeln!(out, "{:?} {:?} {:?}", p.x, p.y, p.z);
    }
    out
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_text(path, &format_point_cloud(cloud))
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    let rows = parse_rows(path, &read_text(path)?)?;
    if rows.len() != 4 || rows.iter().any(|(_, r)| r.len() != 4) {
        return Err(parse_err(path, 1, "transform file must hold 4 rows of 4 values"));
    }
    let m = Matrix4::from_fn(|r, c| rows[r].1[c]);
    RigidTransform::from_homogeneous(&m)
}

pub fn format_transform(tf: &RigidTransform) -> String {
    let m = tf.to_homogeneous();
    let mut out = String::new();
    for r in 0..4 {
        let _ = writeln!(out, "{:?} {:?} {:?} {:?}", m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]);
    }
    out
}

pub fn write_transform(path: &Path, tf: &RigidTransform) -> Result<()> {
    write_text(path, &format_transform(tf))
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;

    #[test]
    fn text_cloud_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.txt");
        fs::write(&path, "# header\n1 2 3\n\n  4.5 -1e-3 0\n").unwrap();
        let cloud = read_point_cloud(&path).unwrap();
        assert_eq!(cloud, PointCloud::from_arrays(&[[1.0, 2.0, 3.0], [4.5, -1e-3, 0.0]]).unwrap());
    }

    #[test]
    fn rejects_wrong_arity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.txt");
        fs::write(&path, "1 2 3\n1 2\n").unwrap();
        assert!(matches!(read_point_cloud(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn ascii_ply_ignores_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let ply = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float intensity\n\
                   property float x\nproperty float y\nproperty float z\nelement face 0\n\
                   property list uchar int vertex_indices\nend_header\n0.5 1 2 3\n0.7 4 5 6\n";
        fs::write(&path, ply).unwrap();
        let cloud = read_point_cloud(&path).unwrap();
        assert_eq!(cloud, PointCloud::from_arrays(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap());
    }

    #[test]
    fn cloud_and_transform_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::from_arrays(&[[0.1, 1.0 / 3.0, -2.5e-7], [1e10, 0.0, 7.0]]).unwrap();
        let path = dir.path().join("c.txt");
        write_point_cloud(&path, &cloud).unwrap();
        assert_eq!(read_point_cloud(&path).unwrap(), cloud);

        let tf = RigidTransform::from_axis_angle(&Vector3::new(1.0, -2.0, 0.5), 1.1, Vector3::new(0.3, 0.2, 0.1));
        let tpath = dir.path().join("t.txt");
        write_transform(&tpath, &tf).unwrap();
        assert_eq!(read_transform(&tpath).unwrap(), tf);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_point_cloud(Path::new("/nonexistent/cloud.txt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cloud.txt"));
    }
}

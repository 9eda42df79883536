//! Minimal ASCII OBJ reader/writer.
//!
//! Only `v` and `f` records are meaningful; `vn`, `vt`, comments, groups and
//! materials are skipped. Faces must be triangles. Indices are 1-based and
//! may carry `/texture/normal` suffixes, which are ignored.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;

pub fn load_mesh<P: AsRef<Path>>(path: P) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text, &path.display().to_string())
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_obj(text: &str, path: &str) -> Result<TriMesh> {
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| parse_err(path, lineno, "vertex needs 3 coordinates"))?;
                    *c = tok.parse().map_err(|_| {
                        parse_err(path, lineno, format!("bad coordinate {tok:?}"))
                    })?;
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() != 3 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("face has {} vertices, only triangles are supported", refs.len()),
                    ));
                }
                let mut f = [0usize; 3];
                for (k, r) in refs.iter().enumerate() {
                    let first = r.split('/').next().unwrap_or("");
                    let one_based: i64 = first.parse().map_err(|_| {
                        parse_err(path, lineno, format!("bad face index {r:?}"))
                    })?;
                    if one_based < 1 || one_based as usize > vertices.len() {
                        return Err(parse_err(
                            path,
                            lineno,
                            format!(
                                "face index {one_based} out of range 1..={}",
                                vertices.len()
                            ),
                        ));
                    }
                    f[k] = (one_based - 1) as usize;
                }
                faces.push(f);
            }
            _ => {}
        }
    }

    TriMesh::new(vertices, faces)
}

pub fn save_mesh<P: AsRef<Path>>(mesh: &TriMesh, path: P) -> Result<()> {
    let mut out = String::new();
    for v in mesh.vertices() {
        writeln!(out, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z).expect("string write");
    }
    for f in mesh.faces() {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

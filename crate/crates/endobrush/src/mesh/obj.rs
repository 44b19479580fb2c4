//! Minimal OBJ reader: `v` and `f` lines, triangles only.
//!
//! Texture/normal references in face tokens (`f 1/2/3 ...`) are accepted and
//! ignored; negative (relative) indices resolve against the vertices read so
//! far, as the format defines.

use std::path::Path;

use nalgebra::Point3;

use super::{MeshError, RawMesh};

pub(super) fn parse(path: &Path) -> Result<RawMesh, MeshError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| MeshError::Io { path: path.display().to_string(), source })?;
    let perr = |detail: String| MeshError::Parse { path: path.display().to_string(), detail };

    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_ascii_whitespace();
        match parts.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    let tok = parts
                        .next()
                        .ok_or_else(|| perr(format!("line {}: vertex needs 3 coordinates", lineno + 1)))?;
                    *c = tok
                        .parse()
                        .map_err(|_| perr(format!("line {}: bad coordinate '{tok}'", lineno + 1)))?;
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let tokens: Vec<&str> = parts.collect();
                if tokens.len() != 3 {
                    return Err(MeshError::NonTriangleFace { face: faces.len(), arity: tokens.len() });
                }
                let mut f = [0u32; 3];
                for (k, tok) in tokens.iter().enumerate() {
                    let vertex_part = tok.split('/').next().unwrap_or("");
                    let raw: i64 = vertex_part
                        .parse()
                        .map_err(|_| perr(format!("line {}: bad face index '{tok}'", lineno + 1)))?;
                    let resolved = if raw > 0 {
                        raw - 1
                    } else if raw < 0 {
                        vertices.len() as i64 + raw
                    } else {
                        return Err(perr(format!("line {}: face index 0 is invalid", lineno + 1)));
                    };
                    if resolved < 0 || resolved > u32::MAX as i64 {
                        return Err(perr(format!(
                            "line {}: face index {raw} out of range",
                            lineno + 1
                        )));
                    }
                    f[k] = resolved as u32;
                }
                faces.push(f);
            }
            // normals, texcoords, groups, materials, comments: irrelevant here
            Some("vn") | Some("vt") | Some("g") | Some("o") | Some("s") | Some("usemtl")
            | Some("mtllib") | Some("#") | None => {}
            Some(other) if other.starts_with('#') => {}
            Some(other) => {
                return Err(perr(format!("line {}: unknown directive '{other}'", lineno + 1)))
            }
        }
    }
    Ok(RawMesh { vertices, colors: None, faces })
}

//! Triangle meshes: loading, validation, subdivision, vertex colors, export.
//!
//! Geometry lives in millimetres. Vertex normals come from area-weighted
//! face-normal accumulation. Meshes are immutable after construction, so a
//! `TriMesh` can be shared freely across threads.

mod obj;
mod ply;

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Point3, Vector3};

/// Faces below this area (mm²) are rejected as degenerate.
pub const MIN_FACE_AREA: f64 = 1e-12;
/// Vertices closer than this (mm) are merged on load.
pub const WELD_TOLERANCE: f64 = 1e-6;
/// Loaded meshes must have at least this many vertices and faces.
pub const MIN_LOADED_ELEMENTS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("unsupported mesh format: {path} (expected .ply or .obj)")]
    UnsupportedFormat { path: String },
    #[error("face {face} has {arity} vertices, only triangles are supported")]
    NonTriangleFace { face: usize, arity: usize },
    #[error("face {face} references vertex {index}, mesh has {vertex_count} vertices")]
    FaceIndexOutOfRange { face: usize, index: u32, vertex_count: usize },
    #[error("face {face} is degenerate: {detail}")]
    DegenerateFace { face: usize, detail: String },
    #[error("mesh has {vertices} vertices and {faces} faces, need at least {min} of each")]
    TooSmall { vertices: usize, faces: usize, min: usize },
    #[error("mesh has no vertex colors to export")]
    MissingColors,
}

/// An immutable triangle mesh with derived per-vertex normals and optional
/// per-vertex colors in `[0,1]^3`.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// Unit per-vertex normals, area-weighted over incident faces.
    pub normals: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    /// Validate connectivity and geometry, then compute normals.
    ///
    /// Accepts meshes as small as a single triangle; the stricter minimum
    /// element counts apply only to meshes entering through [`load_mesh`].
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(MeshError::TooSmall { vertices: vertices.len(), faces: faces.len(), min: 1 });
        }
        for (fi, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx as usize >= vertices.len() {
                    return Err(MeshError::FaceIndexOutOfRange {
                        face: fi,
                        index: idx,
                        vertex_count: vertices.len(),
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace {
                    face: fi,
                    detail: format!("repeated vertex index in {f:?}"),
                });
            }
            let area = face_area(&vertices, f);
            if area <= MIN_FACE_AREA {
                return Err(MeshError::DegenerateFace {
                    face: fi,
                    detail: format!("area {area:.3e} mm² below minimum"),
                });
            }
        }
        let normals = vertex_normals(&vertices, &faces);
        Ok(TriMesh { vertices, faces, normals, colors: None })
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Self {
        assert_eq!(colors.len(), self.vertices.len(), "one color per vertex");
        self.colors = Some(colors);
        self
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn surface_area(&self) -> f64 {
        self.faces.iter().map(|f| face_area(&self.vertices, f)).sum()
    }

    /// Corner points of one face.
    pub fn face_points(&self, face: usize) -> [Point3<f64>; 3] {
        let f = self.faces[face];
        [self.vertices[f[0] as usize], self.vertices[f[1] as usize], self.vertices[f[2] as usize]]
    }

    /// Ray-parity containment test for closed meshes: casts a fixed ray in an
    /// irrational direction (so it cannot graze edges of axis-aligned
    /// geometry) and counts crossings.
    pub fn contains_point(&self, p: &Point3<f64>) -> bool {
        let dir = Vector3::new(0.577_350_269_2, 0.267_261_241_9, 0.801_783_725_7).normalize();
        let mut crossings = 0usize;
        for f in &self.faces {
            let [a, b, c] =
                [self.vertices[f[0] as usize], self.vertices[f[1] as usize], self.vertices[f[2] as usize]];
            // Möller–Trumbore without backface culling
            let (e1, e2) = (b - a, c - a);
            let pv = dir.cross(&e2);
            let det = e1.dot(&pv);
            if det.abs() < 1e-14 {
                continue;
            }
            let inv = 1.0 / det;
            let tv = p - a;
            let u = tv.dot(&pv) * inv;
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let qv = tv.cross(&e1);
            let v = dir.dot(&qv) * inv;
            if v < 0.0 || u + v > 1.0 {
                continue;
            }
            let t = e2.dot(&qv) * inv;
            if t > 1e-12 {
                crossings += 1;
            }
        }
        crossings % 2 == 1
    }

    /// Count of faces incident to each undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = if a < b { (a, b) } else { (b, a) };
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }
}

fn face_area(vertices: &[Point3<f64>], f: &[u32; 3]) -> f64 {
    let [a, b, c] =
        [vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]];
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Area-weighted accumulation of face normals, normalized per vertex.
fn vertex_normals(vertices: &[Point3<f64>], faces: &[[u32; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        let [a, b, c] =
            [vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]];
        // cross product length = 2 * face area, so this weights by area
        let n = (b - a).cross(&(c - a));
        for &idx in f {
            acc[idx as usize] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 1e-20 {
                n / len
            } else {
                Vector3::z() // isolated or perfectly cancelled vertex; arbitrary unit fallback
            }
        })
        .collect()
}

/// Load and validate a PLY (ASCII or binary little-endian) or OBJ mesh.
///
/// Duplicate vertices within [`WELD_TOLERANCE`] are merged so per-vertex
/// attributes stay continuous across seams left by segmentation tools.
pub fn load_mesh(path: &Path) -> Result<TriMesh, MeshError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let raw = match ext.as_str() {
        "ply" => ply::parse(path)?,
        "obj" => obj::parse(path)?,
        _ => return Err(MeshError::UnsupportedFormat { path: path.display().to_string() }),
    };
    // validate indices against the raw vertex count before welding remaps them
    for (fi, f) in raw.faces.iter().enumerate() {
        for &idx in f {
            if idx as usize >= raw.vertices.len() {
                return Err(MeshError::FaceIndexOutOfRange {
                    face: fi,
                    index: idx,
                    vertex_count: raw.vertices.len(),
                });
            }
        }
    }
    let (vertices, colors, faces) = weld(raw.vertices, raw.colors, raw.faces);
    if vertices.len() < MIN_LOADED_ELEMENTS || faces.len() < MIN_LOADED_ELEMENTS {
        return Err(MeshError::TooSmall {
            vertices: vertices.len(),
            faces: faces.len(),
            min: MIN_LOADED_ELEMENTS,
        });
    }
    let mesh = TriMesh::new(vertices, faces)?;
    Ok(match colors {
        Some(c) => mesh.with_colors(c),
        None => mesh,
    })
}

/// Raw parsed geometry before welding and validation.
pub(crate) struct RawMesh {
    pub vertices: Vec<Point3<f64>>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub faces: Vec<[u32; 3]>,
}

/// Merge vertices within [`WELD_TOLERANCE`] of each other and remap faces.
/// The first occurrence keeps its position and color.
fn weld(
    vertices: Vec<Point3<f64>>,
    colors: Option<Vec<[f64; 3]>>,
    faces: Vec<[u32; 3]>,
) -> (Vec<Point3<f64>>, Option<Vec<[f64; 3]>>, Vec<[u32; 3]>) {
    let cell = WELD_TOLERANCE;
    let key_of = |p: &Point3<f64>| -> (i64, i64, i64) {
        ((p.x / cell).round() as i64, (p.y / cell).round() as i64, (p.z / cell).round() as i64)
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    let mut kept: Vec<Point3<f64>> = Vec::with_capacity(vertices.len());
    let mut kept_colors: Vec<[f64; 3]> = Vec::new();
    let mut remap: Vec<u32> = Vec::with_capacity(vertices.len());
    for (vi, p) in vertices.iter().enumerate() {
        let (kx, ky, kz) = key_of(p);
        let mut found = None;
        'search: for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    if let Some(bucket) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &ki in bucket {
                            if (kept[ki as usize] - p).norm() < WELD_TOLERANCE {
                                found = Some(ki);
                                break 'search;
                            }
                        }
                    }
                }
            }
        }
        match found {
            Some(ki) => remap.push(ki),
            None => {
                let ki = kept.len() as u32;
                kept.push(*p);
                if let Some(cs) = &colors {
                    kept_colors.push(cs[vi]);
                }
                grid.entry((kx, ky, kz)).or_default().push(ki);
                remap.push(ki);
            }
        }
    }
    let faces =
        faces.into_iter().map(|f| [remap[f[0] as usize], remap[f[1] as usize], remap[f[2] as usize]]).collect();
    let colors = colors.map(|_| kept_colors);
    (kept, colors, faces)
}

/// Midpoint (1-to-4) subdivision. New vertices sit on edge midpoints, so the
/// surface itself is unchanged; shared edges share their midpoint vertex.
/// Colors, when present, are averaged onto midpoints. Normals are recomputed.
pub fn subdivide(mesh: &TriMesh, iterations: usize) -> TriMesh {
    let mut vertices = mesh.vertices.clone();
    let mut faces = mesh.faces.clone();
    let mut colors = mesh.colors.clone();
    for _ in 0..iterations {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0u32; 3];
            for (k, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].into_iter().enumerate() {
                let key = if a < b { (a, b) } else { (b, a) };
                mids[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = (vertices[a as usize].coords + vertices[b as usize].coords) * 0.5;
                    vertices.push(Point3::from(m));
                    if let Some(cs) = &mut colors {
                        let (ca, cb) = (cs[a as usize], cs[b as usize]);
                        cs.push([
                            0.5 * (ca[0] + cb[0]),
                            0.5 * (ca[1] + cb[1]),
                            0.5 * (ca[2] + cb[2]),
                        ]);
                    }
                    (vertices.len() - 1) as u32
                });
            }
            let [m01, m12, m20] = mids;
            next_faces.push([f[0], m01, m20]);
            next_faces.push([f[1], m12, m01]);
            next_faces.push([f[2], m20, m12]);
            next_faces.push([m01, m12, m20]);
        }
        faces = next_faces;
    }
    let mesh = TriMesh::new(vertices, faces).expect("subdivision preserves validity");
    match colors {
        Some(c) => mesh.with_colors(c),
        None => mesh,
    }
}

/// Write a binary little-endian PLY with per-vertex uchar colors.
/// Colors are quantized as `round(255·c)` (half away from zero), clamped.
pub fn export_colored_mesh(mesh: &TriMesh, path: &Path) -> Result<(), MeshError> {
    let colors = mesh.colors.as_ref().ok_or(MeshError::MissingColors)?;
    ply::write_colored(path, &mesh.vertices, colors, &mesh.faces)
}

/// Write a binary little-endian PLY with float32 positions and no colors.
/// Positions round-trip exactly through [`load_mesh`] for any mesh whose
/// vertices are already spaced beyond the weld tolerance, so a pipeline that
/// exports its working mesh once and reloads it in every later stage sees
/// bit-identical geometry throughout.
pub fn export_mesh(mesh: &TriMesh, path: &Path) -> Result<(), MeshError> {
    ply::write_plain(path, &mesh.vertices, &mesh.faces)
}

/// Uniform scale + translation taking the mesh bounding box into `[-1,1]^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBoxNormalizer {
    pub center: Point3<f64>,
    /// Largest half-dimension of the bounding box (mm); uniform so the
    /// mapping preserves shape.
    pub half_extent: f64,
}

impl BoundingBoxNormalizer {
    pub fn fit(mesh: &TriMesh) -> Self {
        let mut min = mesh.vertices[0];
        let mut max = mesh.vertices[0];
        for v in &mesh.vertices {
            for k in 0..3 {
                min[k] = min[k].min(v[k]);
                max[k] = max[k].max(v[k]);
            }
        }
        let center = Point3::from((min.coords + max.coords) * 0.5);
        let half_extent = (0..3).map(|k| (max[k] - min[k]) * 0.5).fold(0.0f64, f64::max).max(1e-12);
        BoundingBoxNormalizer { center, half_extent }
    }

    pub fn normalize(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from((p - self.center) / self.half_extent)
    }

    pub fn denormalize(&self, q: &Point3<f64>) -> Point3<f64> {
        Point3::from(q.coords * self.half_extent + self.center.coords)
    }
}

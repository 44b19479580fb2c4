//! Software rasterizer producing per-pixel fragment records, plus shading and
//! the sparse linear operator that maps vertex colors to pixels.
//!
//! Rendering is deliberately hard-edged: pixel centers, strict z-buffer,
//! no antialiasing. Geometry never moves during training, so gradients only
//! need to flow through color interpolation — which makes the forward pass a
//! fixed sparse matrix and backprop its exact transpose.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::camera::{CameraPose, Intrinsics};
use crate::img::{ColorSpace, Image};
use crate::mesh::TriMesh;

/// Face id marking a pixel no triangle covers.
pub const EMPTY: u32 = u32::MAX;

/// Distance (mm) at which headlight falloff reaches full brightness.
pub const HEADLIGHT_REFERENCE_MM: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("color buffer has {got} entries but fragments reference vertex {needed}")]
    MissingColors { got: usize, needed: u32 },
    #[error("fragment buffer does not belong to this mesh: {0}")]
    MeshMismatch(String),
}

/// One pixel's rasterization record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    /// Covering face index, or [`EMPTY`].
    pub face_id: u32,
    /// The face's three vertex indices.
    pub vertices: [u32; 3],
    /// Barycentric weights of the pixel center on that face.
    pub bary: [f64; 3],
    /// Camera-space z in millimetres.
    pub depth: f64,
    /// Surface point in world millimetres, exactly `Σ baryᵢ·Vᵢ`.
    pub world_point: Point3<f64>,
    /// Interpolated unit surface normal (not flipped toward the camera).
    pub normal: Vector3<f64>,
    /// Pixel center lies within the inscribed endoscope circle.
    pub in_mask: bool,
}

impl Fragment {
    fn empty(in_mask: bool) -> Self {
        Fragment {
            face_id: EMPTY,
            vertices: [0; 3],
            bary: [0.0; 3],
            depth: 0.0,
            world_point: Point3::origin(),
            normal: Vector3::zeros(),
            in_mask,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.face_id == EMPTY
    }
}

/// Full-frame rasterization result; the source for shading, heatmaps, the
/// render operator, and 3D match verification.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentBuffer {
    pub width: usize,
    pub height: usize,
    /// Row-major, `width * height` entries.
    pub fragments: Vec<Fragment>,
}

impl FragmentBuffer {
    pub fn at(&self, x: usize, y: usize) -> &Fragment {
        &self.fragments[y * self.width + x]
    }
}

/// Whether a pixel center sits inside the circle inscribed in the image
/// rectangle (the endoscope's circular field).
pub fn in_circle_mask(intrinsics: &Intrinsics, x: usize, y: usize) -> bool {
    let (cx, cy) = intrinsics.principal();
    let r = intrinsics.width.min(intrinsics.height) as f64 / 2.0;
    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
    dx * dx + dy * dy <= r * r
}

/// A triangle vertex after near-plane clipping: camera-space position plus
/// its barycentric coordinates on the original (unclipped) face.
#[derive(Clone, Copy)]
struct ClipVertex {
    cam: Point3<f64>,
    bary: [f64; 3],
}

/// Clip a camera-space triangle against the plane z = near, keeping the far
/// side. Barycentric coordinates on the original face ride along, so every
/// emitted fragment still refers to the true triangle.
fn clip_near(tri: [ClipVertex; 3], near: f64) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let (da, db) = (a.cam.z - near, b.cam.z - near);
        if da >= 0.0 {
            out.push(a);
        }
        if (da >= 0.0) != (db >= 0.0) {
            let t = da / (da - db);
            let cam = Point3::from(a.cam.coords + (b.cam.coords - a.cam.coords) * t);
            let bary = [
                a.bary[0] + (b.bary[0] - a.bary[0]) * t,
                a.bary[1] + (b.bary[1] - a.bary[1]) * t,
                a.bary[2] + (b.bary[2] - a.bary[2]) * t,
            ];
            out.push(ClipVertex { cam, bary });
        }
    }
    out
}

/// Screen-space triangle ready for per-pixel coverage tests.
struct ScreenTri {
    face_id: u32,
    vertices: [u32; 3],
    /// Projected pixel coordinates.
    sx: [f64; 3],
    sy: [f64; 3],
    /// Camera-space z per clipped vertex.
    z: [f64; 3],
    /// Original-face barycentrics per clipped vertex.
    carried: [[f64; 3]; 3],
    x_range: (usize, usize),
}

/// Render the mesh from a pose. Faces are two-sided (luminal meshes are seen
/// from inside), the depth test is a strict less-than (ties keep the earlier
/// face), and output is bit-identical regardless of thread count.
pub fn rasterize(mesh: &TriMesh, pose: &CameraPose, intrinsics: &Intrinsics) -> FragmentBuffer {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let f = intrinsics.focal_px();
    let (cx, cy) = intrinsics.principal();
    let (near, far) = (intrinsics.near, intrinsics.far);

    let cam_vertices: Vec<Point3<f64>> =
        mesh.vertices.iter().map(|p| pose.world_to_camera(p)).collect();

    // clip, project, and bin screen triangles by the rows they may touch;
    // bins keep face order so the per-row loop stays deterministic
    let mut tris: Vec<ScreenTri> = Vec::new();
    let mut row_bins: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (fi, face) in mesh.faces.iter().enumerate() {
        let tri = [
            ClipVertex { cam: cam_vertices[face[0] as usize], bary: [1.0, 0.0, 0.0] },
            ClipVertex { cam: cam_vertices[face[1] as usize], bary: [0.0, 1.0, 0.0] },
            ClipVertex { cam: cam_vertices[face[2] as usize], bary: [0.0, 0.0, 1.0] },
        ];
        let poly = clip_near(tri, near);
        if poly.len() < 3 {
            continue;
        }
        for k in 1..poly.len() - 1 {
            let corners = [poly[0], poly[k], poly[k + 1]];
            let mut sx = [0.0; 3];
            let mut sy = [0.0; 3];
            let mut z = [0.0; 3];
            let mut carried = [[0.0; 3]; 3];
            for (j, c) in corners.iter().enumerate() {
                sx[j] = cx + f * c.cam.x / c.cam.z;
                sy[j] = cy - f * c.cam.y / c.cam.z;
                z[j] = c.cam.z;
                carried[j] = c.bary;
            }
            let min_x = sx.iter().fold(f64::INFINITY, |a, &b| a.min(b)).ceil().max(0.0);
            let max_x = sx.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)).floor();
            let min_y = sy.iter().fold(f64::INFINITY, |a, &b| a.min(b)).ceil().max(0.0);
            let max_y = sy.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)).floor();
            if min_x > max_x || min_y > max_y || min_x >= w as f64 || min_y >= h as f64 {
                continue;
            }
            let x_lo = min_x as usize;
            let x_hi = (max_x as usize).min(w - 1);
            let y_lo = min_y as usize;
            let y_hi = (max_y as usize).min(h - 1);
            let id = tris.len() as u32;
            tris.push(ScreenTri {
                face_id: fi as u32,
                vertices: *face,
                sx,
                sy,
                z,
                carried,
                x_range: (x_lo, x_hi),
            });
            for bin in &mut row_bins[y_lo..=y_hi] {
                bin.push(id);
            }
        }
    }

    let world = &mesh.vertices;
    let normals = &mesh.normals;
    let rows: Vec<Vec<Fragment>> = (0..h)
        .into_par_iter()
        .map(|iy| {
            let mut row: Vec<Fragment> =
                (0..w).map(|ix| Fragment::empty(in_circle_mask(intrinsics, ix, iy))).collect();
            let mut zbuf = vec![f64::INFINITY; w];
            let py = iy as f64;
            for &ti in &row_bins[iy] {
                let t = &tris[ti as usize];
                // signed twice-area of the projected triangle
                let area = (t.sx[1] - t.sx[0]) * (t.sy[2] - t.sy[0])
                    - (t.sx[2] - t.sx[0]) * (t.sy[1] - t.sy[0]);
                if area == 0.0 {
                    continue;
                }
                for ix in t.x_range.0..=t.x_range.1 {
                    let px = ix as f64;
                    // screen-space barycentrics (signs normalized by area)
                    let s0 = ((t.sx[1] - px) * (t.sy[2] - py) - (t.sx[2] - px) * (t.sy[1] - py))
                        / area;
                    let s1 = ((t.sx[2] - px) * (t.sy[0] - py) - (t.sx[0] - px) * (t.sy[2] - py))
                        / area;
                    let s2 = 1.0 - s0 - s1;
                    if s0 < 0.0 || s1 < 0.0 || s2 < 0.0 {
                        continue;
                    }
                    // perspective-correct interpolation
                    let inv_z = s0 / t.z[0] + s1 / t.z[1] + s2 / t.z[2];
                    let depth = 1.0 / inv_z;
                    if !(depth > near && depth < far) {
                        continue;
                    }
                    if depth >= zbuf[ix] {
                        continue;
                    }
                    let (w0, w1, w2) =
                        (s0 / t.z[0] * depth, s1 / t.z[1] * depth, s2 / t.z[2] * depth);
                    let bary = [
                        w0 * t.carried[0][0] + w1 * t.carried[1][0] + w2 * t.carried[2][0],
                        w0 * t.carried[0][1] + w1 * t.carried[1][1] + w2 * t.carried[2][1],
                        w0 * t.carried[0][2] + w1 * t.carried[1][2] + w2 * t.carried[2][2],
                    ];
                    let [va, vb, vc] = t.vertices;
                    let world_point = Point3::from(
                        world[va as usize].coords * bary[0]
                            + world[vb as usize].coords * bary[1]
                            + world[vc as usize].coords * bary[2],
                    );
                    let n = normals[va as usize] * bary[0]
                        + normals[vb as usize] * bary[1]
                        + normals[vc as usize] * bary[2];
                    let norm = n.norm();
                    let normal = if norm > 1e-12 { n / norm } else { Vector3::z() };
                    zbuf[ix] = depth;
                    row[ix] = Fragment {
                        face_id: t.face_id,
                        vertices: t.vertices,
                        bary,
                        depth,
                        world_point,
                        normal,
                        in_mask: row[ix].in_mask,
                    };
                }
            }
            row
        })
        .collect();

    FragmentBuffer { width: w, height: h, fragments: rows.into_iter().flatten().collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShadeMode {
    /// Pure barycentric interpolation of vertex colors.
    Unlit,
    /// Interpolated color dimmed by incidence angle and an inverse-square
    /// falloff from a camera-mounted light.
    Headlight,
}

/// The three (vertex, weight) pairs of a fragment in ascending vertex order.
/// Shading and the render operator both consume entries in this exact order,
/// so their floating-point sums agree bit for bit.
#[inline]
fn sorted_entries(frag: &Fragment) -> [(u32, f64); 3] {
    let mut e = [
        (frag.vertices[0], frag.bary[0]),
        (frag.vertices[1], frag.bary[1]),
        (frag.vertices[2], frag.bary[2]),
    ];
    e.sort_unstable_by_key(|&(v, _)| v);
    e
}

#[inline]
fn interpolate(entries: &[(u32, f64)], colors: &[[f64; 3]]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for &(v, w) in entries {
        let c = colors[v as usize];
        out[0] += w * c[0];
        out[1] += w * c[1];
        out[2] += w * c[2];
    }
    out
}

fn check_colors(colors: &[[f64; 3]], frag: &FragmentBuffer) -> Result<(), RasterError> {
    let mut needed = 0u32;
    for fr in &frag.fragments {
        if !fr.is_empty() {
            needed = needed.max(fr.vertices[0]).max(fr.vertices[1]).max(fr.vertices[2]);
        }
    }
    if (needed as usize) < colors.len() || frag.fragments.iter().all(Fragment::is_empty) {
        Ok(())
    } else {
        Err(RasterError::MissingColors { got: colors.len(), needed })
    }
}

/// Shade a fragment buffer with per-vertex colors. Empty and out-of-mask
/// pixels come out black.
pub fn shade(
    colors: &[[f64; 3]],
    frag: &FragmentBuffer,
    mode: ShadeMode,
    pose: &CameraPose,
) -> Result<Image, RasterError> {
    check_colors(colors, frag)?;
    let mut img = Image::new(frag.width, frag.height, ColorSpace::RgbLinear);
    for y in 0..frag.height {
        for x in 0..frag.width {
            let fr = frag.at(x, y);
            if fr.is_empty() || !fr.in_mask {
                continue;
            }
            let mut c = interpolate(&sorted_entries(fr), colors);
            if mode == ShadeMode::Headlight {
                let v = (fr.world_point - pose.position).normalize();
                let incidence = fr.normal.dot(&v).abs();
                let falloff = (HEADLIGHT_REFERENCE_MM / fr.depth).powi(2).min(1.0);
                let gain = incidence * falloff;
                c = [c[0] * gain, c[1] * gain, c[2] * gain];
            }
            img.set_pixel(x, y, c);
        }
    }
    Ok(img)
}

/// Sparse linear map from per-vertex colors to in-mask pixel colors.
/// `apply` reproduces unlit shading exactly; `apply_transpose` is the
/// matching backprop path (the matrix transpose, no approximation).
#[derive(Debug, Clone)]
pub struct RenderOperator {
    pub width: usize,
    pub height: usize,
    pub vertex_count: usize,
    /// CSR row starts, one row per pixel (row-major), length `w*h + 1`.
    row_start: Vec<u32>,
    /// (vertex, weight) entries, ascending vertex within each pixel.
    entries: Vec<(u32, f64)>,
}

/// Extract the sparse render operator from a fragment buffer. Only valid
/// in-mask pixels contribute rows; everything else renders black and
/// receives no gradient.
pub fn build_render_operator(
    frag: &FragmentBuffer,
    mesh: &TriMesh,
) -> Result<RenderOperator, RasterError> {
    for (i, fr) in frag.fragments.iter().enumerate() {
        if fr.is_empty() {
            continue;
        }
        let face = mesh.faces.get(fr.face_id as usize).ok_or_else(|| {
            RasterError::MeshMismatch(format!(
                "pixel {i} references face {} of {}",
                fr.face_id,
                mesh.faces.len()
            ))
        })?;
        if *face != fr.vertices {
            return Err(RasterError::MeshMismatch(format!(
                "pixel {i}: face {} is {:?} in the mesh but {:?} in the fragment",
                fr.face_id, face, fr.vertices
            )));
        }
    }
    let mut row_start = Vec::with_capacity(frag.fragments.len() + 1);
    let mut entries = Vec::new();
    row_start.push(0u32);
    for fr in &frag.fragments {
        if !fr.is_empty() && fr.in_mask {
            entries.extend_from_slice(&sorted_entries(fr));
        }
        row_start.push(entries.len() as u32);
    }
    Ok(RenderOperator {
        width: frag.width,
        height: frag.height,
        vertex_count: mesh.vertex_count(),
        row_start,
        entries,
    })
}

impl RenderOperator {
    /// Forward map: vertex colors in, linear-RGB image out.
    pub fn apply(&self, colors: &[[f64; 3]]) -> Result<Image, RasterError> {
        if let Some(&(v, _)) = self.entries.iter().max_by_key(|&&(v, _)| v) {
            if v as usize >= colors.len() {
                return Err(RasterError::MissingColors { got: colors.len(), needed: v });
            }
        }
        let mut img = Image::new(self.width, self.height, ColorSpace::RgbLinear);
        for p in 0..self.width * self.height {
            let range = self.row_start[p] as usize..self.row_start[p + 1] as usize;
            if range.is_empty() {
                continue;
            }
            let c = interpolate(&self.entries[range], colors);
            img.set_pixel(p % self.width, p / self.width, c);
        }
        Ok(img)
    }

    /// Transpose map: per-pixel gradients in, per-vertex gradients out.
    /// Accumulation runs in ascending (pixel, vertex) order, so results are
    /// deterministic.
    pub fn apply_transpose(&self, pixel_grad: &Image) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0f64; 3]; self.vertex_count];
        for p in 0..self.width * self.height {
            let g = pixel_grad.pixel(p % self.width, p / self.width);
            for &(v, w) in &self.entries[self.row_start[p] as usize..self.row_start[p + 1] as usize]
            {
                let acc = &mut out[v as usize];
                acc[0] += w * g[0];
                acc[1] += w * g[1];
                acc[2] += w * g[2];
            }
        }
        out
    }

    /// Number of stored (pixel, vertex) entries.
    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Multiply each pixel's row by a fixed scalar. Folding a per-pixel
    /// shading gain into the operator this way keeps the map exactly linear
    /// in the vertex colors, so adjoint and gradient identities still hold.
    pub fn scale_rows(&mut self, gains: &[f64]) -> Result<(), RasterError> {
        if gains.len() != self.width * self.height {
            return Err(RasterError::MeshMismatch(format!(
                "gain buffer has {} entries for a {}x{} operator",
                gains.len(),
                self.width,
                self.height
            )));
        }
        for p in 0..gains.len() {
            for e in &mut self.entries[self.row_start[p] as usize..self.row_start[p + 1] as usize] {
                e.1 *= gains[p];
            }
        }
        Ok(())
    }
}

/// Per-pixel headlight gain (incidence times bounded inverse-square falloff),
/// the same factor [`shade`] applies in [`ShadeMode::Headlight`]. Pixels with
/// no fragment or outside the mask get gain 1 (their operator rows are empty
/// anyway).
pub fn headlight_gains(frag: &FragmentBuffer, pose: &CameraPose) -> Vec<f64> {
    frag.fragments
        .iter()
        .map(|fr| {
            if fr.is_empty() || !fr.in_mask {
                1.0
            } else {
                let v = (fr.world_point - pose.position).normalize();
                let incidence = fr.normal.dot(&v).abs();
                let falloff = (HEADLIGHT_REFERENCE_MM / fr.depth).powi(2).min(1.0);
                incidence * falloff
            }
        })
        .collect()
}

/// Per-pixel depths in millimetres; empty pixels are 0.
pub fn depth_map(frag: &FragmentBuffer) -> Vec<f64> {
    frag.fragments.iter().map(|fr| if fr.is_empty() { 0.0 } else { fr.depth }).collect()
}

/// Write a 16-bit depth PNG plus a sidecar JSON declaring the scale.
pub fn export_depth_png(
    path: &std::path::Path,
    frag: &FragmentBuffer,
    mm_per_unit: f64,
) -> Result<(), crate::img::ImageError> {
    let depths = depth_map(frag);
    crate::img::save_depth_png16(path, frag.width, frag.height, &depths, mm_per_unit)?;
    let sidecar = path.with_extension("json");
    let body = serde_json::json!({ "mm_per_unit": mm_per_unit });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&body).expect("sidecar json"))
        .map_err(|source| crate::img::ImageError::Io {
            path: sidecar.display().to_string(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_pose() -> CameraPose {
        CameraPose { rotation: Matrix3::identity(), position: Point3::origin(), pose_id: 0 }
    }

    fn tri_at_depth(depth: f64, half: f64) -> TriMesh {
        TriMesh::new(
            vec![
                Point3::new(-half, -half, depth),
                Point3::new(3.0 * half, -half, depth),
                Point3::new(-half, 3.0 * half, depth),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn frontoparallel_triangle_covers_mask_at_constant_depth() {
        let mesh = tri_at_depth(10.0, 40.0);
        let intr = Intrinsics::default();
        let frag = rasterize(&mesh, &identity_pose(), &intr);
        let mut covered = 0;
        for y in 0..intr.height {
            for x in 0..intr.width {
                let fr = frag.at(x, y);
                if fr.in_mask {
                    assert_eq!(fr.face_id, 0, "pixel ({x},{y}) not covered");
                    assert!((fr.depth - 10.0).abs() < 1e-4, "depth {}", fr.depth);
                    let s: f64 = fr.bary.iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    assert!(fr.bary.iter().all(|&b| b >= -1e-6));
                    assert!((fr.world_point.z - 10.0).abs() < 1e-9);
                    covered += 1;
                }
            }
        }
        assert!(covered > 50_000, "mask should cover most of a 256x256 frame, got {covered}");
    }

    #[test]
    fn nearer_of_two_parallel_triangles_wins() {
        for flip in [false, true] {
            let mut vertices = Vec::new();
            let mut faces = Vec::new();
            let depths = if flip { [10.0, 5.0] } else { [5.0, 10.0] };
            for d in depths {
                let base = vertices.len() as u32;
                vertices.push(Point3::new(-40.0, -40.0, d));
                vertices.push(Point3::new(120.0, -40.0, d));
                vertices.push(Point3::new(-40.0, 120.0, d));
                faces.push([base, base + 1, base + 2]);
            }
            let mesh = TriMesh::new(vertices, faces).unwrap();
            let frag = rasterize(&mesh, &identity_pose(), &Intrinsics::default());
            let near_face = if flip { 1 } else { 0 };
            for fr in &frag.fragments {
                if !fr.is_empty() {
                    assert_eq!(fr.face_id, near_face);
                    assert!((fr.depth - 5.0).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn identical_depths_keep_the_earlier_face() {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for _ in 0..2 {
            let base = vertices.len() as u32;
            vertices.push(Point3::new(-40.0, -40.0, 10.0));
            vertices.push(Point3::new(120.0, -40.0, 10.0));
            vertices.push(Point3::new(-40.0, 120.0, 10.0));
            faces.push([base, base + 1, base + 2]);
        }
        let mesh = TriMesh::new(vertices, faces).unwrap();
        let frag = rasterize(&mesh, &identity_pose(), &Intrinsics::default());
        for fr in &frag.fragments {
            if !fr.is_empty() {
                assert_eq!(fr.face_id, 0);
            }
        }
    }

    /// Camera looking down +z from inside a long cylinder.
    fn inside_cylinder() -> (TriMesh, CameraPose, Intrinsics) {
        let mesh = fixture::cylinder(5.0, 300.0, 48, 60);
        let pose = CameraPose {
            rotation: Matrix3::identity(),
            position: Point3::new(0.0, 0.0, 30.0),
            pose_id: 0,
        };
        (mesh, pose, Intrinsics::default())
    }

    #[test]
    fn cylinder_interior_walls_have_radial_normals() {
        let (mesh, pose, intr) = inside_cylinder();
        let frag = rasterize(&mesh, &pose, &intr);
        // center pixel: nearest surface (far cap) is beyond the far plane
        let c = frag.at(128, 128);
        assert!(c.is_empty(), "center should be empty, got depth {}", c.depth);
        // mid-radius pixels hit the wall; normals point radially outward
        let mut wall = 0;
        for y in 0..intr.height {
            for x in 0..intr.width {
                let fr = frag.at(x, y);
                if fr.is_empty() || !fr.in_mask {
                    continue;
                }
                assert!(fr.depth > intr.near && fr.depth < intr.far);
                assert!((fr.normal.norm() - 1.0).abs() < 1e-4);
                let radial =
                    Vector3::new(fr.world_point.x, fr.world_point.y, 0.0).normalize();
                let angle = fr.normal.dot(&radial).clamp(-1.0, 1.0).acos().to_degrees();
                assert!(angle < 5.0, "wall normal {angle:.2} degrees off radial");
                wall += 1;
            }
        }
        assert!(wall > 10_000, "expected a broad ring of wall hits, got {wall}");
    }

    #[test]
    fn cylinder_depth_grows_toward_the_vanishing_center() {
        let (mesh, pose, intr) = inside_cylinder();
        let frag = rasterize(&mesh, &pose, &intr);
        let depths = depth_map(&frag);
        // march the central row from the left edge toward the center
        let y = 128;
        let mut prev = 0.0;
        let mut steps = 0;
        for x in 0..128 {
            let d = depths[y * intr.width + x];
            if d > 0.0 && frag.at(x, y).in_mask {
                assert!(
                    d >= prev - 1e-9,
                    "depth should be monotone toward the axis: {prev} then {d} at x={x}"
                );
                prev = d;
                steps += 1;
            }
        }
        assert!(steps > 40, "expected a long monotone wall run, got {steps}");
        // empty pixels are zero in the map
        assert_eq!(depths[128 * intr.width + 128], 0.0);
    }

    #[test]
    fn triangle_straddling_the_camera_is_clipped_cleanly() {
        let mesh = TriMesh::new(
            vec![
                Point3::new(0.0, -5.0, -20.0), // behind the camera
                Point3::new(-30.0, -5.0, 40.0),
                Point3::new(30.0, -5.0, 40.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let intr = Intrinsics::default();
        let frag = rasterize(&mesh, &identity_pose(), &intr);
        let mut covered = 0;
        for fr in &frag.fragments {
            if !fr.is_empty() {
                assert!(fr.depth > intr.near && fr.depth < intr.far);
                assert!(fr.bary.iter().all(|b| b.is_finite()));
                let s: f64 = fr.bary.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
                covered += 1;
            }
        }
        assert!(covered > 100, "the floor plane ahead of the camera should be visible");
        // fully behind the camera: nothing at all
        let behind = TriMesh::new(
            vec![
                Point3::new(0.0, 0.0, -10.0),
                Point3::new(5.0, 0.0, -10.0),
                Point3::new(0.0, 5.0, -10.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let frag = rasterize(&behind, &identity_pose(), &intr);
        assert!(frag.fragments.iter().all(Fragment::is_empty));
    }

    #[test]
    fn rasterize_is_bit_identical_across_thread_counts() {
        let (mesh, pose, intr) = inside_cylinder();
        let reference = rasterize(&mesh, &pose, &intr);
        for threads in [1, 2, 7] {
            let pool =
                rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let got = pool.install(|| rasterize(&mesh, &pose, &intr));
            assert!(got == reference, "{threads}-thread render differs");
        }
    }

    #[test]
    fn unlit_shading_matches_white_and_scales_exactly() {
        let mesh = tri_at_depth(10.0, 40.0);
        let frag = rasterize(&mesh, &identity_pose(), &Intrinsics::default());
        let white = vec![[1.0, 1.0, 1.0]; 3];
        let img = shade(&white, &frag, ShadeMode::Unlit, &identity_pose()).unwrap();
        for y in 0..frag.height {
            for x in 0..frag.width {
                let fr = frag.at(x, y);
                let px = img.pixel(x, y);
                if !fr.is_empty() && fr.in_mask {
                    for ch in px {
                        assert!((ch - 1.0).abs() < 1e-9);
                    }
                } else {
                    assert_eq!(px, [0.0; 3]);
                }
            }
        }
        // halving the colors halves every pixel exactly (power-of-two scale)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let colors: Vec<[f64; 3]> =
            (0..3).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let halved: Vec<[f64; 3]> =
            colors.iter().map(|c| [c[0] * 0.5, c[1] * 0.5, c[2] * 0.5]).collect();
        let a = shade(&colors, &frag, ShadeMode::Unlit, &identity_pose()).unwrap();
        let b = shade(&halved, &frag, ShadeMode::Unlit, &identity_pose()).unwrap();
        for (pa, pb) in a.channels.iter().zip(&b.channels) {
            assert_eq!(pa * 0.5, *pb);
        }
    }

    #[test]
    fn headlight_is_full_strength_at_reference_distance() {
        let mesh = tri_at_depth(HEADLIGHT_REFERENCE_MM, 40.0);
        let pose = identity_pose();
        let frag = rasterize(&mesh, &pose, &Intrinsics::default());
        let white = vec![[1.0, 1.0, 1.0]; 3];
        let img = shade(&white, &frag, ShadeMode::Headlight, &pose).unwrap();
        // center pixel: view ray is the surface normal, depth == reference
        let c = img.pixel(128, 128);
        for ch in c {
            assert!((ch - 1.0).abs() < 1e-5, "center {ch}");
        }
        // every covered pixel obeys the stated formula
        for y in 0..frag.height {
            for x in 0..frag.width {
                let fr = frag.at(x, y);
                if fr.is_empty() || !fr.in_mask {
                    continue;
                }
                let v = (fr.world_point - pose.position).normalize();
                let expect =
                    fr.normal.dot(&v).abs() * (HEADLIGHT_REFERENCE_MM / fr.depth).powi(2).min(1.0);
                let got = img.pixel(x, y)[0];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shade_rejects_short_color_buffers() {
        let mesh = tri_at_depth(10.0, 40.0);
        let frag = rasterize(&mesh, &identity_pose(), &Intrinsics::default());
        let short = vec![[0.5, 0.5, 0.5]; 2];
        assert!(matches!(
            shade(&short, &frag, ShadeMode::Unlit, &identity_pose()),
            Err(RasterError::MissingColors { got: 2, needed: 2 })
        ));
    }

    #[test]
    fn operator_apply_equals_unlit_shade_bitwise() {
        let (mesh, pose, intr) = inside_cylinder();
        let frag = rasterize(&mesh, &pose, &intr);
        let op = build_render_operator(&frag, &mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let colors: Vec<[f64; 3]> =
            (0..mesh.vertex_count()).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let a = op.apply(&colors).unwrap();
        let b = shade(&colors, &frag, ShadeMode::Unlit, &pose).unwrap();
        assert_eq!(a.channels, b.channels, "operator and shader must agree bit for bit");
    }

    #[test]
    fn one_hot_color_extracts_a_vertex_footprint() {
        let (mesh, pose, intr) = inside_cylinder();
        let frag = rasterize(&mesh, &pose, &intr);
        let op = build_render_operator(&frag, &mesh).unwrap();
        let k = 123u32;
        let mut colors = vec![[0.0; 3]; mesh.vertex_count()];
        colors[k as usize] = [1.0, 1.0, 1.0];
        let img = op.apply(&colors).unwrap();
        for y in 0..frag.height {
            for x in 0..frag.width {
                let fr = frag.at(x, y);
                let expect = if !fr.is_empty() && fr.in_mask {
                    fr.vertices
                        .iter()
                        .zip(&fr.bary)
                        .find(|&(&v, _)| v == k)
                        .map(|(_, &w)| w)
                        .unwrap_or(0.0)
                } else {
                    0.0
                };
                assert_eq!(img.pixel(x, y)[0], expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn transpose_satisfies_the_adjoint_identity() {
        let (mesh, pose, intr) = inside_cylinder();
        let frag = rasterize(&mesh, &pose, &intr);
        let op = build_render_operator(&frag, &mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let c: Vec<[f64; 3]> = (0..mesh.vertex_count())
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect();
            let mut g = Image::new(intr.width, intr.height, ColorSpace::RgbLinear);
            for v in g.channels.iter_mut() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
            let ac = op.apply(&c).unwrap();
            let atg = op.apply_transpose(&g);
            let lhs: f64 = ac.channels.iter().zip(&g.channels).map(|(a, b)| a * b).sum();
            let rhs: f64 = c
                .iter()
                .zip(&atg)
                .map(|(ci, gi)| ci[0] * gi[0] + ci[1] * gi[1] + ci[2] * gi[2])
                .sum();
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(
                ((lhs - rhs) / scale).abs() < 1e-10,
                "adjoint identity broken: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn operator_rejects_a_different_mesh() {
        let (mesh, pose, intr) = inside_cylinder();
        let frag = rasterize(&mesh, &pose, &intr);
        let other = fixture::cylinder(5.0, 300.0, 46, 60);
        assert!(matches!(
            build_render_operator(&frag, &other),
            Err(RasterError::MeshMismatch(_))
        ));
    }

    #[test]
    fn two_views_of_the_same_point_shade_alike() {
        let mesh = fixture::cylinder(5.0, 300.0, 48, 60);
        // a smooth color field over the surface
        let colors: Vec<[f64; 3]> = mesh
            .vertices
            .iter()
            .map(|p| {
                [
                    0.5 + 0.3 * (0.05 * p.x).sin() * (0.05 * p.z).cos(),
                    0.5 + 0.3 * (0.05 * p.y).sin(),
                    0.5 + 0.3 * (0.05 * (p.x + p.z)).cos(),
                ]
            })
            .collect();
        let intr = Intrinsics::default();
        let pose_a = CameraPose {
            rotation: Matrix3::identity(),
            position: Point3::new(0.0, 0.0, 30.0),
            pose_id: 0,
        };
        // a second pose displaced and rotated slightly: each pixel lands on
        // nearly the same surface point, so pairs within 0.01 mm are abundant
        let pose_b = CameraPose {
            rotation: nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), 1e-4)
                .into_inner(),
            position: Point3::new(1e-4, 5e-5, 30.0 + 2e-4),
            pose_id: 1,
        };
        let frag_a = rasterize(&mesh, &pose_a, &intr);
        let frag_b = rasterize(&mesh, &pose_b, &intr);
        let img_a = shade(&colors, &frag_a, ShadeMode::Unlit, &pose_a).unwrap();
        let img_b = shade(&colors, &frag_b, ShadeMode::Unlit, &pose_b).unwrap();
        let mut matched = 0;
        for y in 0..intr.height {
            for x in 0..intr.width {
                let (fa, fb) = (frag_a.at(x, y), frag_b.at(x, y));
                if fa.is_empty() || fb.is_empty() || !fa.in_mask || !fb.in_mask {
                    continue;
                }
                if (fa.world_point - fb.world_point).norm() >= 0.01 {
                    continue;
                }
                let ca = img_a.pixel(x, y);
                let cb = img_b.pixel(x, y);
                for ch in 0..3 {
                    assert!(
                        (ca[ch] - cb[ch]).abs() < 1e-3,
                        "views disagree at ({x},{y}): {ca:?} vs {cb:?}"
                    );
                }
                matched += 1;
            }
        }
        assert!(matched > 10_000, "expected many cross-view matches, got {matched}");
    }

    #[test]
    fn depth_export_writes_png_and_sidecar() {
        let mesh = tri_at_depth(10.0, 40.0);
        let frag = rasterize(&mesh, &identity_pose(), &Intrinsics::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth_0.png");
        export_depth_png(&path, &frag, 0.01).unwrap();
        assert!(path.exists());
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("depth_0.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["mm_per_unit"], 0.01);
        // 10 mm at 0.01 mm/unit → raw value 1000
        let img = image::open(&path).unwrap().into_luma16();
        assert_eq!(img.get_pixel(128, 128).0[0], 1000);
    }

    #[test]
    fn folded_headlight_operator_matches_headlight_shading() {
        let (mesh, pose, intr) = inside_cylinder();
        let frag = rasterize(&mesh, &pose, &intr);
        let colors: Vec<[f64; 3]> = (0..mesh.vertex_count())
            .map(|i| {
                let t = i as f64 / mesh.vertex_count() as f64;
                [0.3 + 0.4 * t, 0.8 - 0.5 * t, 0.5]
            })
            .collect();
        let mut op = build_render_operator(&frag, &mesh).unwrap();
        op.scale_rows(&headlight_gains(&frag, &pose)).unwrap();
        let folded = op.apply(&colors).unwrap();
        let shaded = shade(&colors, &frag, ShadeMode::Headlight, &pose).unwrap();
        for (a, b) in folded.channels.iter().zip(&shaded.channels) {
            assert!(
                (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                "folded {a} vs shaded {b}"
            );
        }

        // the folded operator is still an exact linear map with a true adjoint
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let c: Vec<[f64; 3]> = (0..mesh.vertex_count())
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let mut g = Image::new(intr.width, intr.height, ColorSpace::RgbLinear);
        for v in g.channels.iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let ax = op.apply(&c).unwrap();
        let aty = op.apply_transpose(&g);
        let lhs: f64 = ax.channels.iter().zip(&g.channels).map(|(a, b)| a * b).sum();
        let rhs: f64 =
            c.iter().zip(&aty).flat_map(|(a, b)| (0..3).map(move |k| a[k] * b[k])).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-30));

        let wrong = vec![1.0; 5];
        assert!(op.scale_rows(&wrong).is_err());
    }
}

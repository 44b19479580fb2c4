//! Procedural test geometry: capped cylinders, spheres, tori, and a bent tube
//! that stands in for segmented tubular anatomy.
//!
//! Everything here is a pure function of its parameters, so fixtures are
//! byte-identical across runs and platforms.

use nalgebra::{Point3, Unit, UnitQuaternion, Vector3};

use crate::mesh::TriMesh;

/// Swept-tube fixture parameters. The defaults produce a ~60 mm luminal tube
/// with a single smooth bend, sized like small tubular anatomy.
#[derive(Debug, Clone)]
pub struct BentTubeParams {
    /// Tube wall radius (mm).
    pub radius: f64,
    /// Length of the straight run before the bend (mm).
    pub straight_before: f64,
    /// Length of the straight run after the bend (mm).
    pub straight_after: f64,
    /// Centerline radius of the circular bend (mm).
    pub bend_radius: f64,
    /// Bend angle (degrees).
    pub bend_degrees: f64,
    /// Vertices per cross-section ring.
    pub ring_vertices: usize,
    /// Approximate centerline spacing between rings (mm).
    pub axial_step: f64,
}

impl Default for BentTubeParams {
    fn default() -> Self {
        BentTubeParams {
            radius: 5.0,
            straight_before: 25.0,
            straight_after: 25.0,
            bend_radius: 15.0,
            bend_degrees: 70.0,
            ring_vertices: 32,
            axial_step: 1.5,
        }
    }
}

/// Closed tube swept along a straight–arc–straight centerline starting at the
/// origin heading +z, bending toward +x. Ends are capped with center-vertex
/// fans so the mesh is watertight.
pub fn bent_tube(params: &BentTubeParams) -> TriMesh {
    let arc_len = params.bend_radius * params.bend_degrees.to_radians();
    let total = params.straight_before + arc_len + params.straight_after;
    let steps = (total / params.axial_step).ceil().max(2.0) as usize;
    let centers: Vec<(Point3<f64>, Vector3<f64>)> =
        (0..=steps).map(|i| centerline_at(params, total * i as f64 / steps as f64)).collect();
    swept_tube(&centers, params.radius, params.ring_vertices)
}

/// Point and unit tangent of the straight–arc–straight centerline at
/// arclength `s` from the start.
fn centerline_at(params: &BentTubeParams, s: f64) -> (Point3<f64>, Vector3<f64>) {
    let beta = params.bend_degrees.to_radians();
    let arc_len = params.bend_radius * beta;
    if s <= params.straight_before {
        (Point3::new(0.0, 0.0, s), Vector3::z())
    } else if s <= params.straight_before + arc_len {
        // circular arc in the x-z plane, turning from +z toward +x
        let phi = (s - params.straight_before) / params.bend_radius;
        let c = Point3::new(params.bend_radius, 0.0, params.straight_before);
        let p = c + Vector3::new(-phi.cos(), 0.0, phi.sin()) * params.bend_radius;
        (p, Vector3::new(phi.sin(), 0.0, phi.cos()))
    } else {
        let phi = beta;
        let c = Point3::new(params.bend_radius, 0.0, params.straight_before);
        let exit = c + Vector3::new(-phi.cos(), 0.0, phi.sin()) * params.bend_radius;
        let dir = Vector3::new(phi.sin(), 0.0, phi.cos());
        let t = s - params.straight_before - arc_len;
        (exit + dir * t, dir)
    }
}

/// Sweep a circle of `radius` along `centers` (point + tangent per station)
/// with minimally rotating frames, then close both ends with hemispherical
/// caps. Rounded caps keep skeleton end-nodes strictly inside the volume,
/// which flat caps cannot (their ring centroids land exactly on the surface).
fn swept_tube(centers: &[(Point3<f64>, Vector3<f64>)], radius: f64, ring_vertices: usize) -> TriMesh {
    const CAP_RINGS: usize = 2;
    let n = ring_vertices;
    let nu = n as u32;
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut frames: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::with_capacity(centers.len());
    // initial frame: a stable perpendicular to the first tangent, transported
    let t0 = centers[0].1;
    let mut u = pick_perpendicular(&t0);
    let mut prev_t = t0;
    for (c, t) in centers {
        u = transport(&prev_t, t, &u);
        prev_t = *t;
        let v = t.cross(&u).normalize();
        frames.push((u, v));
        for k in 0..n {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            vertices.push(c + (u * a.cos() + v * a.sin()) * radius);
        }
    }
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for ring in 0..centers.len() - 1 {
        let base = (ring * n) as u32;
        let next = base + nu;
        for k in 0..nu {
            let k1 = (k + 1) % nu;
            // wall quad split into two triangles, wound outward
            faces.push([base + k, base + k1, next + k]);
            faces.push([base + k1, next + k1, next + k]);
        }
    }

    // hemispherical cap at one end. `axis` points out of the tube. Rings run
    // from the wall rim (polar 90°) toward the apex.
    let add_cap = |vertices: &mut Vec<Point3<f64>>,
                       faces: &mut Vec<[u32; 3]>,
                       center: Point3<f64>,
                       axis: Vector3<f64>,
                       frame: (Vector3<f64>, Vector3<f64>),
                       rim_base: u32,
                       flip: bool| {
        let (fu, fv) = frame;
        let mut ring_starts: Vec<u32> = vec![rim_base];
        for j in 1..=CAP_RINGS {
            let polar = std::f64::consts::FRAC_PI_2 * (1.0 - j as f64 / (CAP_RINGS + 1) as f64);
            let start = vertices.len() as u32;
            ring_starts.push(start);
            for k in 0..n {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let w = fu * a.cos() + fv * a.sin();
                vertices.push(center + w * (radius * polar.sin()) + axis * (radius * polar.cos()));
            }
        }
        let apex = vertices.len() as u32;
        vertices.push(center + axis * radius);
        let wind = |faces: &mut Vec<[u32; 3]>, a: u32, b: u32, c: u32| {
            if flip {
                faces.push([a, c, b]);
            } else {
                faces.push([a, b, c]);
            }
        };
        for j in 0..CAP_RINGS {
            let (lo, hi) = (ring_starts[j], ring_starts[j + 1]);
            for k in 0..nu {
                let k1 = (k + 1) % nu;
                wind(&mut *faces, lo + k, lo + k1, hi + k1);
                wind(&mut *faces, lo + k, hi + k1, hi + k);
            }
        }
        let top = ring_starts[CAP_RINGS];
        for k in 0..nu {
            let k1 = (k + 1) % nu;
            wind(&mut *faces, apex, top + k, top + k1);
        }
    };

    let last_base = ((centers.len() - 1) * n) as u32;
    let (c_end, t_end) = centers[centers.len() - 1];
    add_cap(&mut vertices, &mut faces, c_end, t_end, frames[centers.len() - 1], last_base, false);
    let (c_start, t_start) = centers[0];
    add_cap(&mut vertices, &mut faces, c_start, -t_start, frames[0], 0, true);

    TriMesh::new(vertices, faces).expect("procedural tube is valid")
}

fn pick_perpendicular(t: &Vector3<f64>) -> Vector3<f64> {
    let candidate = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    (candidate - t * candidate.dot(t)).normalize()
}

/// Minimal rotation carrying `from` onto `to`, applied to `u`.
fn transport(from: &Vector3<f64>, to: &Vector3<f64>, u: &Vector3<f64>) -> Vector3<f64> {
    match UnitQuaternion::rotation_between(from, to) {
        Some(q) => q * u,
        None => *u, // antiparallel tangents never occur on our gentle curves
    }
}

/// Closed cylinder along +z from 0 to `length`, capped with center-vertex
/// fans. `axial_segments` wall bands give rings every `length/axial_segments`.
pub fn cylinder(radius: f64, length: f64, ring_vertices: usize, axial_segments: usize) -> TriMesh {
    let centers: Vec<(Point3<f64>, Vector3<f64>)> = (0..=axial_segments)
        .map(|i| {
            (Point3::new(0.0, 0.0, length * i as f64 / axial_segments as f64), Vector3::z())
        })
        .collect();
    swept_tube(&centers, radius, ring_vertices)
}

/// UV sphere centered at the origin, poles on the z axis.
pub fn sphere(radius: f64, stacks: usize, slices: usize) -> TriMesh {
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let south = 0u32;
    vertices.push(Point3::new(0.0, 0.0, -radius));
    for i in 1..stacks {
        let polar = std::f64::consts::PI * i as f64 / stacks as f64;
        let z = -radius * polar.cos();
        let r = radius * polar.sin();
        for j in 0..slices {
            let az = 2.0 * std::f64::consts::PI * j as f64 / slices as f64;
            vertices.push(Point3::new(r * az.cos(), r * az.sin(), z));
        }
    }
    let north = vertices.len() as u32;
    vertices.push(Point3::new(0.0, 0.0, radius));
    let ring = |i: usize, j: usize| -> u32 { 1 + ((i - 1) * slices + j % slices) as u32 };
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for j in 0..slices {
        faces.push([south, ring(1, j + 1), ring(1, j)]);
        faces.push([north, ring(stacks - 1, j), ring(stacks - 1, j + 1)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            faces.push([ring(i, j), ring(i, j + 1), ring(i + 1, j)]);
            faces.push([ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j)]);
        }
    }
    TriMesh::new(vertices, faces).expect("procedural sphere is valid")
}

/// Torus around the z axis: major circle of `major_radius` in the x-y plane,
/// tube of `minor_radius`.
pub fn torus(
    major_radius: f64,
    minor_radius: f64,
    major_segments: usize,
    minor_segments: usize,
) -> TriMesh {
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    for i in 0..major_segments {
        let a = 2.0 * std::f64::consts::PI * i as f64 / major_segments as f64;
        let center = Vector3::new(major_radius * a.cos(), major_radius * a.sin(), 0.0);
        let radial = Vector3::new(a.cos(), a.sin(), 0.0);
        for j in 0..minor_segments {
            let b = 2.0 * std::f64::consts::PI * j as f64 / minor_segments as f64;
            let p = center + radial * (minor_radius * b.cos()) + Vector3::z() * (minor_radius * b.sin());
            vertices.push(Point3::from(p));
        }
    }
    let idx = |i: usize, j: usize| -> u32 {
        ((i % major_segments) * minor_segments + j % minor_segments) as u32
    };
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for i in 0..major_segments {
        for j in 0..minor_segments {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriMesh::new(vertices, faces).expect("procedural torus is valid")
}

/// Rotation that is the identity when `from` and `to` already agree; used by
/// pose construction as well, so exposed crate-wide.
pub(crate) fn minimal_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(from, to).unwrap_or_else(|| {
        // antiparallel: rotate half a turn about any perpendicular axis
        UnitQuaternion::from_axis_angle(
            &Unit::new_normalize(pick_perpendicular(from)),
            std::f64::consts::PI,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bent_tube_is_closed_and_contains_its_centerline() {
        let params = BentTubeParams::default();
        let mesh = bent_tube(&params);
        assert!(mesh.edge_face_counts().values().all(|&c| c == 2), "tube must be watertight");
        for s in [5.0, 20.0, 40.0, 60.0] {
            let (p, _) = centerline_at(&params, s);
            assert!(mesh.contains_point(&p), "centerline point at s={s} outside tube");
        }
        // a point well off to the side is outside
        assert!(!mesh.contains_point(&Point3::new(-50.0, 0.0, 0.0)));
    }

    #[test]
    fn cylinder_is_closed_with_expected_counts() {
        let mesh = cylinder(5.0, 100.0, 24, 10);
        // 11 wall rings + two hemispherical caps of 2 rings + apex each
        assert_eq!(mesh.vertex_count(), 24 * 11 + 2 * (2 * 24 + 1));
        assert_eq!(mesh.face_count(), 24 * 10 * 2 + 2 * (2 * 48 + 24));
        assert!(mesh.edge_face_counts().values().all(|&c| c == 2));
        assert!(mesh.contains_point(&Point3::new(0.0, 0.0, 50.0)));
        assert!(mesh.contains_point(&Point3::new(0.0, 0.0, -3.0)), "inside the start cap");
        assert!(!mesh.contains_point(&Point3::new(0.0, 0.0, 106.0)));
    }

    #[test]
    fn sphere_is_closed_and_round() {
        let mesh = sphere(10.0, 12, 16);
        assert!(mesh.edge_face_counts().values().all(|&c| c == 2));
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!((v.coords.norm() - 10.0).abs() < 1e-9);
            assert!(n.dot(&v.coords.normalize()) > 0.9, "sphere normal flipped at {v:?}");
        }
        assert!(mesh.contains_point(&Point3::new(0.0, 0.0, 0.0)));
    }

    #[test]
    fn torus_is_closed_with_genus_one_euler_characteristic() {
        let mesh = torus(20.0, 3.0, 36, 12);
        assert!(mesh.edge_face_counts().values().all(|&c| c == 2));
        let v = mesh.vertex_count() as i64;
        let e = mesh.edge_face_counts().len() as i64;
        let f = mesh.face_count() as i64;
        assert_eq!(v - e + f, 0, "torus Euler characteristic");
        for (p, n) in mesh.vertices.iter().zip(&mesh.normals) {
            let ring_center = Vector3::new(p.x, p.y, 0.0).normalize() * 20.0;
            let outward = (p.coords - ring_center).normalize();
            assert!(n.dot(&outward) > 0.9, "torus normal flipped at {p:?}");
        }
    }

    #[test]
    fn tube_normals_point_outward() {
        // expected outward direction: away from the nearest centerline point
        let mesh = cylinder(5.0, 20.0, 16, 4);
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            let q = Point3::new(0.0, 0.0, v.z.clamp(0.0, 20.0));
            let outward = (v - q).normalize();
            assert!(n.dot(&outward) > 0.3, "normal flipped at {v:?}: {n:?}");
        }
    }
}

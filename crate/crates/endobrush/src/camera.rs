//! Camera poses and intrinsics, pose construction along a skeleton, and
//! smooth trajectory interpolation.
//!
//! A pose's rotation is camera-to-world with columns (right, up, forward);
//! world points map into camera space via the inverse. Frames along a path
//! keep their up vector by minimal-rotation transport, so the camera never
//! rolls unexpectedly through bends.

use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::fixture::minimal_rotation;
use crate::skeleton::SkeletonGraph;

#[derive(Debug, thiserror::Error)]
pub enum CameraError {
    #[error("station list is empty")]
    NoStations,
    #[error("station {station} (node {node}) has no incident skeleton edge")]
    IsolatedNode { station: usize, node: u32 },
    #[error("station index {node} out of range for {nodes} skeleton nodes")]
    StationOutOfRange { node: u32, nodes: usize },
    #[error("trajectory needs at least 2 stations, got {0}")]
    TooFewStations(usize),
    #[error("frames_per_segment must be at least 1")]
    NoFrames,
    #[error("intrinsics invalid: {0}")]
    BadIntrinsics(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("pose json: {0}")]
    Format(String),
}

/// Rigid camera pose: camera-to-world rotation (columns right/up/forward)
/// and position in world millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub position: Point3<f64>,
    pub pose_id: u32,
}

impl CameraPose {
    pub fn right(&self) -> Vector3<f64> {
        self.rotation.column(0).into()
    }

    pub fn up(&self) -> Vector3<f64> {
        self.rotation.column(1).into()
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }

    /// World point expressed in camera coordinates (x right, y up, z forward).
    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p - self.position))
    }

    /// Camera-space point back in world coordinates.
    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.position.coords)
    }

    /// Orthonormality and handedness defect, for validation.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation;
        let mut err = (gram - Matrix3::identity()).abs().max();
        err = err.max((self.rotation.determinant() - 1.0).abs());
        err
    }
}

/// Pinhole intrinsics shared by every rendered view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    /// Vertical field of view in degrees.
    pub vertical_fov: f64,
    /// Near clip distance (mm).
    pub near: f64,
    /// Far clip distance (mm).
    pub far: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics { width: 256, height: 256, vertical_fov: 70.0, near: 0.1, far: 100.0 }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::BadIntrinsics(format!(
                "image size {}x{} must be positive",
                self.width, self.height
            )));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < 180.0) {
            return Err(CameraError::BadIntrinsics(format!(
                "vertical fov {} must lie in (0, 180)",
                self.vertical_fov
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(CameraError::BadIntrinsics(format!(
                "need 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    /// Focal length in pixels (square pixels: fx = fy).
    pub fn focal_px(&self) -> f64 {
        self.height as f64 / 2.0 / (self.vertical_fov.to_radians() / 2.0).tan()
    }

    /// Principal point at the image center, pixel centers on integer coords.
    pub fn principal(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

/// Build an endoscope pose at each station: positioned on the node, looking
/// along the skeleton toward greater depth, with an up vector transported
/// station to station.
pub fn build_poses(
    skeleton: &SkeletonGraph,
    stations: &[u32],
) -> Result<Vec<CameraPose>, CameraError> {
    if stations.is_empty() {
        return Err(CameraError::NoStations);
    }
    let mut poses = Vec::with_capacity(stations.len());
    let mut up: Option<Vector3<f64>> = None;
    let mut prev_forward: Option<Vector3<f64>> = None;
    for (si, &node) in stations.iter().enumerate() {
        if node as usize >= skeleton.node_count() {
            return Err(CameraError::StationOutOfRange { node, nodes: skeleton.node_count() });
        }
        let forward = station_forward(skeleton, node)
            .ok_or(CameraError::IsolatedNode { station: si, node })?;
        let new_up = match (up, prev_forward) {
            (Some(u), Some(pf)) => {
                let transported = minimal_rotation(&pf, &forward) * u;
                // re-orthogonalize to stop numerical drift from accumulating
                (transported - forward * transported.dot(&forward)).normalize()
            }
            _ => initial_up(&forward),
        };
        up = Some(new_up);
        prev_forward = Some(forward);
        let right = new_up.cross(&forward);
        let rotation = Matrix3::from_columns(&[right, new_up, forward]);
        poses.push(CameraPose {
            rotation,
            position: skeleton.nodes[node as usize],
            pose_id: si as u32,
        });
    }
    Ok(poses)
}

/// Unit vector from the node along its skeleton segment toward greater
/// geodesic depth. At the deepest tip the direction continues away from the
/// shallower neighbor, so the camera keeps facing down the lumen.
fn station_forward(skeleton: &SkeletonGraph, node: u32) -> Option<Vector3<f64>> {
    let here = skeleton.nodes[node as usize];
    let depth_here = skeleton.depth[node as usize];
    let mut best: Option<u32> = None;
    for &nb in skeleton.neighbors(node) {
        if (skeleton.nodes[nb as usize] - here).norm() < 1e-9 {
            continue; // degenerate zero-length segment gives no direction
        }
        best = Some(match best {
            None => nb,
            Some(cur) => {
                let (dc, dn) = (skeleton.depth[cur as usize], skeleton.depth[nb as usize]);
                // deepest neighbor wins; ties go to the lower node index
                if dn > dc || (dn == dc && nb < cur) {
                    nb
                } else {
                    cur
                }
            }
        });
    }
    let best = best?;
    let dir = skeleton.nodes[best as usize] - here;
    if skeleton.depth[best as usize] > depth_here {
        Some(dir.normalize())
    } else {
        Some(-dir.normalize())
    }
}

/// World +z projected orthogonal to forward; falls back to world +y when
/// forward is (anti)parallel to +z.
fn initial_up(forward: &Vector3<f64>) -> Vector3<f64> {
    let proj = Vector3::z() - forward * forward.z;
    if proj.norm() >= 1e-6 {
        proj.normalize()
    } else {
        let proj_y = Vector3::y() - forward * forward.y;
        proj_y.normalize()
    }
}

/// Smooth fly-through: positions follow a centripetal Catmull-Rom spline
/// through the station points, orientations follow spherical-linear
/// interpolation between station rotations. Produces
/// `(stations-1)*frames_per_segment + 1` poses.
pub fn interpolate_trajectory(
    skeleton: &SkeletonGraph,
    stations: &[u32],
    frames_per_segment: usize,
) -> Result<Vec<CameraPose>, CameraError> {
    if stations.len() < 2 {
        return Err(CameraError::TooFewStations(stations.len()));
    }
    if frames_per_segment == 0 {
        return Err(CameraError::NoFrames);
    }
    let keys = build_poses(skeleton, stations)?;
    let points: Vec<Point3<f64>> = keys.iter().map(|p| p.position).collect();
    let quats: Vec<UnitQuaternion<f64>> = keys
        .iter()
        .map(|p| UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation)))
        .collect();

    let mut out = Vec::with_capacity((stations.len() - 1) * frames_per_segment + 1);
    for seg in 0..stations.len() - 1 {
        // virtual endpoints by reflection at the ends of the chain
        let p1 = points[seg];
        let p2 = points[seg + 1];
        let p0 = if seg == 0 { Point3::from(p1.coords * 2.0 - p2.coords) } else { points[seg - 1] };
        let p3 = if seg + 2 < points.len() {
            points[seg + 2]
        } else {
            Point3::from(p2.coords * 2.0 - p1.coords)
        };
        for f in 0..frames_per_segment {
            let t = f as f64 / frames_per_segment as f64;
            let position = catmull_rom_centripetal(&p0, &p1, &p2, &p3, t);
            let rotation = slerp_shortest(&quats[seg], &quats[seg + 1], t).to_rotation_matrix();
            out.push(CameraPose {
                rotation: rotation.into_inner(),
                position,
                pose_id: out.len() as u32,
            });
        }
    }
    let last = keys.last().expect("at least two stations");
    out.push(CameraPose { pose_id: out.len() as u32, ..*last });
    Ok(out)
}

/// Centripetal (α = 1/2) Catmull-Rom segment between `p1` and `p2`,
/// evaluated by the recursive pyramid so the curve passes through both.
fn catmull_rom_centripetal(
    p0: &Point3<f64>,
    p1: &Point3<f64>,
    p2: &Point3<f64>,
    p3: &Point3<f64>,
    t: f64,
) -> Point3<f64> {
    let knot = |a: &Point3<f64>, b: &Point3<f64>, prev: f64| prev + (b - a).norm().sqrt().max(1e-9);
    let t0 = 0.0;
    let t1 = knot(p0, p1, t0);
    let t2 = knot(p1, p2, t1);
    let t3 = knot(p2, p3, t2);
    let u = t1 + (t2 - t1) * t;

    let lerp = |a: Point3<f64>, b: Point3<f64>, ta: f64, tb: f64| -> Point3<f64> {
        let w = (u - ta) / (tb - ta);
        Point3::from(a.coords * (1.0 - w) + b.coords * w)
    };
    let a1 = lerp(*p0, *p1, t0, t1);
    let a2 = lerp(*p1, *p2, t1, t2);
    let a3 = lerp(*p2, *p3, t2, t3);
    let b1 = lerp(a1, a2, t0, t2);
    let b2 = lerp(a2, a3, t1, t3);
    lerp(b1, b2, t1, t2)
}

/// Slerp along the shorter arc (quaternion double-cover resolved by sign).
fn slerp_shortest(
    a: &UnitQuaternion<f64>,
    b: &UnitQuaternion<f64>,
    t: f64,
) -> UnitQuaternion<f64> {
    let mut b = *b;
    if a.coords.dot(&b.coords) < 0.0 {
        b = UnitQuaternion::new_unchecked(-b.into_inner());
    }
    a.try_slerp(&b, t, 1e-12).unwrap_or(*a)
}

// ---- pose list JSON ----

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    pose_id: u32,
    /// Row-major 3x3 camera-to-world rotation.
    rotation: [f64; 9],
    position: [f64; 3],
}

pub fn save_poses(poses: &[CameraPose], path: &Path) -> Result<(), CameraError> {
    let records: Vec<PoseRecord> = poses
        .iter()
        .map(|p| PoseRecord {
            pose_id: p.pose_id,
            rotation: [
                p.rotation[(0, 0)],
                p.rotation[(0, 1)],
                p.rotation[(0, 2)],
                p.rotation[(1, 0)],
                p.rotation[(1, 1)],
                p.rotation[(1, 2)],
                p.rotation[(2, 0)],
                p.rotation[(2, 1)],
                p.rotation[(2, 2)],
            ],
            position: [p.position.x, p.position.y, p.position.z],
        })
        .collect();
    let text = serde_json::to_string_pretty(&records).expect("poses serialize");
    std::fs::write(path, text)
        .map_err(|source| CameraError::Io { path: path.display().to_string(), source })
}

pub fn load_poses(path: &Path) -> Result<Vec<CameraPose>, CameraError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| CameraError::Io { path: path.display().to_string(), source })?;
    let records: Vec<PoseRecord> = serde_json::from_str(&text)
        .map_err(|e| CameraError::Format(format!("{}: {e}", path.display())))?;
    Ok(records
        .into_iter()
        .map(|r| CameraPose {
            rotation: Matrix3::new(
                r.rotation[0],
                r.rotation[1],
                r.rotation[2],
                r.rotation[3],
                r.rotation[4],
                r.rotation[5],
                r.rotation[6],
                r.rotation[7],
                r.rotation[8],
            ),
            position: Point3::new(r.position[0], r.position[1], r.position[2]),
            pose_id: r.pose_id,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::skeleton::{sample_camera_stations, skeletonize, Seed, SkeletonGraph};

    fn chain(points: &[[f64; 3]]) -> SkeletonGraph {
        let nodes: Vec<Point3<f64>> =
            points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect();
        let edges: Vec<(u32, u32)> = (1..points.len() as u32).map(|i| (i - 1, i)).collect();
        SkeletonGraph::new(nodes, edges, vec![1.0; points.len()]).unwrap()
    }

    #[test]
    fn straight_chain_along_x_keeps_world_up() {
        let skel = chain(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0]]);
        let poses = build_poses(&skel, &[0, 1, 2]).unwrap();
        for p in &poses {
            assert!((p.forward() - Vector3::x()).norm() < 1e-6, "forward {:?}", p.forward());
            assert!((p.up() - Vector3::z()).norm() < 1e-6, "up {:?}", p.up());
            assert!(p.orthonormality_error() < 1e-6);
        }
    }

    #[test]
    fn forward_along_z_falls_back_to_y_up() {
        let skel = chain(&[[0.0, 0.0, 0.0], [0.0, 0.0, 10.0]]);
        let poses = build_poses(&skel, &[0]).unwrap();
        assert!((poses[0].forward() - Vector3::z()).norm() < 1e-12);
        assert!((poses[0].up() - Vector3::y()).norm() < 1e-12);
        assert!(poses[0].orthonormality_error() < 1e-6);
    }

    #[test]
    fn up_survives_a_right_angle_bend() {
        let skel = chain(&[
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [20.0, 0.0, 0.0],
            [20.0, 10.0, 0.0],
            [20.0, 20.0, 0.0],
        ]);
        let poses = build_poses(&skel, &[0, 1, 2, 3, 4]).unwrap();
        for p in &poses {
            assert!(p.up().norm() - 1.0 < 1e-6);
            assert!(p.up().dot(&p.forward()).abs() < 1e-6, "up not orthogonal after bend");
            assert!(p.orthonormality_error() < 1e-6);
        }
        // before the bend the camera looks +x, after it +y; up stays +z
        assert!((poses[0].forward() - Vector3::x()).norm() < 1e-9);
        assert!((poses[4].forward() - Vector3::y()).norm() < 1e-9);
        assert!((poses[4].up() - Vector3::z()).norm() < 1e-9);
    }

    #[test]
    fn deepest_station_faces_away_from_shallower_neighbor() {
        let skel = chain(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0]]);
        let poses = build_poses(&skel, &[2]).unwrap();
        assert!((poses[0].forward() - Vector3::x()).norm() < 1e-9);
    }

    #[test]
    fn trajectory_endpoint_cases() {
        let skel = chain(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let two = interpolate_trajectory(&skel, &[0, 1], 1).unwrap();
        assert_eq!(two.len(), 2);
        let keys = build_poses(&skel, &[0, 1]).unwrap();
        for (a, b) in two.iter().zip(&keys) {
            assert!((a.position - b.position).norm() < 1e-9);
            assert!((a.rotation - b.rotation).abs().max() < 1e-9);
        }
    }

    #[test]
    fn trajectory_is_dense_and_monotone_between_two_stations() {
        let skel = chain(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let poses = interpolate_trajectory(&skel, &[0, 1], 10).unwrap();
        assert_eq!(poses.len(), 11);
        let mut prev_x = -1e-9;
        for w in poses.windows(2) {
            let step = (w[1].position - w[0].position).norm();
            assert!(step <= 2.0, "step {step} too large");
            assert!(w[1].position.x > prev_x, "not monotone along the segment");
            prev_x = w[1].position.x;
        }
        assert!((poses[0].position - Point3::origin()).norm() < 1e-9);
        assert!((poses[10].position - Point3::new(10.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn identical_orientations_stay_fixed_under_slerp() {
        let skel = chain(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0]]);
        let poses = interpolate_trajectory(&skel, &[0, 1, 2], 5).unwrap();
        assert_eq!(poses.len(), 11);
        let r0 = poses[0].rotation;
        for p in &poses {
            assert!((p.rotation - r0).abs().max() < 1e-6);
            assert!(p.orthonormality_error() < 1e-6);
        }
    }

    #[test]
    fn trajectory_rotations_stay_orthonormal_through_bends() {
        let mesh = fixture::bent_tube(&fixture::BentTubeParams::default());
        let skel = skeletonize(&mesh, Seed::Auto, 5.0).unwrap();
        let stations = sample_camera_stations(&skel, 6, 0).unwrap();
        // order stations along the lumen so the path is sensible
        let mut ordered = stations.clone();
        ordered.sort_by(|&a, &b| skel.depth[a as usize].total_cmp(&skel.depth[b as usize]));
        let poses = interpolate_trajectory(&skel, &ordered, 7).unwrap();
        assert_eq!(poses.len(), (ordered.len() - 1) * 7 + 1);
        for p in &poses {
            assert!(p.orthonormality_error() < 1e-6, "defect {}", p.orthonormality_error());
        }
    }

    #[test]
    fn station_poses_sit_inside_the_tube() {
        let mesh = fixture::bent_tube(&fixture::BentTubeParams::default());
        let skel = skeletonize(&mesh, Seed::Auto, 5.0).unwrap();
        let stations = sample_camera_stations(&skel, 8, 0).unwrap();
        let poses = build_poses(&skel, &stations).unwrap();
        for p in &poses {
            assert!(
                mesh.contains_point(&p.position),
                "pose {} at {:?} is outside the mesh",
                p.pose_id,
                p.position
            );
        }
    }

    #[test]
    fn pose_json_round_trips_bit_exactly() {
        let skel = chain(&[[0.0, 0.0, 0.0], [10.0, 2.0, 1.0], [18.0, 7.0, 3.0]]);
        let poses = interpolate_trajectory(&skel, &[0, 1, 2], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.json");
        save_poses(&poses, &p).unwrap();
        let back = load_poses(&p).unwrap();
        assert_eq!(poses.len(), back.len());
        for (a, b) in poses.iter().zip(&back) {
            assert_eq!(a.pose_id, b.pose_id);
            assert_eq!(a.position, b.position);
            assert_eq!(a.rotation, b.rotation);
        }
    }

    #[test]
    fn isolated_station_is_an_error() {
        // a degenerate two-node graph where both nodes coincide
        let g = SkeletonGraph::new(
            vec![Point3::origin(), Point3::origin()],
            vec![(0, 1)],
            vec![1.0, 1.0],
        )
        .unwrap();
        match build_poses(&g, &[0]) {
            Err(CameraError::IsolatedNode { station: 0, node: 0 }) => {}
            other => panic!("expected isolated-node error, got {other:?}"),
        }
    }

    #[test]
    fn default_intrinsics_validate() {
        let intr = Intrinsics::default();
        intr.validate().unwrap();
        assert_eq!(intr.width, 256);
        assert_eq!(intr.height, 256);
        // 128 / tan(35 deg)
        assert!((intr.focal_px() - 128.0 / 35f64.to_radians().tan()).abs() < 1e-12);
        assert!((intr.focal_px() - 182.803).abs() < 1e-3);
        let bad = Intrinsics { near: 0.0, ..intr };
        assert!(bad.validate().is_err());
    }
}

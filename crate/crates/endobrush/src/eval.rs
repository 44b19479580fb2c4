//! Feature-consistency evaluation over rendered trajectories.
//!
//! Frames pair a rendered image with its fragment buffer, so every detected
//! corner lifts to the 3D surface point under it. Matches between frames `k`
//! apart are verified by 3D distance: a texture that stays attached to the
//! surface produces matches whose lifted points coincide, while view-dependent
//! shading produces matches that verify at the wrong depth. Also exports
//! frame/pose/depth bundles for external structure-from-motion tools.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use nalgebra::{Point3, Vector3};

use crate::camera::{load_poses, save_poses, CameraError, CameraPose, Intrinsics};
use crate::features::{
    describe, detect_masked, match_descriptors, Descriptor, DescriptorLayout, DetectorParams,
    FeatureError, Gray, ImageKeypoint, DEFAULT_DESCRIPTOR_SEED,
};
use crate::img::{load_depth_png16, save_depth_png16, Image, ImageError};
use crate::raster::{Fragment, FragmentBuffer, EMPTY};

/// Format tag of the exported frame/pose/depth bundle.
pub const BUNDLE_SCHEMA: &str = "endobrush-sfm-bundle/1";

/// Millimetres per unit in exported 16-bit depth maps (0.01 mm resolution,
/// 655 mm range).
pub const DEPTH_MM_PER_UNIT: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("trajectory of {frames} frames cannot form pairs {k} apart")]
    TrajectoryTooShort { frames: usize, k: usize },
    #[error("frame {index}: image is {img_w}x{img_h} but fragments are {frag_w}x{frag_h}")]
    FrameMismatch { index: usize, img_w: usize, img_h: usize, frag_w: usize, frag_h: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bundle {path} is malformed: {message}")]
    Bundle { path: String, message: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// Evaluation settings; all invented defaults, all configurable.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    pub detector: DetectorParams,
    pub descriptor_seed: u64,
    /// Hamming acceptance threshold out of 256.
    pub max_hamming: u32,
    /// 3D verification tolerance in mm.
    pub tol_mm: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            detector: DetectorParams::default(),
            descriptor_seed: DEFAULT_DESCRIPTOR_SEED,
            max_hamming: 80,
            tol_mm: 1.0,
        }
    }
}

/// A corner lifted to the surface: image position plus the 3D point of the
/// fragment under it. `valid_3d` is false on uncovered pixels, whose matches
/// always count as incorrect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
    /// Radians in [−π, π).
    pub orientation: f64,
    pub world_point: nalgebra::Point3<f64>,
    pub valid_3d: bool,
}

/// One trajectory frame ready for evaluation.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: Gray,
    pub fragments: FragmentBuffer,
}

impl Frame {
    pub fn new(rendered: &Image, fragments: FragmentBuffer) -> Frame {
        Frame { image: Gray::from_image(rendered), fragments }
    }
}

/// Keypoints with aligned descriptors for one frame.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

fn coverage_mask(frag: &FragmentBuffer) -> Vec<bool> {
    frag.fragments.iter().map(|f| !f.is_empty() && f.in_mask).collect()
}

fn lift(kp: &ImageKeypoint, frag: &FragmentBuffer) -> Keypoint {
    let f = frag.at(kp.xi(), kp.yi());
    let valid_3d = !f.is_empty() && f.in_mask;
    Keypoint {
        x: kp.x,
        y: kp.y,
        response: kp.response,
        orientation: kp.orientation,
        world_point: if valid_3d {
            f.world_point
        } else {
            nalgebra::Point3::origin()
        },
        valid_3d,
    }
}

/// Detect (mask-restricted to covered pixels), orient, describe, and lift
/// one frame's features.
pub fn extract_features(frame: &Frame, params: &EvalParams) -> Result<FrameFeatures, EvalError> {
    let (iw, ih) = (frame.image.width, frame.image.height);
    let (fw, fh) = (frame.fragments.width, frame.fragments.height);
    if iw != fw || ih != fh {
        return Err(EvalError::FrameMismatch {
            index: 0,
            img_w: iw,
            img_h: ih,
            frag_w: fw,
            frag_h: fh,
        });
    }
    let mask = coverage_mask(&frame.fragments);
    let detected = detect_masked(&frame.image, &params.detector, Some(&mask))?;
    let layout = DescriptorLayout::seeded(params.descriptor_seed);
    let described = describe(&frame.image, &detected, &layout);
    let mut keypoints = Vec::with_capacity(described.len());
    let mut descriptors = Vec::with_capacity(described.len());
    for (ki, d) in described {
        keypoints.push(lift(&detected[ki], &frame.fragments));
        descriptors.push(d);
    }
    Ok(FrameFeatures { keypoints, descriptors })
}

/// Verified matching outcome for one frame pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FramePair {
    /// Index of the earlier frame; the later frame is `frame_i + k`.
    pub frame_i: usize,
    pub total: usize,
    pub correct: usize,
}

impl FramePair {
    /// Percent of matches that verified; 0 when there were none.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

/// Aggregated matching statistics for one frame gap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    pub k: usize,
    pub pairs: Vec<FramePair>,
    pub total_matches: usize,
    pub correct_matches: usize,
}

impl MatchReport {
    /// Trajectory-level accuracy: 100 · Σcorrect / Σtotal.
    pub fn accuracy(&self) -> f64 {
        if self.total_matches == 0 {
            0.0
        } else {
            100.0 * self.correct_matches as f64 / self.total_matches as f64
        }
    }

    /// Mean of the per-pair accuracies (pairs with no matches count as 0).
    pub fn mean_pair_accuracy(&self) -> f64 {
        if self.pairs.is_empty() {
            0.0
        } else {
            self.pairs.iter().map(FramePair::accuracy).sum::<f64>() / self.pairs.len() as f64
        }
    }
}

/// Count how many matched keypoint pairs verify in 3D: correct iff both ends
/// are on covered pixels and their lifted points are within `tol_mm`.
pub fn verify_matches(
    pairs: &[(usize, usize)],
    a: &[Keypoint],
    b: &[Keypoint],
    tol_mm: f64,
) -> (usize, usize) {
    let correct = pairs
        .iter()
        .filter(|&&(i, j)| {
            let (ka, kb) = (&a[i], &b[j]);
            ka.valid_3d && kb.valid_3d && (ka.world_point - kb.world_point).norm() < tol_mm
        })
        .count();
    (pairs.len(), correct)
}

/// Match and verify every frame pair `(i, i+k)` from precomputed features.
/// `k = 0` pairs each frame with itself (a self-consistency debug mode).
pub fn orb_k_from_features(
    features: &[FrameFeatures],
    k: usize,
    params: &EvalParams,
) -> Result<MatchReport, EvalError> {
    if features.is_empty() || (k > 0 && features.len() <= k) {
        return Err(EvalError::TrajectoryTooShort { frames: features.len(), k });
    }
    let last = if k == 0 { features.len() } else { features.len() - k };
    let pairs: Vec<FramePair> = (0..last)
        .into_par_iter()
        .map(|i| {
            let (fa, fb) = (&features[i], &features[i + k]);
            let matched = match_descriptors(&fa.descriptors, &fb.descriptors, params.max_hamming);
            let (total, correct) =
                verify_matches(&matched, &fa.keypoints, &fb.keypoints, params.tol_mm);
            FramePair { frame_i: i, total, correct }
        })
        .collect();
    let total_matches = pairs.iter().map(|p| p.total).sum();
    let correct_matches = pairs.iter().map(|p| p.correct).sum();
    Ok(MatchReport { k, pairs, total_matches, correct_matches })
}

/// Extract features for every frame (in parallel, order preserved) and run
/// [`orb_k_from_features`].
pub fn orb_k(frames: &[Frame], k: usize, params: &EvalParams) -> Result<MatchReport, EvalError> {
    if frames.is_empty() || (k > 0 && frames.len() <= k) {
        return Err(EvalError::TrajectoryTooShort { frames: frames.len(), k });
    }
    let features = extract_all_features(frames, params)?;
    orb_k_from_features(&features, k, params)
}

/// Per-frame features for a whole trajectory, computed in parallel with
/// deterministic order.
pub fn extract_all_features(
    frames: &[Frame],
    params: &EvalParams,
) -> Result<Vec<FrameFeatures>, EvalError> {
    frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            extract_features(f, params).map_err(|e| match e {
                EvalError::FrameMismatch { img_w, img_h, frag_w, frag_h, .. } => {
                    EvalError::FrameMismatch { index: i, img_w, img_h, frag_w, frag_h }
                }
                other => other,
            })
        })
        .collect()
}

/// Write reports as CSV: one row per frame pair plus one `all` aggregate row
/// per report. Columns: `k,frame_i,total,correct,accuracy`.
pub fn write_reports_csv(path: &Path, reports: &[MatchReport]) -> Result<(), EvalError> {
    let mut out = String::from("k,frame_i,total,correct,accuracy\n");
    for r in reports {
        for p in &r.pairs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.k,
                p.frame_i,
                p.total,
                p.correct,
                p.accuracy()
            ));
        }
        out.push_str(&format!(
            "{},all,{},{},{}\n",
            r.k,
            r.total_matches,
            r.correct_matches,
            r.accuracy()
        ));
    }
    std::fs::write(path, out)
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

#[derive(Serialize)]
struct ReportSummary {
    k: usize,
    pair_count: usize,
    total_matches: usize,
    correct_matches: usize,
    accuracy: f64,
    mean_pair_accuracy: f64,
}

/// Write a JSON summary: one record per report with both aggregate and
/// mean-per-pair accuracy.
pub fn write_reports_json(path: &Path, reports: &[MatchReport]) -> Result<(), EvalError> {
    let summaries: Vec<ReportSummary> = reports
        .iter()
        .map(|r| ReportSummary {
            k: r.k,
            pair_count: r.pairs.len(),
            total_matches: r.total_matches,
            correct_matches: r.correct_matches,
            accuracy: r.accuracy(),
            mean_pair_accuracy: r.mean_pair_accuracy(),
        })
        .collect();
    let text = serde_json::to_string_pretty(&summaries).expect("summary serializes");
    std::fs::write(path, text)
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

#[derive(Serialize)]
struct BundleSidecar {
    schema: &'static str,
    width: usize,
    height: usize,
    camera_model: String,
    principal_point_convention: &'static str,
    depth_mm_per_unit: f64,
    depth_format: &'static str,
    frame_count: usize,
}

/// Export a rendered trajectory for external structure-from-motion tools:
/// `frames/frame_{i:05}.png`, `depth/depth_{i:05}.png` (16-bit, see
/// [`DEPTH_MM_PER_UNIT`]), ground-truth `poses.json`, a plain-text
/// `camera.txt` with the pinhole model, and a `bundle.json` sidecar pinning
/// the conventions. Re-running writes byte-identical files.
pub fn export_sfm_bundle(
    out_dir: &Path,
    frames: &[Image],
    fragments: &[FragmentBuffer],
    poses: &[CameraPose],
    intrinsics: &Intrinsics,
) -> Result<Vec<PathBuf>, EvalError> {
    assert_eq!(frames.len(), fragments.len(), "one fragment buffer per frame");
    assert_eq!(frames.len(), poses.len(), "one pose per frame");
    let ioerr = |p: &Path| {
        let path = p.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    let frames_dir = out_dir.join("frames");
    let depth_dir = out_dir.join("depth");
    std::fs::create_dir_all(&frames_dir).map_err(ioerr(&frames_dir))?;
    std::fs::create_dir_all(&depth_dir).map_err(ioerr(&depth_dir))?;

    let mut written = Vec::new();
    for (i, (img, frag)) in frames.iter().zip(fragments).enumerate() {
        let fp = frames_dir.join(format!("frame_{i:05}.png"));
        img.save_png(&fp)?;
        written.push(fp);
        let depths: Vec<f64> = frag
            .fragments
            .iter()
            .map(|f| if f.is_empty() || !f.in_mask { 0.0 } else { f.depth })
            .collect();
        let dp = depth_dir.join(format!("depth_{i:05}.png"));
        save_depth_png16(&dp, frag.width, frag.height, &depths, DEPTH_MM_PER_UNIT)?;
        written.push(dp);
    }

    let poses_path = out_dir.join("poses.json");
    save_poses(poses, &poses_path)?;
    written.push(poses_path);

    let f = intrinsics.focal_px();
    let (cx, cy) = intrinsics.principal();
    let camera_line = format!("pinhole {f} {f} {cx} {cy}\n");
    let camera_path = out_dir.join("camera.txt");
    std::fs::write(&camera_path, &camera_line).map_err(ioerr(&camera_path))?;
    written.push(camera_path);

    let sidecar = BundleSidecar {
        schema: BUNDLE_SCHEMA,
        width: intrinsics.width,
        height: intrinsics.height,
        camera_model: camera_line.trim().to_string(),
        principal_point_convention:
            "cx = width/2 - 0.5, cy = height/2 - 0.5; pixel centers on integer coordinates",
        depth_mm_per_unit: DEPTH_MM_PER_UNIT,
        depth_format: "16-bit grayscale PNG; millimetres = value * depth_mm_per_unit; 0 = no surface",
        frame_count: frames.len(),
    };
    let sidecar_path = out_dir.join("bundle.json");
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar).expect("serializes"))
        .map_err(ioerr(&sidecar_path))?;
    written.push(sidecar_path);
    Ok(written)
}

#[derive(serde::Deserialize)]
struct SidecarIn {
    schema: String,
    width: usize,
    height: usize,
    camera_model: String,
    depth_mm_per_unit: f64,
    frame_count: usize,
}

/// Load an exported bundle back into evaluation-ready frames: images from
/// `frames/`, surface points back-projected from the 16-bit depth maps
/// through the bundle's pinhole model and ground-truth poses.
///
/// Depths are quantized at the export scale (0.01 mm per unit by default),
/// so lifted points carry sub-hundredth-millimetre rounding — far below the
/// default 1 mm verification tolerance. Pixels with depth 0 reload as
/// uncovered, exactly the pixels the export blanked.
pub fn load_bundle(dir: &Path) -> Result<Vec<Frame>, EvalError> {
    let sidecar_path = dir.join("bundle.json");
    let malformed = |message: String| EvalError::Bundle {
        path: sidecar_path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(&sidecar_path)
        .map_err(|source| EvalError::Io { path: sidecar_path.display().to_string(), source })?;
    let sidecar: SidecarIn =
        serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if sidecar.schema != BUNDLE_SCHEMA {
        return Err(malformed(format!(
            "schema {:?} is not the supported {BUNDLE_SCHEMA:?}",
            sidecar.schema
        )));
    }
    let parts: Vec<&str> = sidecar.camera_model.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "pinhole" {
        return Err(malformed(format!(
            "camera model {:?} is not \"pinhole fx fy cx cy\"",
            sidecar.camera_model
        )));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| malformed(format!("camera model: {e}")));
    let (fx, cx, cy) = (num(parts[1])?, num(parts[3])?, num(parts[4])?);
    if !(fx > 0.0) {
        return Err(malformed(format!("focal length {fx} must be positive")));
    }

    let poses = load_poses(&dir.join("poses.json"))?;
    if poses.len() != sidecar.frame_count {
        return Err(malformed(format!(
            "{} poses for {} frames",
            poses.len(),
            sidecar.frame_count
        )));
    }

    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let image = Image::load_png_srgb(&dir.join("frames").join(format!("frame_{i:05}.png")))?;
        let (dw, dh, units) =
            load_depth_png16(&dir.join("depth").join(format!("depth_{i:05}.png")))?;
        if image.width != sidecar.width
            || image.height != sidecar.height
            || dw != sidecar.width
            || dh != sidecar.height
        {
            return Err(malformed(format!(
                "frame {i}: image {}x{} and depth {dw}x{dh} must both be {}x{}",
                image.width, image.height, sidecar.width, sidecar.height
            )));
        }
        let mut fragments = Vec::with_capacity(dw * dh);
        for y in 0..dh {
            for x in 0..dw {
                let u = units[y * dw + x];
                if u == 0 {
                    fragments.push(Fragment {
                        face_id: EMPTY,
                        vertices: [0; 3],
                        bary: [0.0; 3],
                        depth: 0.0,
                        world_point: Point3::origin(),
                        normal: Vector3::zeros(),
                        in_mask: false,
                    });
                } else {
                    let z = u as f64 * sidecar.depth_mm_per_unit;
                    let cam = Point3::new(
                        (x as f64 - cx) * z / fx,
                        -(y as f64 - cy) * z / fx,
                        z,
                    );
                    fragments.push(Fragment {
                        face_id: 0,
                        vertices: [0; 3],
                        bary: [0.0; 3],
                        depth: z,
                        world_point: pose.camera_to_world(&cam),
                        normal: Vector3::zeros(),
                        in_mask: true,
                    });
                }
            }
        }
        frames.push(Frame {
            image: Gray::from_image(&image),
            fragments: FragmentBuffer { width: dw, height: dh, fragments },
        });
    }
    Ok(frames)
}

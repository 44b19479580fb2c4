//! Training orchestration: prepare per-view data, fit the texture to target
//! images, and bake the fitted colors onto the mesh.
//!
//! The pipeline works off a [`Workspace`] directory. `prepare_views` writes
//! the working mesh, camera poses, untextured renders, and per-view weight
//! maps; `mock_stylize` (or any external stylizer) fills in target images;
//! `ingest_targets` assembles [`ViewTriplet`]s; `train` runs the optimization
//! loop; `bake` evaluates the trained network at every vertex.
//!
//! The working mesh is exported to `mesh.ply` once and **reloaded** before
//! anything is rendered, so every later stage that reads `mesh.ply` sees
//! bit-identical (f32-rounded) vertex positions. That single decision is what
//! lets separately-invoked stages reproduce each other's floating-point
//! results exactly.

use std::path::{Path, PathBuf};

use nalgebra::Point3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::camera::{build_poses, load_poses, save_poses, CameraError, CameraPose, Intrinsics};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError, CheckpointProvenance};
use crate::color;
use crate::heatmap::{
    compute_heatmap_with, load_heatmap_f32, save_heatmap_f32, save_heatmap_png, DistanceTerm,
    Heatmap, HeatmapError,
};
use crate::img::{ColorSpace, Image, ImageError};
use crate::mesh::{export_mesh, load_mesh, subdivide, MeshError, TriMesh};
use crate::mock::{stylize_view, MockMode};
use crate::optim::{AdamParams, AdamState, OptimError, StepOutcome};
use crate::raster::{
    build_render_operator, headlight_gains, rasterize, shade, FragmentBuffer, RasterError,
    RenderOperator, ShadeMode,
};
use crate::skeleton::{sample_camera_stations, skeletonize, Seed, SkeletonError, SkeletonGraph};
use crate::texture::{rgb_rows, FourierEncoder, Gradients, TextureError, TextureMlp};
use crate::workspace::{sha256_bytes, sha256_file, Workspace, WorkspaceError, STAGE_ORDER};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training needs at least one view")]
    NoViews,
    #[error("two views share pose id {0}")]
    DuplicatePose(u32),
    #[error("no target image for pose {pose_id}: {path} is missing")]
    MissingTarget { pose_id: u32, path: String },
    #[error(
        "target for pose {pose_id} is {got_w}x{got_h}, expected {want_w}x{want_h}"
    )]
    TargetDimensions { pose_id: u32, got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("workspace is inconsistent: {0}")]
    InvalidWorkspace(String),
    #[error("loss became non-finite at epoch {epoch}, view {pose_id}")]
    NonFiniteLoss { epoch: u32, pose_id: u32 },
    #[error("gradient became non-finite at epoch {epoch} ({view})")]
    NonFiniteGradient { epoch: u32, view: String },
    #[error("checkpoint does not match this mesh: {0}")]
    ProvenanceMismatch(String),
    #[error(
        "mesh export collapsed {before} vertices to {after}; vertices sit closer than the weld \
         tolerance, so the exported mesh would not round-trip"
    )]
    WeldCollapse { before: usize, after: usize },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Texture(#[from] TextureError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Everything the trainer needs to know about one view.
#[derive(Debug, Clone)]
pub struct ViewTriplet {
    pub pose_id: u32,
    pub pose: CameraPose,
    /// Target image in normalized LAB.
    pub target: Image,
    /// Per-pixel loss weights; its valid mask is a subset of the fragment
    /// coverage.
    pub heatmap: Heatmap,
    pub fragments: FragmentBuffer,
    /// Linear map from vertex colors to this view's rendered pixels (with any
    /// shading gain already folded in).
    pub operator: RenderOperator,
}

/// Hyperparameters and data-preparation settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Full passes over the view set; must be ≥ 1.
    pub epochs: u32,
    /// Number of training views M; must be ≥ 1.
    pub views: u32,
    /// Square render size in pixels.
    pub image_size: u32,
    pub vertical_fov_deg: f64,
    pub near_mm: f64,
    pub far_mm: f64,
    /// Depth beyond which pixels carry no loss.
    pub d_max_mm: f64,
    /// Grazing-angle cutoff (cosine); 0 keeps every front-facing pixel.
    pub theta_thresh: f64,
    pub distance_term: DistanceTerm,
    pub rng_seed: u64,
    /// Midpoint subdivisions applied to the input mesh before training.
    pub subdivisions: u32,
    /// Ring width for the interior skeleton the poses are sampled from.
    pub ring_width_mm: f64,
    /// Start vertex of the skeleton's geodesic crawl ("auto" = lowest-z).
    #[serde(default)]
    pub skeleton_seed: Seed,
    /// Shading for the training renders. UNLIT keeps the pixel-from-vertex
    /// map exactly linear; HEADLIGHT folds its per-pixel gain into the
    /// operator, which stays linear too.
    pub shading: ShadeMode,
    /// Random Fourier frequency count F (encoding dimension is 2F).
    pub frequency_count: usize,
    /// Frequency scale of the Fourier encoder.
    pub sigma: f64,
    pub hidden_width: usize,
    pub optimizer: AdamParams,
    /// Save an intermediate checkpoint every this many epochs (0 = final
    /// checkpoint only).
    pub checkpoint_interval: u32,
    /// When set, gradients are summed over all views and applied once per
    /// epoch instead of one optimizer step per view.
    pub accumulate_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            views: 25,
            image_size: 256,
            vertical_fov_deg: 70.0,
            near_mm: 0.1,
            far_mm: 100.0,
            d_max_mm: crate::heatmap::DEFAULT_D_MAX_MM,
            theta_thresh: crate::heatmap::DEFAULT_THETA_THRESH,
            distance_term: DistanceTerm::Direct,
            rng_seed: 0,
            subdivisions: 0,
            ring_width_mm: 2.0,
            skeleton_seed: Seed::Auto,
            shading: ShadeMode::Unlit,
            frequency_count: crate::texture::DEFAULT_FREQUENCY_COUNT,
            sigma: crate::texture::DEFAULT_SIGMA,
            hidden_width: crate::texture::DEFAULT_HIDDEN_WIDTH,
            optimizer: AdamParams::default(),
            checkpoint_interval: 50,
            accumulate_gradients: false,
        }
    }
}

impl TrainConfig {
    /// Collect every violated constraint (empty = valid).
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs < 1 {
            v.push(format!("epochs must be >= 1, got {}", self.epochs));
        }
        if self.views < 1 {
            v.push(format!("views must be >= 1, got {}", self.views));
        }
        if self.image_size < 8 {
            v.push(format!("image_size must be >= 8, got {}", self.image_size));
        }
        if !(self.vertical_fov_deg > 0.0 && self.vertical_fov_deg < 180.0) {
            v.push(format!("vertical_fov_deg must be in (0, 180), got {}", self.vertical_fov_deg));
        }
        if !(self.near_mm > 0.0) {
            v.push(format!("near_mm must be > 0, got {}", self.near_mm));
        }
        if !(self.far_mm > self.near_mm) {
            v.push(format!(
                "far_mm must exceed near_mm, got {} vs {}",
                self.far_mm, self.near_mm
            ));
        }
        if !(self.d_max_mm > 0.0) {
            v.push(format!("d_max_mm must be > 0, got {}", self.d_max_mm));
        }
        if !(-1.0..=1.0).contains(&self.theta_thresh) {
            v.push(format!("theta_thresh must be a cosine in [-1, 1], got {}", self.theta_thresh));
        }
        if !(self.ring_width_mm > 0.0) {
            v.push(format!("ring_width_mm must be > 0, got {}", self.ring_width_mm));
        }
        if self.frequency_count < 1 {
            v.push(format!("frequency_count must be >= 1, got {}", self.frequency_count));
        }
        if !(self.sigma > 0.0) {
            v.push(format!("sigma must be > 0, got {}", self.sigma));
        }
        if self.hidden_width < 1 {
            v.push(format!("hidden_width must be >= 1, got {}", self.hidden_width));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            v.push(format!(
                "optimizer.learning_rate must be > 0, got {}",
                self.optimizer.learning_rate
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(v.join("; ")))
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            width: self.image_size as usize,
            height: self.image_size as usize,
            vertical_fov: self.vertical_fov_deg,
            near: self.near_mm,
            far: self.far_mm,
        }
    }

    /// Canonical JSON used in stage stamps; field order is fixed by the
    /// struct declaration, so equal configs give equal bytes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Seed for the MLP weight stream, decorrelated from the Fourier
    /// frequency stream which uses `rng_seed` directly.
    fn mlp_seed(&self) -> u64 {
        self.rng_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
    }
}

/// What `prepare_views` leaves in memory for the caller.
#[derive(Debug)]
pub struct PrepareOutcome {
    /// The working mesh as reloaded from `mesh.ply` (f32-rounded positions).
    pub mesh: TriMesh,
    pub skeleton: SkeletonGraph,
    pub poses: Vec<CameraPose>,
}

pub fn prepare_stamp(
    config: &TrainConfig,
    mesh_fingerprint: &str,
    skeleton_note: &str,
) -> String {
    sha256_bytes(
        format!("prepare|{}|{mesh_fingerprint}|{skeleton_note}", config.canonical_json())
            .as_bytes(),
    )
}

/// Where `prepare_views_with` gets the interior centerline from.
#[derive(Debug, Clone, Copy)]
pub enum SkeletonSource<'a> {
    /// Ring-grow it from the working mesh.
    Derive,
    /// Load a precomputed skeleton JSON and copy it into the workspace.
    Import(&'a Path),
}

/// The note a skeleton source contributes to the prepare stamp, so swapping
/// in a different imported skeleton invalidates the stage.
pub fn skeleton_source_note(source: SkeletonSource) -> Result<String, TrainError> {
    Ok(match source {
        SkeletonSource::Derive => "derived".to_string(),
        SkeletonSource::Import(path) => format!("import:{}", sha256_file(path)?),
    })
}

/// Build all per-view artifacts: working mesh, skeleton, poses, untextured
/// renders A_i, and weight maps H_i; records the `prepare` stage in the
/// manifest with content hashes. Deterministic given the config.
///
/// `mesh_fingerprint` identifies the input mesh (e.g. the SHA-256 of its
/// file) and only enters the stage stamp.
pub fn prepare_views(
    ws: &Workspace,
    base_mesh: &TriMesh,
    config: &TrainConfig,
    mesh_fingerprint: &str,
) -> Result<PrepareOutcome, TrainError> {
    prepare_views_with(ws, base_mesh, config, mesh_fingerprint, SkeletonSource::Derive)
}

/// [`prepare_views`] with an explicit skeleton source (derive it from the
/// mesh, or import a precomputed one).
pub fn prepare_views_with(
    ws: &Workspace,
    base_mesh: &TriMesh,
    config: &TrainConfig,
    mesh_fingerprint: &str,
    skeleton_source: SkeletonSource,
) -> Result<PrepareOutcome, TrainError> {
    config.validate()?;
    let working = subdivide(base_mesh, config.subdivisions as usize);
    export_mesh(&working, &ws.mesh_path())?;
    let mesh = load_mesh(&ws.mesh_path())?;
    if mesh.vertex_count() != working.vertex_count() {
        return Err(TrainError::WeldCollapse {
            before: working.vertex_count(),
            after: mesh.vertex_count(),
        });
    }

    let skeleton_note = skeleton_source_note(skeleton_source)?;
    let skeleton = match skeleton_source {
        SkeletonSource::Derive => skeletonize(&mesh, config.skeleton_seed, config.ring_width_mm)?,
        SkeletonSource::Import(path) => SkeletonGraph::load_json(path)?,
    };
    skeleton.save_json(&ws.skeleton_path())?;
    let stations = sample_camera_stations(&skeleton, config.views as usize, config.rng_seed)?;
    let poses = build_poses(&skeleton, &stations)?;
    save_poses(&poses, &ws.poses_path())?;

    let intr = config.intrinsics();
    let white = vec![[1.0f64; 3]; mesh.vertex_count()];
    let mut artifacts =
        vec![ws.mesh_path(), ws.skeleton_path(), ws.poses_path()];
    for pose in &poses {
        let frag = rasterize(&mesh, pose, &intr);
        let a_img = shade(&white, &frag, config.shading, pose)?;
        let a_path = ws.render_path(pose.pose_id);
        a_img.save_png(&a_path)?;
        let hm = compute_heatmap_with(
            &frag,
            pose,
            config.d_max_mm,
            config.theta_thresh,
            config.distance_term,
        );
        let h_path = ws.heatmap_path(pose.pose_id);
        save_heatmap_f32(&hm, &h_path)?;
        let hpng_path = ws.heatmap_png_path(pose.pose_id);
        save_heatmap_png(&hm, &hpng_path)?;
        artifacts.extend([a_path, h_path, hpng_path]);
    }

    let mut manifest = ws.load_or_new_manifest()?;
    manifest.config = serde_json::to_value(config).expect("config serializes");
    manifest.invalidate_from(&STAGE_ORDER, "prepare");
    manifest.record_stage(
        ws,
        "prepare",
        &prepare_stamp(config, mesh_fingerprint, &skeleton_note),
        &artifacts,
    )?;
    ws.save_manifest(&manifest)?;

    Ok(PrepareOutcome { mesh, skeleton, poses })
}

/// Read the config snapshot a workspace was prepared with.
pub fn workspace_config(ws: &Workspace) -> Result<TrainConfig, TrainError> {
    let manifest = ws.load_manifest()?;
    serde_json::from_value(manifest.config.clone()).map_err(|e| {
        TrainError::InvalidWorkspace(format!("manifest config does not parse: {e}"))
    })
}

pub fn stylize_stamp(mode: MockMode, seed: u64, prepare: &str) -> String {
    sha256_bytes(format!("stylize|{mode}|{seed}|{prepare}").as_bytes())
}

/// Paint mock stylization targets for every prepared pose and record the
/// `stylize` stage. Returns the targets directory.
pub fn mock_stylize(ws: &Workspace, mode: MockMode, seed: u64) -> Result<PathBuf, TrainError> {
    let config = workspace_config(ws)?;
    let mesh = load_mesh(&ws.mesh_path())?;
    let poses = load_poses(&ws.poses_path())?;
    let intr = config.intrinsics();

    let mut artifacts = Vec::with_capacity(poses.len());
    for pose in &poses {
        let frag = rasterize(&mesh, pose, &intr);
        let img = stylize_view(&frag, mode, seed, pose.pose_id);
        let path = ws.target_path(pose.pose_id);
        img.save_png(&path)?;
        artifacts.push(path);
    }

    let mut manifest = ws.load_manifest()?;
    let upstream = manifest.stages.get("prepare").map(|s| s.stamp.clone()).unwrap_or_default();
    manifest.invalidate_from(&STAGE_ORDER, "stylize");
    manifest.record_stage(ws, "stylize", &stylize_stamp(mode, seed, &upstream), &artifacts)?;
    ws.save_manifest(&manifest)?;

    Ok(ws.root().join("targets"))
}

/// The assembled training set plus a fingerprint of the exact target bytes
/// it was built from (used in the train stage stamp).
#[derive(Debug)]
pub struct IngestedViews {
    pub triplets: Vec<ViewTriplet>,
    pub fingerprint: String,
}

/// Content fingerprint of the target set for the prepared poses: an
/// order-stable hash over every target file's bytes. This is the
/// `data_fingerprint` that enters the train stage stamp, and it is cheap
/// enough to compute for an idempotency check before any rasterization.
pub fn targets_fingerprint(
    ws: &Workspace,
    targets_dir: Option<&Path>,
) -> Result<String, TrainError> {
    let mut poses = load_poses(&ws.poses_path())?;
    poses.sort_by_key(|p| p.pose_id);
    let dir = targets_dir.map(Path::to_path_buf).unwrap_or_else(|| ws.root().join("targets"));
    let mut parts = String::new();
    for pose in &poses {
        let path = dir.join(format!("B_{}.png", pose.pose_id));
        if !path.is_file() {
            return Err(TrainError::MissingTarget {
                pose_id: pose.pose_id,
                path: path.display().to_string(),
            });
        }
        parts.push_str(&format!("B_{}:{};", pose.pose_id, sha256_file(&path)?));
    }
    Ok(sha256_bytes(parts.as_bytes()))
}

/// Pair every prepared pose with its target image, heatmap, fragments, and
/// render operator. `targets_dir` defaults to the workspace's own
/// `targets/`; point it elsewhere to ingest externally stylized images.
pub fn ingest_targets(
    ws: &Workspace,
    targets_dir: Option<&Path>,
) -> Result<IngestedViews, TrainError> {
    let config = workspace_config(ws)?;
    let mesh = load_mesh(&ws.mesh_path())?;
    let mut poses = load_poses(&ws.poses_path())?;
    poses.sort_by_key(|p| p.pose_id);
    let dir = targets_dir.map(Path::to_path_buf).unwrap_or_else(|| ws.root().join("targets"));
    let intr = config.intrinsics();
    let want = config.image_size as usize;

    let fingerprint = targets_fingerprint(ws, targets_dir)?;
    let mut triplets = Vec::with_capacity(poses.len());
    for pose in &poses {
        let path = dir.join(format!("B_{}.png", pose.pose_id));
        let srgb = Image::load_png_srgb(&path)?;
        if srgb.width != want || srgb.height != want {
            return Err(TrainError::TargetDimensions {
                pose_id: pose.pose_id,
                got_w: srgb.width,
                got_h: srgb.height,
                want_w: want,
                want_h: want,
            });
        }

        let target = srgb.to_lab_normalized();
        let fragments = rasterize(&mesh, pose, &intr);
        let heatmap = load_heatmap_f32(&ws.heatmap_path(pose.pose_id))?;
        if heatmap.width != want || heatmap.height != want {
            return Err(TrainError::InvalidWorkspace(format!(
                "heatmap for pose {} is {}x{}, renders are {want}x{want}",
                pose.pose_id, heatmap.width, heatmap.height
            )));
        }
        for y in 0..heatmap.height {
            for x in 0..heatmap.width {
                let f = fragments.at(x, y);
                if heatmap.valid[y * heatmap.width + x] && (f.is_empty() || !f.in_mask) {
                    return Err(TrainError::InvalidWorkspace(format!(
                        "pose {}: heatmap marks ({x},{y}) valid but the render has no surface \
                         there; mesh or poses changed after prepare",
                        pose.pose_id
                    )));
                }
            }
        }
        let mut operator = build_render_operator(&fragments, &mesh)?;
        if config.shading == ShadeMode::Headlight {
            operator
                .scale_rows(&headlight_gains(&fragments, pose))
                .expect("gain buffer sized from the same fragments");
        }
        triplets.push(ViewTriplet {
            pose_id: pose.pose_id,
            pose: *pose,
            target,
            heatmap,
            fragments,
            operator,
        });
    }
    Ok(IngestedViews { triplets, fingerprint })
}

/// Heatmap-weighted squared error between a linear-RGB rendering and a
/// normalized-LAB target, averaged over valid pixels, plus the gradient with
/// respect to the rendered RGB values.
///
/// Per valid pixel `e = ‖lab(Â) − B‖²`; `loss = Σ H·e / count(valid)`;
/// `∂loss/∂rgb = (2/count)·H·Jᵀ·(lab(Â) − B)` with `J` the Jacobian of the
/// normalized-LAB map at the rendered color. Invalid pixels contribute
/// nothing and receive zero gradient. A view with no valid pixels yields
/// loss 0 and zero gradient.
pub fn loss_and_grad(triplet: &ViewTriplet, rendered: &Image) -> Result<(f64, Image), TrainError> {
    weighted_lab_loss(&triplet.heatmap, &triplet.target, rendered)
}

/// Core of [`loss_and_grad`], usable with a bare heatmap and target.
pub fn weighted_lab_loss(
    heatmap: &Heatmap,
    target: &Image,
    rendered: &Image,
) -> Result<(f64, Image), TrainError> {
    if rendered.width != target.width
        || rendered.height != target.height
        || heatmap.width != target.width
        || heatmap.height != target.height
    {
        return Err(TrainError::InvalidConfig(format!(
            "size mismatch: rendered {}x{}, target {}x{}, heatmap {}x{}",
            rendered.width,
            rendered.height,
            target.width,
            target.height,
            heatmap.width,
            heatmap.height
        )));
    }
    debug_assert_eq!(rendered.colorspace, ColorSpace::RgbLinear);
    debug_assert_eq!(target.colorspace, ColorSpace::Lab);

    let mut grad = Image::new(rendered.width, rendered.height, ColorSpace::RgbLinear);
    let count = heatmap.valid_count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 2.0 / count as f64;
    let mut total = 0.0;
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            if !heatmap.valid[y * heatmap.width + x] {
                continue;
            }
            let h = heatmap.weight(x, y);
            let rgb = rendered.pixel(x, y);
            let lab = color::rgb_to_lab_normalized(rgb);
            let b = target.pixel(x, y);
            let d = [lab[0] - b[0], lab[1] - b[1], lab[2] - b[2]];
            total += h * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
            let j = color::lab_norm_jacobian(rgb);
            // Jᵀ·d, then the 2H/count factor
            let mut g = [0.0f64; 3];
            for k in 0..3 {
                g[k] = scale * h * (j[0][k] * d[0] + j[1][k] * d[1] + j[2][k] * d[2]);
            }
            grad.set_pixel(x, y, g);
        }
    }
    Ok((total / count as f64, grad))
}

/// One view's full forward/backward chain: MLP forward over all vertices,
/// render through the operator, loss against the target, and gradients for
/// every MLP parameter.
pub fn view_loss_and_param_grads(
    mlp: &TextureMlp,
    encoding: &Array2<f64>,
    triplet: &ViewTriplet,
) -> Result<(f64, Gradients), TrainError> {
    let (colors, cache) = mlp.forward(encoding)?;
    let rendered = triplet.operator.apply(&rgb_rows(&colors))?;
    let (loss, pixel_grad) = loss_and_grad(triplet, &rendered)?;
    let vertex_grad = triplet.operator.apply_transpose(&pixel_grad);
    let mut grad_rgb = Array2::zeros((colors.nrows(), 3));
    for (i, g) in vertex_grad.iter().enumerate() {
        for k in 0..3 {
            grad_rgb[[i, k]] = g[k];
        }
    }
    let grads = mlp.backward(&cache, &grad_rgb)?;
    Ok((loss, grads))
}

/// Loss of one view under the current model, without gradients.
pub fn view_loss(
    mlp: &TextureMlp,
    encoding: &Array2<f64>,
    triplet: &ViewTriplet,
) -> Result<f64, TrainError> {
    let colors = mlp.predict(encoding)?;
    let rendered = triplet.operator.apply(&rgb_rows(&colors))?;
    Ok(loss_and_grad(triplet, &rendered)?.0)
}

/// Fourier encoding of a mesh's vertices under a checkpoint-compatible
/// normalizer.
pub fn encode_mesh(
    mesh: &TriMesh,
    encoder: &FourierEncoder,
    provenance: &CheckpointProvenance,
) -> Result<Array2<f64>, TrainError> {
    let norm = provenance.normalizer();
    let pts: Vec<Point3<f64>> = mesh.vertices.iter().map(|v| norm.normalize(v)).collect();
    Ok(encoder.encode(&pts)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub mean_loss: f64,
    /// Per-view losses in ascending pose id order.
    pub view_losses: Vec<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Pose ids in the order view_losses are reported.
    pub pose_ids: Vec<u32>,
    pub history: Vec<EpochRecord>,
    /// Files written: loss.csv and every checkpoint.
    pub artifacts: Vec<PathBuf>,
}

pub fn train_stamp(config: &TrainConfig, data_fingerprint: &str) -> String {
    sha256_bytes(format!("train|{}|{data_fingerprint}", config.canonical_json()).as_bytes())
}

/// Run the optimization loop.
///
/// Each epoch iterates the views in ascending pose id order and performs one
/// optimizer step per view (or one accumulated step per epoch when
/// configured). Writes `logs/loss.csv`, intermediate checkpoints every
/// `checkpoint_interval` epochs, and `checkpoints/final.mbrush`; records the
/// `train` stage. Two runs with equal inputs are bit-identical.
pub fn train(
    ws: &Workspace,
    mesh: &TriMesh,
    views: &[ViewTriplet],
    config: &TrainConfig,
    data_fingerprint: &str,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if views.is_empty() {
        return Err(TrainError::NoViews);
    }
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by_key(|&i| views[i].pose_id);
    for pair in order.windows(2) {
        if views[pair[0]].pose_id == views[pair[1]].pose_id {
            return Err(TrainError::DuplicatePose(views[pair[0]].pose_id));
        }
    }
    let pose_ids: Vec<u32> = order.iter().map(|&i| views[i].pose_id).collect();

    let provenance = CheckpointProvenance::for_mesh(mesh);
    let encoder =
        FourierEncoder::new(config.frequency_count, config.sigma, config.rng_seed);
    let encoding = encode_mesh(mesh, &encoder, &provenance)?;
    let mut mlp =
        TextureMlp::new(encoder.encoding_dim(), config.hidden_width, config.mlp_seed());
    let mut opt = AdamState::new(&mlp, config.optimizer);

    let mut csv = String::from("epoch,mean_loss");
    for id in &pose_ids {
        csv.push_str(&format!(",loss_{id}"));
    }
    csv.push('\n');

    let mut history = Vec::with_capacity(config.epochs as usize);
    let mut artifacts = vec![ws.loss_csv_path()];
    for epoch in 0..config.epochs {
        let mut view_losses = Vec::with_capacity(order.len());
        let mut accumulated: Option<Gradients> = None;
        for &i in &order {
            let t = &views[i];
            let (loss, grads) = view_loss_and_param_grads(&mlp, &encoding, t)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, pose_id: t.pose_id });
            }
            view_losses.push(loss);
            if config.accumulate_gradients {
                accumulated = Some(match accumulated {
                    None => grads,
                    Some(mut acc) => {
                        add_gradients(&mut acc, &grads);
                        acc
                    }
                });
            } else if opt.step(&mut mlp, &grads)? == StepOutcome::SkippedNonFinite {
                return Err(TrainError::NonFiniteGradient {
                    epoch,
                    view: format!("view {}", t.pose_id),
                });
            }
        }
        if let Some(acc) = accumulated {
            if opt.step(&mut mlp, &acc)? == StepOutcome::SkippedNonFinite {
                return Err(TrainError::NonFiniteGradient {
                    epoch,
                    view: "accumulated over all views".into(),
                });
            }
        }
        let mean_loss = view_losses.iter().sum::<f64>() / view_losses.len() as f64;
        csv.push_str(&format!("{epoch},{mean_loss}"));
        for l in &view_losses {
            csv.push_str(&format!(",{l}"));
        }
        csv.push('\n');
        history.push(EpochRecord { epoch, mean_loss, view_losses });

        let k = config.checkpoint_interval;
        if k > 0 && (epoch + 1) % k == 0 && epoch + 1 < config.epochs {
            let path = ws.checkpoint_path(&format!("epoch_{:05}", epoch + 1));
            save_checkpoint(&path, &encoder, &mlp, Some(&opt), &provenance)?;
            artifacts.push(path);
        }
    }

    let final_path = ws.checkpoint_path("final");
    save_checkpoint(&final_path, &encoder, &mlp, Some(&opt), &provenance)?;
    artifacts.push(final_path);
    std::fs::write(ws.loss_csv_path(), csv.as_bytes()).map_err(|source| {
        WorkspaceError::Io { path: ws.loss_csv_path().display().to_string(), source }
    })?;

    let mut manifest = ws.load_or_new_manifest()?;
    manifest.invalidate_from(&STAGE_ORDER, "train");
    manifest.record_stage(ws, "train", &train_stamp(config, data_fingerprint), &artifacts)?;
    ws.save_manifest(&manifest)?;

    Ok(TrainOutcome {
        checkpoint: Checkpoint { encoder, mlp, optimizer: Some(opt), provenance },
        pose_ids,
        history,
        artifacts,
    })
}

fn add_gradients(acc: &mut Gradients, g: &Gradients) {
    for (a, b) in acc.w.iter_mut().zip(&g.w) {
        *a += b;
    }
    for (a, b) in acc.b.iter_mut().zip(&g.b) {
        *a += b;
    }
}

/// Evaluate the trained network at every vertex and attach the colors.
///
/// Uses the normalizer stored in the checkpoint (not a refit), so baked
/// colors equal the training-time vertex colors bit for bit; rendering the
/// baked mesh UNLIT therefore reproduces the training-time Â exactly.
pub fn bake(mesh: &TriMesh, checkpoint: &Checkpoint) -> Result<TriMesh, TrainError> {
    if !checkpoint.provenance.matches(mesh) {
        let p = &checkpoint.provenance;
        return Err(TrainError::ProvenanceMismatch(format!(
            "checkpoint was trained on {} vertices (center {:?}, half-extent {}), this mesh has \
             {} vertices",
            p.vertex_count,
            p.center,
            p.half_extent,
            mesh.vertex_count()
        )));
    }
    let encoding = encode_mesh(mesh, &checkpoint.encoder, &checkpoint.provenance)?;
    let colors = checkpoint.mlp.predict(&encoding)?;
    Ok(mesh.clone().with_colors(rgb_rows(&colors)))
}

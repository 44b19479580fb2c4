//! Command-line pipeline driver.
//!
//! Six subcommands cover the whole pipeline — `prepare`, `stylize-mock`,
//! `train`, `bake`, `render`, `eval` — driven by one JSON config (with
//! per-flag overrides) and a workspace directory. Every command
//! short-circuits when the manifest shows its inputs unchanged (`--force`
//! reruns anyway), all randomness flows from the config's one seed, and
//! `--threads` caps the worker pool without changing any result.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::camera::{interpolate_trajectory, CameraError};
use crate::checkpoint::{load_checkpoint, CheckpointError};
use crate::config::{ConfigError, PipelineConfig};
use crate::eval::{
    load_bundle, orb_k, write_reports_csv, write_reports_json, EvalError, EvalParams, MatchReport,
};
use crate::features::{DetectorParams, DEFAULT_DESCRIPTOR_SEED};
use crate::heatmap::DistanceTerm;
use crate::img::ImageError;
use crate::mesh::{export_colored_mesh, load_mesh, MeshError, TriMesh};
use crate::mock::MockMode;
use crate::raster::{rasterize, shade, RasterError, ShadeMode};
use crate::skeleton::{SkeletonError, SkeletonGraph};
use crate::trainer::{
    bake, ingest_targets, mock_stylize, prepare_stamp, prepare_views_with, skeleton_source_note,
    stylize_stamp, targets_fingerprint, train, train_stamp, workspace_config, SkeletonSource,
    TrainError,
};
use crate::workspace::{sha256_bytes, sha256_file, Workspace, WorkspaceError, STAGE_ORDER};

/// Environment variable that supplies the workspace root when `--workspace`
/// is not passed.
pub const WORKSPACE_ENV: &str = "ENDOBRUSH_WORKSPACE";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("workspace not set: pass --workspace or set {WORKSPACE_ENV}")]
    NoWorkspace,
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Parser)]
#[command(
    name = "endobrush",
    version,
    about = "Paint tubular meshes with per-vertex neural textures and render consistent fly-throughs"
)]
pub struct Cli {
    /// Workspace directory all stages read and write.
    #[arg(long, global = true, env = WORKSPACE_ENV)]
    pub workspace: Option<PathBuf>,
    /// Cap the worker-thread pool; results are identical at any setting.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Re-run the stage even when the manifest shows its inputs unchanged.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the workspace: working mesh, skeleton, poses, untextured
    /// renders, and per-view weight maps.
    Prepare(PrepareArgs),
    /// Paint procedural stylization targets for every prepared pose.
    StylizeMock(StylizeArgs),
    /// Fit the texture network to the target images.
    Train(TrainArgs),
    /// Evaluate the trained network at every vertex; write a colored PLY.
    Bake(BakeArgs),
    /// Render a trajectory bundle (frames, depths, poses) along the skeleton.
    Render(RenderArgs),
    /// Feature-consistency statistics over a rendered bundle.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Pipeline config JSON; relative paths inside it resolve against its
    /// own directory.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

/// Per-flag overrides mirroring the config file; each one replaces the
/// loaded value before validation.
#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    /// Input surface mesh (PLY).
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Precomputed skeleton JSON to import instead of deriving one.
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub views: Option<u32>,
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long)]
    pub vertical_fov_deg: Option<f64>,
    #[arg(long)]
    pub near_mm: Option<f64>,
    #[arg(long)]
    pub far_mm: Option<f64>,
    #[arg(long)]
    pub d_max_mm: Option<f64>,
    #[arg(long)]
    pub theta_thresh: Option<f64>,
    #[arg(long, value_enum)]
    pub distance_term: Option<DistanceArg>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
    #[arg(long)]
    pub subdivisions: Option<u32>,
    #[arg(long)]
    pub ring_width_mm: Option<f64>,
    #[arg(long, value_enum)]
    pub shading: Option<ShadingArg>,
    #[arg(long)]
    pub frequency_count: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u32>,
    #[arg(long)]
    pub accumulate_gradients: Option<bool>,
}

impl ConfigOverrides {
    pub fn apply(&self, config: &mut PipelineConfig) {
        if let Some(v) = &self.mesh {
            config.mesh = v.clone();
        }
        if let Some(v) = &self.skeleton {
            config.skeleton = Some(v.clone());
        }
        let t = &mut config.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.views {
            t.views = v;
        }
        if let Some(v) = self.image_size {
            t.image_size = v;
        }
        if let Some(v) = self.vertical_fov_deg {
            t.vertical_fov_deg = v;
        }
        if let Some(v) = self.near_mm {
            t.near_mm = v;
        }
        if let Some(v) = self.far_mm {
            t.far_mm = v;
        }
        if let Some(v) = self.d_max_mm {
            t.d_max_mm = v;
        }
        if let Some(v) = self.theta_thresh {
            t.theta_thresh = v;
        }
        if let Some(v) = self.distance_term {
            t.distance_term = v.into();
        }
        if let Some(v) = self.rng_seed {
            t.rng_seed = v;
        }
        if let Some(v) = self.subdivisions {
            t.subdivisions = v;
        }
        if let Some(v) = self.ring_width_mm {
            t.ring_width_mm = v;
        }
        if let Some(v) = self.shading {
            t.shading = v.into();
        }
        if let Some(v) = self.frequency_count {
            t.frequency_count = v;
        }
        if let Some(v) = self.sigma {
            t.sigma = v;
        }
        if let Some(v) = self.hidden_width {
            t.hidden_width = v;
        }
        if let Some(v) = self.learning_rate {
            t.optimizer.learning_rate = v;
        }
        if let Some(v) = self.checkpoint_interval {
            t.checkpoint_interval = v;
        }
        if let Some(v) = self.accumulate_gradients {
            t.accumulate_gradients = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    /// Speckle style: world-anchored, or hue-jittered per view.
    #[arg(long, value_enum, default_value_t = MockArg::Consistent)]
    pub mode: MockArg,
    /// Seed of the speckle hash (independent of the training seed).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of target images B_<pose>.png (default: the workspace's
    /// own targets/).
    #[arg(long)]
    pub targets: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BakeArgs {
    /// Checkpoint name under checkpoints/, or a path to a .mbrush file.
    #[arg(long, default_value = "final")]
    pub checkpoint: String,
    /// Output colored PLY. Defaults to the workspace's baked.ply; a custom
    /// path is written unconditionally and not tracked for idempotency.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// What to render along the trajectory.
    #[arg(long, value_enum, default_value_t = RenderSourceArg::Baked)]
    pub source: RenderSourceArg,
    /// Checkpoint name for --source checkpoint.
    #[arg(long, default_value = "final")]
    pub checkpoint: String,
    /// Shading of the trajectory frames.
    #[arg(long, value_enum, default_value_t = ShadingArg::Unlit)]
    pub shading: ShadingArg,
    /// Key stations sampled evenly along the skeleton's longest path.
    #[arg(long, default_value_t = 8)]
    pub stations: usize,
    /// Interpolated frames per station-to-station segment; the bundle gets
    /// (stations-1)*frames_per_segment + 1 frames.
    #[arg(long, default_value_t = 4)]
    pub frames_per_segment: usize,
    /// Bundle directory. Defaults to the workspace's frames/; a custom path
    /// is written unconditionally and not tracked for idempotency.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Rendered bundle to evaluate (default: the workspace's frames/).
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Second bundle evaluated side by side, reported as baseline_*.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Frame gaps to evaluate, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub k: Vec<usize>,
    /// Contrast threshold of the segment-test corner detector.
    #[arg(long, default_value_t = DetectorParams::default().threshold)]
    pub threshold: u8,
    /// Keep at most this many keypoints per frame.
    #[arg(long, default_value_t = DetectorParams::default().max_keypoints)]
    pub max_keypoints: usize,
    /// Hamming acceptance threshold out of 256.
    #[arg(long, default_value_t = 80)]
    pub max_hamming: u32,
    /// 3D verification tolerance in millimetres.
    #[arg(long, default_value_t = 1.0)]
    pub tol_mm: f64,
    /// Seed of the descriptor's point-pair layout.
    #[arg(long, default_value_t = DEFAULT_DESCRIPTOR_SEED)]
    pub descriptor_seed: u64,
    /// Report directory. Defaults to the workspace's eval/; a custom path is
    /// written unconditionally and not tracked for idempotency.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShadingArg {
    Unlit,
    Headlight,
}

impl From<ShadingArg> for ShadeMode {
    fn from(v: ShadingArg) -> ShadeMode {
        match v {
            ShadingArg::Unlit => ShadeMode::Unlit,
            ShadingArg::Headlight => ShadeMode::Headlight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistanceArg {
    Direct,
    Inverted,
}

impl From<DistanceArg> for DistanceTerm {
    fn from(v: DistanceArg) -> DistanceTerm {
        match v {
            DistanceArg::Direct => DistanceTerm::Direct,
            DistanceArg::Inverted => DistanceTerm::Inverted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MockArg {
    Consistent,
    Jittered,
}

impl From<MockArg> for MockMode {
    fn from(v: MockArg) -> MockMode {
        match v {
            MockArg::Consistent => MockMode::Consistent,
            MockArg::Jittered => MockMode::Jittered,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderSourceArg {
    /// The baked colored mesh (baked.ply).
    Baked,
    /// Bake the named checkpoint in memory first.
    Checkpoint,
    /// The untextured working mesh, all vertices white.
    Untextured,
}

/// Dispatch a parsed command line. Returns the one-line success summary;
/// errors carry single-line messages.
pub fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A second build_global in the same process keeps the first pool;
        // per-command processes (the normal case) get exactly n workers.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ws_root = cli.workspace.ok_or(CliError::NoWorkspace)?;
    match cli.command {
        Command::Prepare(args) => cmd_prepare(&ws_root, args, cli.force),
        Command::StylizeMock(args) => cmd_stylize_mock(&ws_root, args, cli.force),
        Command::Train(args) => cmd_train(&ws_root, args, cli.force),
        Command::Bake(args) => cmd_bake(&ws_root, args, cli.force),
        Command::Render(args) => cmd_render(&ws_root, args, cli.force),
        Command::Eval(args) => cmd_eval(&ws_root, args, cli.force),
    }
}

fn cmd_prepare(ws_root: &Path, args: PrepareArgs, force: bool) -> Result<String, CliError> {
    let base_dir = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut config = PipelineConfig::load(&args.config)?;
    args.overrides.apply(&mut config);
    config.validate(&base_dir)?;

    let mesh_path = config.resolved_mesh(&base_dir);
    let mesh_fingerprint = sha256_file(&mesh_path)?;
    let skeleton_import = config.resolved_skeleton(&base_dir);
    let source = match &skeleton_import {
        Some(p) => SkeletonSource::Import(p),
        None => SkeletonSource::Derive,
    };
    let stamp = prepare_stamp(&config.train, &mesh_fingerprint, &skeleton_source_note(source)?);

    let ws = Workspace::create(ws_root)?;
    if !force {
        if let Ok(manifest) = ws.load_manifest() {
            if manifest.stage_is_current(&ws, "prepare", &stamp) {
                return Ok(format!("prepare: up to date ({} views)", config.train.views));
            }
        }
    }
    let mesh = load_mesh(&mesh_path)?;
    let outcome = prepare_views_with(&ws, &mesh, &config.train, &mesh_fingerprint, source)?;
    Ok(format!(
        "prepare: {} views over {} vertices ({} skeleton nodes)",
        outcome.poses.len(),
        outcome.mesh.vertex_count(),
        outcome.skeleton.node_count()
    ))
}

fn cmd_stylize_mock(ws_root: &Path, args: StylizeArgs, force: bool) -> Result<String, CliError> {
    let ws = Workspace::open(ws_root)?;
    let mode: MockMode = args.mode.into();
    if !force {
        let manifest = ws.load_manifest()?;
        if let Some(prep) = manifest.stages.get("prepare") {
            let stamp = stylize_stamp(mode, args.seed, &prep.stamp);
            if manifest.stage_is_current(&ws, "stylize", &stamp) {
                return Ok(format!("stylize-mock: up to date ({mode}, seed {})", args.seed));
            }
        }
    }
    let dir = mock_stylize(&ws, mode, args.seed)?;
    Ok(format!("stylize-mock: {mode} targets in {}", dir.display()))
}

fn cmd_train(ws_root: &Path, args: TrainArgs, force: bool) -> Result<String, CliError> {
    let ws = Workspace::open(ws_root)?;
    let config = workspace_config(&ws)?;
    let fingerprint = targets_fingerprint(&ws, args.targets.as_deref())?;
    let stamp = train_stamp(&config, &fingerprint);
    if !force && ws.load_manifest()?.stage_is_current(&ws, "train", &stamp) {
        return Ok("train: up to date".to_string());
    }
    let ingested = ingest_targets(&ws, args.targets.as_deref())?;
    let mesh = load_mesh(&ws.mesh_path())?;
    let outcome = train(&ws, &mesh, &ingested.triplets, &config, &ingested.fingerprint)?;
    let first = outcome.history.first().map_or(0.0, |e| e.mean_loss);
    let last = outcome.history.last().map_or(0.0, |e| e.mean_loss);
    Ok(format!(
        "train: {} epochs over {} views, mean loss {first:.6} -> {last:.6}",
        outcome.history.len(),
        outcome.pose_ids.len()
    ))
}

fn checkpoint_file(ws: &Workspace, name: &str) -> PathBuf {
    let as_path = Path::new(name);
    if as_path.extension().is_some() || as_path.components().count() > 1 {
        as_path.to_path_buf()
    } else {
        ws.checkpoint_path(name)
    }
}

fn cmd_bake(ws_root: &Path, args: BakeArgs, force: bool) -> Result<String, CliError> {
    let ws = Workspace::open(ws_root)?;
    let ckpt_path = checkpoint_file(&ws, &args.checkpoint);
    let stamp = sha256_bytes(
        format!("bake|{}|{}", sha256_file(&ckpt_path)?, sha256_file(&ws.mesh_path())?).as_bytes(),
    );
    let tracked = args.out.is_none();
    let out = args.out.unwrap_or_else(|| ws.baked_mesh_path());
    if tracked && !force && ws.load_manifest()?.stage_is_current(&ws, "bake", &stamp) {
        return Ok(format!("bake: up to date ({})", out.display()));
    }

    let mesh = load_mesh(&ws.mesh_path())?;
    let checkpoint = load_checkpoint(&ckpt_path)?;
    let baked = bake(&mesh, &checkpoint)?;
    export_mesh(&baked, &out)?;
    if tracked {
        let mut manifest = ws.load_manifest()?;
        manifest.invalidate_from(&STAGE_ORDER, "bake");
        manifest.record_stage(&ws, "bake", &stamp, &[out.clone()])?;
        ws.save_manifest(&manifest)?;
    }
    Ok(format!("bake: {} colored vertices -> {}", baked.vertex_count(), out.display()))
}

/// `count` node ids spread evenly along the skeleton's longest path.
fn spread_stations(path: &[u32], count: usize) -> Result<Vec<u32>, CliError> {
    if count < 2 {
        return Err(CliError::Usage(format!("--stations must be at least 2, got {count}")));
    }
    if path.len() < 2 {
        return Err(CliError::Usage(format!(
            "skeleton's longest path has {} node(s); need at least 2 to build a trajectory",
            path.len()
        )));
    }
    let count = count.min(path.len());
    Ok((0..count)
        .map(|j| path[(j as f64 * (path.len() - 1) as f64 / (count - 1) as f64).round() as usize])
        .collect())
}

fn cmd_render(ws_root: &Path, args: RenderArgs, force: bool) -> Result<String, CliError> {
    let ws = Workspace::open(ws_root)?;
    let config = workspace_config(&ws)?;
    let intr = config.intrinsics();
    let shading: ShadeMode = args.shading.into();

    let (mesh, source_note): (TriMesh, String) = match args.source {
        RenderSourceArg::Baked => {
            let path = ws.baked_mesh_path();
            let mesh = load_mesh(&path)?;
            if mesh.colors.is_none() {
                return Err(CliError::Usage(format!(
                    "{} carries no vertex colors; bake first or render --source untextured",
                    path.display()
                )));
            }
            (mesh, format!("baked:{}", sha256_file(&path)?))
        }
        RenderSourceArg::Checkpoint => {
            let ckpt_path = checkpoint_file(&ws, &args.checkpoint);
            let checkpoint = load_checkpoint(&ckpt_path)?;
            let mesh = load_mesh(&ws.mesh_path())?;
            (bake(&mesh, &checkpoint)?, format!("checkpoint:{}", sha256_file(&ckpt_path)?))
        }
        RenderSourceArg::Untextured => {
            let path = ws.mesh_path();
            let mesh = load_mesh(&path)?;
            let n = mesh.vertex_count();
            (mesh.with_colors(vec![[1.0; 3]; n]), format!("untextured:{}", sha256_file(&path)?))
        }
    };
    let colors = mesh.colors.clone().expect("every source above attaches colors");

    let skeleton = SkeletonGraph::load_json(&ws.skeleton_path())?;
    let stations = spread_stations(&skeleton.longest_path(), args.stations)?;
    let poses = interpolate_trajectory(&skeleton, &stations, args.frames_per_segment)?;

    let shading_arg = args.shading;
    let stamp = sha256_bytes(
        format!(
            "render|{source_note}|{shading_arg:?}|{}|{}|{}",
            args.stations,
            args.frames_per_segment,
            serde_json::to_string(&config).expect("config serializes"),
        )
        .as_bytes(),
    );
    let tracked = args.out.is_none();
    let out = args.out.unwrap_or_else(|| ws.frames_dir());
    if tracked && !force && ws.load_manifest()?.stage_is_current(&ws, "render", &stamp) {
        return Ok(format!("render: up to date ({})", out.display()));
    }

    let mut images = Vec::with_capacity(poses.len());
    let mut fragment_buffers = Vec::with_capacity(poses.len());
    for pose in &poses {
        let frag = rasterize(&mesh, pose, &intr);
        images.push(shade(&colors, &frag, shading, pose)?);
        fragment_buffers.push(frag);
    }
    let written = crate::eval::export_sfm_bundle(&out, &images, &fragment_buffers, &poses, &intr)?;
    if tracked {
        let mut manifest = ws.load_manifest()?;
        manifest.invalidate_from(&STAGE_ORDER, "render");
        manifest.record_stage(&ws, "render", &stamp, &written)?;
        ws.save_manifest(&manifest)?;
    }
    Ok(format!("render: {} frames -> {}", poses.len(), out.display()))
}

/// Order-stable content hash of a bundle directory (every file, by relative
/// path).
fn bundle_fingerprint(dir: &Path) -> Result<String, CliError> {
    fn walk(dir: &Path, base: &Path, acc: &mut Vec<(String, PathBuf)>) -> std::io::Result<()> {
        let mut entries: Vec<_> =
            std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(&path, base, acc)?;
            } else {
                let rel = path
                    .strip_prefix(base)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .replace('\\', "/");
                acc.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)
        .map_err(|source| CliError::Workspace(WorkspaceError::Io {
            path: dir.display().to_string(),
            source,
        }))?;
    let mut parts = String::new();
    for (rel, path) in files {
        parts.push_str(&format!("{rel}:{};", sha256_file(&path)?));
    }
    Ok(sha256_bytes(parts.as_bytes()))
}

fn cmd_eval(ws_root: &Path, args: EvalArgs, force: bool) -> Result<String, CliError> {
    let ws = Workspace::open(ws_root)?;
    if args.k.is_empty() {
        return Err(CliError::Usage("--k needs at least one frame gap".into()));
    }
    let params = EvalParams {
        detector: DetectorParams { threshold: args.threshold, max_keypoints: args.max_keypoints },
        descriptor_seed: args.descriptor_seed,
        max_hamming: args.max_hamming,
        tol_mm: args.tol_mm,
    };
    let tracked = args.bundle.is_none() && args.baseline.is_none() && args.out.is_none();
    let bundle_dir = args.bundle.unwrap_or_else(|| ws.frames_dir());
    let out = args.out.unwrap_or_else(|| ws.eval_dir());

    let mut stamp_parts = format!(
        "eval|{}|{:?}|{}",
        serde_json::to_string(&params).expect("params serialize"),
        args.k,
        bundle_fingerprint(&bundle_dir)?,
    );
    if let Some(b) = &args.baseline {
        stamp_parts.push_str(&format!("|{}", bundle_fingerprint(b)?));
    }
    let stamp = sha256_bytes(stamp_parts.as_bytes());
    if tracked && !force && ws.load_manifest()?.stage_is_current(&ws, "eval", &stamp) {
        return Ok(format!("eval: up to date ({})", out.display()));
    }

    let evaluate = |dir: &Path| -> Result<Vec<MatchReport>, CliError> {
        let frames = load_bundle(dir)?;
        args.k.iter().map(|&k| orb_k(&frames, k, &params).map_err(CliError::from)).collect()
    };

    std::fs::create_dir_all(&out).map_err(|source| {
        CliError::Workspace(WorkspaceError::Io { path: out.display().to_string(), source })
    })?;
    let reports = evaluate(&bundle_dir)?;
    let csv_path = out.join("orb.csv");
    let json_path = out.join("orb.json");
    write_reports_csv(&csv_path, &reports)?;
    write_reports_json(&json_path, &reports)?;
    let mut written = vec![csv_path, json_path];
    let mut summary: Vec<String> = reports
        .iter()
        .map(|r| format!("k={}: {:.1}% of {}", r.k, r.accuracy(), r.total_matches))
        .collect();

    if let Some(baseline_dir) = &args.baseline {
        let reports = evaluate(baseline_dir)?;
        let csv_path = out.join("orb_baseline.csv");
        let json_path = out.join("orb_baseline.json");
        write_reports_csv(&csv_path, &reports)?;
        write_reports_json(&json_path, &reports)?;
        written.extend([csv_path, json_path]);
        summary.extend(
            reports
                .iter()
                .map(|r| format!("baseline k={}: {:.1}% of {}", r.k, r.accuracy(), r.total_matches)),
        );
    }

    if tracked {
        let mut manifest = ws.load_manifest()?;
        manifest.invalidate_from(&STAGE_ORDER, "eval");
        manifest.record_stage(&ws, "eval", &stamp, &written)?;
        ws.save_manifest(&manifest)?;
    }
    Ok(format!("eval: {}", summary.join("; ")))
}

//! On-disk run directory: fixed layout, stage manifest, content hashing.
//!
//! Every pipeline stage reads its inputs from and writes its outputs into a
//! single workspace directory. The manifest records which stages have run,
//! a stamp summarizing the inputs each stage saw, and a SHA-256 hash of every
//! artifact the stage produced. A stage whose stamp and artifact hashes still
//! match can be skipped; `--force` is the only way to redo matching work.
//!
//! Layout under the workspace root:
//!
//! ```text
//! manifest.json            stage records + config snapshot
//! mesh.ply                 working mesh (f32 positions, shared by all stages)
//! poses.json               training camera poses
//! skeleton.json            interior graph the poses were sampled from
//! renders/A_{id}.png       untextured renders, one per training pose
//! heatmaps/H_{id}.f32      per-pixel loss weights (raw f32 grid)
//! heatmaps/H_{id}.png      the same weights as 8-bit grayscale, for eyeballs
//! targets/B_{id}.png       stylized targets the trainer fits
//! checkpoints/*.mbrush     model snapshots
//! logs/loss.csv            per-epoch training losses
//! baked.ply                mesh with trained per-vertex colors
//! frames/                  trajectory renders for evaluation
//! eval/                    feature-matching reports and SfM export
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA: &str = "endobrush-manifest/1";

/// Pipeline stages in dependency order; redoing one invalidates everything
/// after it.
pub const STAGE_ORDER: [&str; 6] = ["prepare", "stylize", "train", "bake", "render", "eval"];

/// Subdirectories created by [`Workspace::create`].
const SUBDIRS: [&str; 6] = ["renders", "heatmaps", "targets", "checkpoints", "logs", "eval"];

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("workspace root {0} does not exist (run prepare first)")]
    Missing(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    /// Create the workspace directory tree (idempotent) and return a handle.
    pub fn create(root: &Path) -> Result<Workspace, WorkspaceError> {
        let ioerr = |p: &Path| {
            let path = p.display().to_string();
            move |source| WorkspaceError::Io { path, source }
        };
        std::fs::create_dir_all(root).map_err(ioerr(root))?;
        for sub in SUBDIRS {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(ioerr(&dir))?;
        }
        Ok(Workspace { root: root.to_path_buf() })
    }

    /// Open an existing workspace; errors if the root is missing.
    pub fn open(root: &Path) -> Result<Workspace, WorkspaceError> {
        if !root.is_dir() {
            return Err(WorkspaceError::Missing(root.display().to_string()));
        }
        Ok(Workspace { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn mesh_path(&self) -> PathBuf {
        self.root.join("mesh.ply")
    }

    pub fn poses_path(&self) -> PathBuf {
        self.root.join("poses.json")
    }

    pub fn skeleton_path(&self) -> PathBuf {
        self.root.join("skeleton.json")
    }

    pub fn render_path(&self, pose_id: u32) -> PathBuf {
        self.root.join("renders").join(format!("A_{pose_id}.png"))
    }

    pub fn heatmap_path(&self, pose_id: u32) -> PathBuf {
        self.root.join("heatmaps").join(format!("H_{pose_id}.f32"))
    }

    pub fn heatmap_png_path(&self, pose_id: u32) -> PathBuf {
        self.root.join("heatmaps").join(format!("H_{pose_id}.png"))
    }

    pub fn target_path(&self, pose_id: u32) -> PathBuf {
        self.root.join("targets").join(format!("B_{pose_id}.png"))
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.mbrush"))
    }

    pub fn loss_csv_path(&self) -> PathBuf {
        self.root.join("logs").join("loss.csv")
    }

    pub fn baked_mesh_path(&self) -> PathBuf {
        self.root.join("baked.ply")
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.root.join("frames")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    /// Path of an artifact relative to the root, as stored in the manifest.
    pub fn relative<'a>(&self, path: &'a Path) -> &'a Path {
        path.strip_prefix(&self.root).unwrap_or(path)
    }

    pub fn load_manifest(&self) -> Result<Manifest, WorkspaceError> {
        let path = self.manifest_path();
        let text = std::fs::read_to_string(&path)
            .map_err(|source| WorkspaceError::Io { path: path.display().to_string(), source })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
            WorkspaceError::Manifest { path: path.display().to_string(), message: e.to_string() }
        })?;
        if manifest.schema != MANIFEST_SCHEMA {
            return Err(WorkspaceError::Manifest {
                path: path.display().to_string(),
                message: format!(
                    "schema {:?} is not the supported {MANIFEST_SCHEMA:?}",
                    manifest.schema
                ),
            });
        }
        Ok(manifest)
    }

    /// Load the manifest if present, otherwise start a fresh one.
    pub fn load_or_new_manifest(&self) -> Result<Manifest, WorkspaceError> {
        if self.manifest_path().is_file() {
            self.load_manifest()
        } else {
            Ok(Manifest::new())
        }
    }

    pub fn save_manifest(&self, manifest: &Manifest) -> Result<(), WorkspaceError> {
        let path = self.manifest_path();
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        std::fs::write(&path, text.as_bytes())
            .map_err(|source| WorkspaceError::Io { path: path.display().to_string(), source })
    }
}

/// Record of the stages that have run in a workspace.
///
/// `stages` and each stage's artifact map are ordered maps so the serialized
/// manifest is byte-stable for identical runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub schema: String,
    /// Snapshot of the pipeline configuration the workspace was prepared with.
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    /// SHA-256 over a canonical description of the stage's inputs; two runs
    /// with the same stamp would produce the same artifacts.
    pub stamp: String,
    /// Workspace-relative artifact path -> SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Manifest {
        Manifest {
            schema: MANIFEST_SCHEMA.to_string(),
            config: serde_json::Value::Null,
            stages: BTreeMap::new(),
        }
    }

    /// Hash the listed artifact files and store the stage record.
    pub fn record_stage(
        &mut self,
        ws: &Workspace,
        stage: &str,
        stamp: &str,
        artifacts: &[PathBuf],
    ) -> Result<(), WorkspaceError> {
        let mut map = BTreeMap::new();
        for path in artifacts {
            let rel = ws.relative(path).to_string_lossy().replace('\\', "/");
            map.insert(rel, sha256_file(path)?);
        }
        self.stages
            .insert(stage.to_string(), StageRecord { stamp: stamp.to_string(), artifacts: map });
        Ok(())
    }

    /// True when the stage ran with the same stamp and every artifact it
    /// produced still hashes to the recorded value. Missing or modified files
    /// make the stage stale.
    pub fn stage_is_current(&self, ws: &Workspace, stage: &str, stamp: &str) -> bool {
        let Some(record) = self.stages.get(stage) else {
            return false;
        };
        if record.stamp != stamp {
            return false;
        }
        record.artifacts.iter().all(|(rel, expected)| {
            let path = ws.root().join(rel);
            matches!(sha256_file(&path), Ok(h) if h == *expected)
        })
    }

    /// Remove a stage record and the records of every stage listed after it,
    /// used when a stage is about to be redone so downstream results do not
    /// masquerade as current.
    pub fn invalidate_from(&mut self, stages_in_order: &[&str], first_stale: &str) {
        let Some(pos) = stages_in_order.iter().position(|s| *s == first_stale) else {
            return;
        };
        for stage in &stages_in_order[pos..] {
            self.stages.remove(*stage);
        }
    }
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest::new()
    }
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String, WorkspaceError> {
    let bytes = std::fs::read(path)
        .map_err(|source| WorkspaceError::Io { path: path.display().to_string(), source })?;
    Ok(sha256_bytes(&bytes))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_builds_the_expected_tree() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ws");
        let ws = Workspace::create(&root).unwrap();
        for sub in SUBDIRS {
            assert!(root.join(sub).is_dir(), "{sub} missing");
        }
        assert_eq!(ws.render_path(3), root.join("renders/A_3.png"));
        assert_eq!(ws.heatmap_path(12), root.join("heatmaps/H_12.f32"));
        assert_eq!(ws.target_path(0), root.join("targets/B_0.png"));
        assert_eq!(ws.checkpoint_path("final"), root.join("checkpoints/final.mbrush"));
        // creating again over the existing tree is fine
        Workspace::create(&root).unwrap();
    }

    #[test]
    fn open_requires_an_existing_root() {
        let dir = tempfile::tempdir().unwrap();
        let err = Workspace::open(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, WorkspaceError::Missing(_)));
    }

    #[test]
    fn sha256_matches_the_published_test_vector() {
        // FIPS 180-2 appendix B.1: SHA-256("abc")
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            sha256_bytes(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn manifest_round_trips_and_serializes_stably() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(&dir.path().join("ws")).unwrap();
        let art = ws.root().join("renders/A_0.png");
        std::fs::write(&art, b"abc").unwrap();

        let mut manifest = Manifest::new();
        manifest.config = serde_json::json!({"epochs": 3});
        manifest.record_stage(&ws, "prepare", "stamp-1", &[art.clone()]).unwrap();
        ws.save_manifest(&manifest).unwrap();

        let loaded = ws.load_manifest().unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(
            loaded.stages["prepare"].artifacts["renders/A_0.png"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );

        let first = std::fs::read(ws.manifest_path()).unwrap();
        ws.save_manifest(&loaded).unwrap();
        let second = std::fs::read(ws.manifest_path()).unwrap();
        assert_eq!(first, second, "re-saving an unchanged manifest changes bytes");
    }

    #[test]
    fn stage_currency_tracks_stamp_and_artifact_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(&dir.path().join("ws")).unwrap();
        let art = ws.root().join("targets/B_0.png");
        std::fs::write(&art, b"first").unwrap();

        let mut manifest = Manifest::new();
        manifest.record_stage(&ws, "stylize", "stamp-A", &[art.clone()]).unwrap();

        assert!(manifest.stage_is_current(&ws, "stylize", "stamp-A"));
        assert!(!manifest.stage_is_current(&ws, "stylize", "stamp-B"), "stamp change");
        assert!(!manifest.stage_is_current(&ws, "train", "stamp-A"), "unknown stage");

        std::fs::write(&art, b"tampered").unwrap();
        assert!(!manifest.stage_is_current(&ws, "stylize", "stamp-A"), "artifact edited");

        std::fs::remove_file(&art).unwrap();
        assert!(!manifest.stage_is_current(&ws, "stylize", "stamp-A"), "artifact removed");
    }

    #[test]
    fn invalidation_clears_the_stage_and_everything_after_it() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(&dir.path().join("ws")).unwrap();
        let order = ["prepare", "stylize", "train", "bake"];
        let mut manifest = Manifest::new();
        for stage in order {
            manifest.record_stage(&ws, stage, "s", &[]).unwrap();
        }
        manifest.invalidate_from(&order, "train");
        assert!(manifest.stages.contains_key("prepare"));
        assert!(manifest.stages.contains_key("stylize"));
        assert!(!manifest.stages.contains_key("train"));
        assert!(!manifest.stages.contains_key("bake"));
    }

    #[test]
    fn missing_manifest_starts_fresh_but_corrupt_manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(&dir.path().join("ws")).unwrap();
        let fresh = ws.load_or_new_manifest().unwrap();
        assert!(fresh.stages.is_empty());

        std::fs::write(ws.manifest_path(), b"{not json").unwrap();
        assert!(matches!(ws.load_manifest(), Err(WorkspaceError::Manifest { .. })));

        let wrong_schema = serde_json::json!({
            "schema": "endobrush-manifest/999", "config": null, "stages": {}
        });
        std::fs::write(ws.manifest_path(), serde_json::to_vec(&wrong_schema).unwrap()).unwrap();
        assert!(matches!(ws.load_manifest(), Err(WorkspaceError::Manifest { .. })));
    }
}

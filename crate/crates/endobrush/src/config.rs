//! Declarative pipeline configuration: one JSON file drives every stage.
//!
//! The file carries a versioned `schema` tag and rejects unknown keys, so a
//! typo in a hyperparameter name fails loudly instead of silently training
//! with a default. Validation collects **all** problems at once, each line
//! naming the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::trainer::TrainConfig;

/// Format tag every config file must carry.
pub const CONFIG_SCHEMA: &str = "endobrush-config/1";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config {path} does not parse: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {}", violations.join("; "))]
    Invalid { violations: Vec<String> },
}

/// Everything one pipeline run needs, as written in the config file.
///
/// Relative paths are resolved against the directory the file lives in, so a
/// config can travel with its fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Must equal [`CONFIG_SCHEMA`].
    pub schema: String,
    /// Input surface mesh (PLY).
    pub mesh: PathBuf,
    /// Optional precomputed centerline (skeleton JSON). When absent the
    /// skeleton is derived from the mesh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<PathBuf>,
    /// Every numeric knob of the pipeline.
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn new(mesh: impl Into<PathBuf>, train: TrainConfig) -> Self {
        PipelineConfig { schema: CONFIG_SCHEMA.to_string(), mesh: mesh.into(), skeleton: None, train }
    }

    /// Parse a config file. Unknown keys and malformed values are reported
    /// with the file's path; call [`PipelineConfig::validate`] afterwards for
    /// range and existence checks.
    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
    }

    /// Every violated constraint (empty = valid): schema tag, referenced
    /// paths, and the numeric ranges of the embedded training config
    /// (reported under `train.`). Relative paths resolve against `base_dir`.
    pub fn violations(&self, base_dir: &Path) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema != CONFIG_SCHEMA {
            v.push(format!("schema: expected {CONFIG_SCHEMA:?}, got {:?}", self.schema));
        }
        if !self.resolved_mesh(base_dir).is_file() {
            v.push(format!("mesh: no file at {}", self.resolved_mesh(base_dir).display()));
        }
        if let Some(resolved) = self.resolved_skeleton(base_dir) {
            if !resolved.is_file() {
                v.push(format!("skeleton: no file at {}", resolved.display()));
            }
        }
        v.extend(self.train.violations().into_iter().map(|t| format!("train.{t}")));
        v
    }

    pub fn validate(&self, base_dir: &Path) -> Result<(), ConfigError> {
        let violations = self.violations(base_dir);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid { violations })
        }
    }

    /// The mesh path resolved against `base_dir`.
    pub fn resolved_mesh(&self, base_dir: &Path) -> PathBuf {
        resolve(base_dir, &self.mesh)
    }

    /// The skeleton import path resolved against `base_dir`, if one is set.
    pub fn resolved_skeleton(&self, base_dir: &Path) -> Option<PathBuf> {
        self.skeleton.as_ref().map(|p| resolve(base_dir, p))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

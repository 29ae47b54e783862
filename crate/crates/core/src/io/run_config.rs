//! Top-level run configuration, read from and written as JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::distill::{DistillWeights, TrainPlan};
use crate::error::{Result, SitError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Teacher checkpoint (distillation input).
    pub teacher: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub similarity_threshold: f64,
    pub top_k: Vec<usize>,
    /// Number of images averaged by `diagnose`.
    pub samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            similarity_threshold: 0.7,
            top_k: vec![4, 8, 16],
            samples: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_size: 16,
            warmup: 2,
            iterations: 7,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainPlan,
    pub distill: DistillWeights,
    pub paths: Paths,
    pub diagnostics: DiagnosticsConfig,
    pub bench: BenchConfig,
    /// Train and evaluate in f64 instead of f32.
    pub f64: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk_student(),
            train: TrainPlan::default(),
            distill: DistillWeights::default(),
            paths: Paths::default(),
            diagnostics: DiagnosticsConfig::default(),
            bench: BenchConfig::default(),
            f64: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = super::read_file(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| SitError::Format(format!("{}: {e}", path.display())))?;
        Self::from_json(text).map_err(|e| match e {
            SitError::Json(j) => SitError::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.distill.validate(self.train.hard_teacher.is_some())?;
        if !(0.0..=1.0).contains(&self.diagnostics.similarity_threshold) {
            return Err(SitError::Config(
                "similarity_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

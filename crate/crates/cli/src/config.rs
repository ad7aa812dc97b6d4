//! TOML run configuration for `loopx train`.

use std::fs;
use std::path::{Path, PathBuf};

use loopx::fusion::FusionParams;
use loopx::losses::LossConfig;
use loopx::model::ModelDims;
use loopx::trainer::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root; relative paths resolve against the config file's folder.
    pub dataset: PathBuf,
    /// Folder receiving checkpoints and the run log.
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub fusion: FusionParams,
    #[serde(default)]
    pub model: ModelDims,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.train.seed = cfg.seed;
        cfg.dataset = base.join(&cfg.dataset);
        cfg.output = base.join(&cfg.output);
        cfg.train.validate().map_err(|e| e.to_string())?;
        cfg.loss.validate().map_err(|e| e.to_string())?;
        cfg.fusion.validate().map_err(|e| e.to_string())?;
        cfg.model.validate().map_err(|e| e.to_string())?;
        if !cfg.dataset.is_dir() {
            return Err(format!("dataset {} is not a directory", cfg.dataset.display()));
        }
        if cfg.output.exists() && !cfg.output.is_dir() {
            return Err(format!("output {} exists and is not a directory", cfg.output.display()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| format!("{}: {e}", path.display()))
    }
}

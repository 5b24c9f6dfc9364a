//! Model directories and training config files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lic_core::checkpoint::load_model;
use lic_core::config::{Ablation, CodecConfig, Metric};
use lic_core::model::Model;
use lic_core::train::TrainConfig;
use serde::Deserialize;

/// Checkpoint of quality index `q` inside a model directory.
pub fn checkpoint_path(dir: &Path, q: usize) -> PathBuf {
    dir.join(format!("q{q}.ckpt"))
}

pub fn load_quality(dir: &Path, q: usize) -> anyhow::Result<Model> {
    let path = checkpoint_path(dir, q);
    if !path.exists() {
        bail!("no checkpoint for quality {q} at {}", path.display());
    }
    let (model, _) = load_model(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub preset: String,
    pub metric: Metric,
    pub quality: usize,
    pub ablation_case: usize,
    pub seed: u64,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection { preset: "desk".into(), metric: Metric::Mse, quality: 0, ablation_case: 0, seed: 0 }
    }
}

/// `[codec]` and `[train]` tables of a training config file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub codec: CodecSection,
    pub train: TrainConfig,
    /// Directory of training images; synthetic data when absent.
    pub data: Option<PathBuf>,
}

impl TrainFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }

    pub fn codec_config(&self) -> anyhow::Result<CodecConfig> {
        let mut cfg = CodecConfig::preset(&self.codec.preset)?;
        cfg.metric = self.codec.metric;
        cfg.lambda_index = self.codec.quality;
        cfg.ablation = Ablation::case(self.codec.ablation_case)?;
        cfg.seed = self.codec.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

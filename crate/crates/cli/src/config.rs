//! TOML training-config files.
//!
//! Scalar training keys sit at the top level; `[oem]`, `[se]`, and `[loss]`
//! override whole sections (missing keys inside a present section fall back
//! to the section defaults, not the preset). `[model]` selects the `preset`
//! (`desk` or `paper`) and backbone details; `[data]` points at manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use shapecorr_core::backbone::BackboneConfig;
use shapecorr_core::ensemble::SeConfig;
use shapecorr_core::model::ModelConfig;
use shapecorr_core::objectives::LossWeights;
use shapecorr_core::optim::OptimizerKind;
use shapecorr_core::orientation::OemConfig;
use shapecorr_core::training::TrainConfig;

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    preset: Option<String>,
    center_inputs: Option<bool>,
    backbone: Option<BackboneConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    steps: Option<u64>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    optimizer: Option<OptimizerKind>,
    seed: Option<u64>,
    checkpoint_every: Option<u64>,
    data: DataSection,
    #[serde(default)]
    model: ModelSection,
    oem: Option<OemConfig>,
    se: Option<SeConfig>,
    loss: Option<LossWeights>,
}

/// Fully resolved training setup.
#[derive(Debug, Clone)]
pub struct ResolvedTrainConfig {
    pub train: TrainConfig,
    pub manifest: PathBuf,
    /// Save a checkpoint every N steps (0 = final only).
    pub checkpoint_every: u64,
}

pub fn load_train_config(path: &Path) -> Result<ResolvedTrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: TrainFile =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;

    let mut model = match file.model.preset.as_deref() {
        None | Some("paper") => ModelConfig::default(),
        Some("desk") => ModelConfig::desk(),
        Some(other) => bail!("unknown model preset `{other}` (expected `desk` or `paper`)"),
    };
    if let Some(backbone) = file.model.backbone {
        model.backbone = backbone;
    }
    if let Some(center) = file.model.center_inputs {
        model.center_inputs = center;
    }
    if let Some(oem) = file.oem {
        model.oem = oem;
    }

    let defaults = TrainConfig::default();
    let train = TrainConfig {
        steps: file.steps.unwrap_or(defaults.steps),
        batch_size: file.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: file.learning_rate.unwrap_or(defaults.learning_rate),
        optimizer: file.optimizer.unwrap_or(defaults.optimizer),
        seed: file.seed.unwrap_or(defaults.seed),
        model,
        se: file.se.unwrap_or_default(),
        loss: file.loss.unwrap_or_default(),
    };
    train.validate().context("invalid training configuration")?;

    // The manifest path is relative to the config file's directory.
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(ResolvedTrainConfig {
        manifest: base.join(&file.data.manifest),
        checkpoint_every: file.checkpoint_every.unwrap_or(0),
        train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("train.toml");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), "[data]\nmanifest = \"train/manifest.csv\"\n");
        let cfg = load_train_config(&p).unwrap();
        assert_eq!(cfg.train.steps, 2000);
        assert_eq!(cfg.train.loss.lambda_sc, 10.0);
        assert_eq!(cfg.train.model.oem.k, 24);
        assert!(cfg.manifest.ends_with("train/manifest.csv"));
    }

    #[test]
    fn spec_named_keys_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(
            dir.path(),
            r#"
steps = 50
learning_rate = 0.002
optimizer = "sgd"

[data]
manifest = "m.csv"

[model]
preset = "desk"

[oem]
k = 16
bins = 8
gamma = 2.5
grl_weight = 0.7

[se]
sigma = 0.15
ema_decay = 0.995
beta = 0.5

[loss]
lambda_cc = 2.0
lambda_sc = 5.0
l1 = 0.2
alpha = 0.3
k = 6
reg_sign = "pos"
"#,
        );
        let cfg = load_train_config(&p).unwrap();
        assert_eq!(cfg.train.steps, 50);
        assert_eq!(cfg.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.train.model.oem.k, 16);
        assert_eq!(cfg.train.model.oem.gamma, 2.5);
        assert_eq!(cfg.train.model.oem.grl_weight, 0.7);
        assert_eq!(cfg.train.se.sigma, 0.15);
        assert_eq!(cfg.train.se.beta, 0.5);
        assert_eq!(cfg.train.loss.lambda_cc, 2.0);
        assert_eq!(cfg.train.loss.k, 6);
        // Desk preset applies to the backbone when [oem] overrides only oem.
        assert_eq!(cfg.train.model.backbone.channels, [16, 16, 32, 64]);
    }

    #[test]
    fn bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), "steps = 0\n[data]\nmanifest = \"m.csv\"\n");
        assert!(load_train_config(&p).is_err());
        let p2 = write_cfg(dir.path(), "nonsense = 1\n[data]\nmanifest = \"m.csv\"\n");
        assert!(load_train_config(&p2).is_err());
    }
}

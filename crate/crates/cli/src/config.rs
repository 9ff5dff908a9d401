//! The JSON run configuration shared by `train`, `eval` and `ablate`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use laploss_core::checkpoint::Precision;
use laploss_core::data::{AugmentationConfig, Split};
use laploss_core::losses::{AdversarialVariant, LossWeights, DEFAULT_RECONSTRUCTION_WEIGHT};
use laploss_core::models::{DiscriminatorSpec, GeneratorSpec};
use laploss_core::optim::OptimizerConfig;
use laploss_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// File the resolved configuration is echoed to inside the output directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelSection,
    pub loss: LossSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambdas: Vec<f64>,
    pub w: f64,
    pub variant: AdversarialVariant,
    pub wgan_clip: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        LossSection {
            lambdas: t.loss_weights.lambdas,
            w: DEFAULT_RECONSTRUCTION_WEIGHT,
            variant: t.variant,
            wgan_clip: t.wgan_clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training dataset root (`input/<scene>/...`, `gt/<scene>.png`).
    pub root: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    /// `null` disables augmentation.
    pub augment: Option<AugmentationConfig>,
    /// Loader threads; `null` reads `LAPLOSS_NUM_WORKERS`.
    pub workers: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            height: 64,
            width: 96,
            augment: Some(AugmentationConfig::default()),
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub optimizer_generator: OptimizerConfig,
    pub optimizer_discriminator: OptimizerConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr_generator: t.lr_generator,
            lr_discriminator: t.lr_discriminator,
            optimizer_generator: t.optimizer_generator,
            optimizer_discriminator: t.optimizer_discriminator,
            batch_size: t.batch_size,
            steps: t.steps,
            seed: t.seed,
            checkpoint_interval: t.checkpoint_interval,
            eval_interval: t.eval_interval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out dataset root; `null` skips evaluation during training.
    pub root: Option<PathBuf>,
    pub splits: Vec<Split>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            root: None,
            splits: Split::TEST.to_vec(),
        }
    }
}

impl RunConfigFile {
    /// Reads and validates `path`. Relative dataset paths are resolved
    /// against the file's directory so the echoed config is self-contained.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfigFile =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        for p in [&mut cfg.data.root, &mut cfg.eval.root].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.data.height == 0 || self.data.width == 0 {
            bail!("data.height and data.width must be positive");
        }
        laploss_core::pyramid::check_divisible(self.data.height, self.data.width, self.model.generator.level_count)?;
        if let Some(a) = &self.data.augment {
            a.validate()?;
        }
        if self.data.workers == Some(0) {
            bail!("data.workers must be at least 1");
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            generator: self.model.generator.clone(),
            discriminator: self.model.discriminator.clone(),
            loss_weights: LossWeights::new(self.loss.lambdas.clone(), self.loss.w),
            variant: self.loss.variant,
            lr_generator: self.train.lr_generator,
            lr_discriminator: self.train.lr_discriminator,
            optimizer_generator: self.train.optimizer_generator.clone(),
            optimizer_discriminator: self.train.optimizer_discriminator.clone(),
            wgan_clip: self.loss.wgan_clip,
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            seed: self.train.seed,
            checkpoint_interval: self.train.checkpoint_interval,
            eval_interval: self.train.eval_interval,
            precision: self.model.precision,
        }
    }

    /// Writes the fully resolved config to `dir`.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_document_resolves_to_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfigFile::load(&write(dir.path(), "{}")).unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        assert_eq!(cfg.train_config(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_depth() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            r#"{"modle": {}}"#,
            r#"{"model": {"generator": {"widht": 8}}}"#,
            r#"{"data": {"augment": {"hflip": 0.5}}}"#,
            r#"{"train": {"optimizer_generator": {"betas": 1}}}"#,
        ] {
            let err = RunConfigFile::load(&write(dir.path(), text)).unwrap_err();
            assert!(format!("{err:#}").contains("unknown field"), "{text}: {err:#}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            r#"{"loss": {"lambdas": [1.0, 1.0]}}"#,
            r#"{"train": {"lr_generator": 0}}"#,
            r#"{"data": {"height": 30}}"#,
            r#"{"train": {"batch_size": 0}}"#,
        ] {
            assert!(RunConfigFile::load(&write(dir.path(), text)).is_err(), "{text}");
        }
    }

    #[test]
    fn echoed_config_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"data": {"root": "train", "augment": null}, "loss": {"variant": "hinge"}, "train": {"steps": 7}}"#;
        let cfg = RunConfigFile::load(&write(dir.path(), text)).unwrap();
        assert!(cfg.data.root.as_ref().unwrap().is_absolute());
        let out = dir.path().join("out");
        let echoed = cfg.echo(&out).unwrap();
        assert_eq!(RunConfigFile::load(&echoed).unwrap(), cfg);
    }
}

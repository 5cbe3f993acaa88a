//! Model and training configuration.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Fusion wiring of the assembled model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Entry fusion in latent space, per-layer blocks with per-modality
    /// up-projection before fusion.
    Standard,
    /// Infrared input dropped entirely; prompter blocks run on a zero
    /// prompt stream and the infrared patch embedding does not exist.
    VisOnly,
    /// The entry fusion rule (fuse in latent, single up-projection) used
    /// inside every layer as well.
    UniFusion,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::VisOnly => "vis_only",
            Variant::UniFusion => "uni_fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "vis_only" => Ok(Variant::VisOnly),
            "uni_fusion" => Ok(Variant::UniFusion),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Standard => 0,
            Variant::VisOnly => 1,
            Variant::UniFusion => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Variant::Standard),
            1 => Ok(Variant::VisOnly),
            2 => Ok(Variant::UniFusion),
            other => Err(Error::Config(format!("unknown variant code {other}"))),
        }
    }
}

/// Full architecture plus prompter hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input size in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Encoder depth L.
    pub depth: usize,
    /// Token width C.
    pub width: usize,
    pub heads: usize,
    /// FFN hidden = mlp_ratio · width.
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// Latent dim of the entry prompter block.
    pub d_alpha: usize,
    /// Latent dim of the per-layer prompter blocks.
    pub d_beta: usize,
    /// Inverse split ratio r: the first ceil(d/r) latent channels are
    /// convolved inside the hybrid operation.
    pub split_ratio_inv: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl ModelConfig {
    /// Reference desk-scale geometry used by the synthetic benchmark.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 2.0,
            num_classes: 2,
            d_alpha: 8,
            d_beta: 16,
            split_ratio_inv: 4,
            variant: Variant::Standard,
            seed: 0,
        }
    }

    /// Large-model geometry for parameter accounting only; never allocated.
    pub fn vit_large_geometry() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            depth: 24,
            width: 1024,
            heads: 16,
            mlp_ratio: 4.0,
            num_classes: 2,
            d_alpha: 8,
            d_beta: 16,
            split_ratio_inv: 4,
            variant: Variant::Standard,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.d_alpha < 1 || self.d_beta < 1 {
            return Err(Error::Config("latent dims must be >= 1".into()));
        }
        if self.split_ratio_inv < 1 {
            return Err(Error::Config("split ratio r must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.mlp_ratio <= 0.0 || !self.mlp_ratio.is_finite() {
            return Err(Error::Config(format!("bad mlp_ratio {}", self.mlp_ratio)));
        }
        Ok(())
    }

    /// Tokens per image.
    pub fn num_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Token grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.mlp_ratio * self.width as f64).round() as usize
    }

    /// Channels convolved inside the hybrid operation for latent dim `d`.
    pub fn split_channels(&self, d: usize) -> usize {
        d.div_ceil(self.split_ratio_inv).min(d)
    }
}

/// Optimizer selection for a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Training recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed for batch shuffling (model init is seeded separately).
    pub seed: u64,
}

impl TrainConfig {
    /// Default toy recipe: SGD with the segmentation-style hyperparameters.
    pub fn toy() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 1e-3,
            weight_decay: 1e-1,
            epochs: 30,
            batch_size: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("bad weight decay {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs; serialized as TOML next to the run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::vit_large_geometry().validate().unwrap();
        assert_eq!(ModelConfig::toy().num_tokens(), 64);
    }

    #[test]
    fn validation_catches_bad_geometry() {
        let mut cfg = ModelConfig::toy();
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.d_beta = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_channels_examples() {
        let mut cfg = ModelConfig::toy();
        cfg.split_ratio_inv = 4;
        assert_eq!(cfg.split_channels(4), 1);
        assert_eq!(cfg.split_channels(16), 4);
        assert_eq!(cfg.split_channels(5), 2);
        cfg.split_ratio_inv = 1;
        assert_eq!(cfg.split_channels(4), 4);
    }

    #[test]
    fn run_config_toml_roundtrip() {
        let cfg = RunConfig::toy();
        let s = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&s).unwrap();
        assert_eq!(cfg, back);
    }
}

//! Run configuration: defaults, `key = value` files and per-key overrides.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::alignment::DEFAULT_TAU;
use crate::deformation::Padding;
use crate::encoders::ModelDims;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("optimizer must be sgd or adam, got {s:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub image_size: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub tau: f64,
    pub weights: LossWeights,
    pub no_alignment: bool,
    pub no_supervision: bool,
    pub no_fusion: bool,
    pub seed: u64,
    /// Generator/discriminator steps of the second phase.
    pub steps: usize,
    pub samples: usize,
    pub residual_blocks: usize,
    pub padding: Padding,
    /// Step budget and learning rate for fitting the sync expert heads.
    pub expert_steps: usize,
    pub expert_lr: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            image_size: 64,
            channels: 32,
            feature_dim: 128,
            batch_size: 4,
            lr: 1e-4,
            optimizer: OptimizerKind::Sgd,
            tau: DEFAULT_TAU,
            weights: LossWeights::default(),
            no_alignment: false,
            no_supervision: false,
            no_fusion: false,
            seed: 0,
            steps: 200,
            samples: 16,
            residual_blocks: 2,
            padding: Padding::Border,
            expert_steps: 500,
            expert_lr: 1e-2,
        }
    }
}

/// Every accepted key, in file order.
pub const CONFIG_KEYS: [&str; 22] = [
    "image_size",
    "channels",
    "feature_dim",
    "batch_size",
    "lr",
    "optimizer",
    "tau",
    "lambda_v",
    "lambda_p",
    "lambda_gan",
    "lambda_r",
    "lambda_con",
    "no_alignment",
    "no_supervision",
    "no_fusion",
    "seed",
    "steps",
    "samples",
    "residual_blocks",
    "padding",
    "expert_steps",
    "expert_lr",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl PipelineConfig {
    /// Settings for short overfitting runs: adaptive moments and a larger
    /// step size than the plain-SGD default.
    pub fn overfit() -> Self {
        PipelineConfig { optimizer: OptimizerKind::Adam, lr: 2e-3, ..PipelineConfig::default() }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims { image_size: self.image_size, channels: self.channels, feature_dim: self.feature_dim }
    }

    /// Sets one key; `-` and `_` are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "image_size" => self.image_size = parse(k, value)?,
            "channels" => self.channels = parse(k, value)?,
            "feature_dim" => self.feature_dim = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "tau" => self.tau = parse(k, value)?,
            "lambda_v" => self.weights.v = parse(k, value)?,
            "lambda_p" => self.weights.p = parse(k, value)?,
            "lambda_gan" => self.weights.gan = parse(k, value)?,
            "lambda_r" => self.weights.r = parse(k, value)?,
            "lambda_con" => self.weights.con = parse(k, value)?,
            "no_alignment" => self.no_alignment = parse_bool(k, value)?,
            "no_supervision" => self.no_supervision = parse_bool(k, value)?,
            "no_fusion" => self.no_fusion = parse_bool(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "steps" => self.steps = parse(k, value)?,
            "samples" => self.samples = parse(k, value)?,
            "residual_blocks" => self.residual_blocks = parse(k, value)?,
            "padding" => {
                self.padding = match value {
                    "border" => Padding::Border,
                    "zeros" => Padding::Zeros,
                    _ => return Err(Error::Config(format!("padding must be border or zeros, got {value:?}"))),
                }
            }
            "expert_steps" => self.expert_steps = parse(k, value)?,
            "expert_lr" => self.expert_lr = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.weights.validate()?;
        let positive = [
            ("lr", self.lr),
            ("tau", self.tau),
            ("expert_lr", self.expert_lr),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be ≥ 2 for the contrastive terms, got {}", self.batch_size)));
        }
        if self.samples < self.batch_size {
            return Err(Error::Config(format!("samples ({}) must be ≥ batch_size ({})", self.samples, self.batch_size)));
        }
        if self.residual_blocks == 0 {
            return Err(Error::Config("residual_blocks must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Renders the configuration in the file format.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let pad = match self.padding {
            Padding::Border => "border",
            Padding::Zeros => "zeros",
        };
        let values: [String; 22] = [
            self.image_size.to_string(),
            self.channels.to_string(),
            self.feature_dim.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.optimizer.to_string(),
            self.tau.to_string(),
            w.v.to_string(),
            w.p.to_string(),
            w.gan.to_string(),
            w.r.to_string(),
            w.con.to_string(),
            self.no_alignment.to_string(),
            self.no_supervision.to_string(),
            self.no_fusion.to_string(),
            self.seed.to_string(),
            self.steps.to_string(),
            self.samples.to_string(),
            self.residual_blocks.to_string(),
            pad.to_string(),
            self.expert_steps.to_string(),
            self.expert_lr.to_string(),
        ];
        CONFIG_KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!((c.image_size, c.channels, c.feature_dim, c.batch_size), (64, 32, 128, 4));
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.optimizer, OptimizerKind::Sgd);
    }

    #[test]
    fn file_format_with_comments_and_dashes() {
        let mut c = PipelineConfig::default();
        c.apply_text("# run\nseed = 7   # trailing\n\nlambda-con = 0\nno_fusion = true\noptimizer = adam\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.weights.con, 0.0);
        assert!(c.no_fusion);
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("seed 7").is_err());
        assert!(c.apply_text("seed = x").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = PipelineConfig::overfit();
        c.seed = 99;
        c.padding = Padding::Zeros;
        let mut back = PipelineConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_rejected() {
        for (k, v) in [("batch_size", "1"), ("lr", "0"), ("lambda_r", "-1"), ("image_size", "48"), ("samples", "2")] {
            let mut c = PipelineConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k} = {v}");
        }
    }
}

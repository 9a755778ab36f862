//! Run configuration read from flat `key = value` text files.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected so that typos cannot silently fall back to defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamConfig;

/// How the semantic label map enters the flow model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticMode {
    /// Frames only.
    None,
    /// One-hot heatmaps appended as input channels of both encoders.
    Concat,
    /// Heatmaps split into foreground and background stacks, each feeding
    /// its own sequence encoder.
    Split,
}

impl FromStr for SemanticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "concat" => Ok(Self::Concat),
            "split" => Ok(Self::Split),
            other => Err(Error::Config(format!("unknown semantic mode {other:?}"))),
        }
    }
}

impl fmt::Display for SemanticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Concat => "concat",
            Self::Split => "split",
        })
    }
}

/// Reduction applied to the KL divergence across latent dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReduction {
    /// Sum over latent dimensions, mean over the batch.
    Sum,
    /// Mean over latent dimensions and batch.
    Mean,
}

impl FromStr for KlReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("unknown kl reduction {other:?}"))),
        }
    }
}

impl fmt::Display for KlReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

/// Weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub smooth: f64,
    pub consistency: f64,
    pub l1: f64,
    pub occlusion: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            smooth: 1.0,
            consistency: 1.0,
            l1: 1.0,
            occlusion: 0.1,
            kl: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_r", self.recon),
            ("lambda_fs", self.smooth),
            ("lambda_fc", self.consistency),
            ("lambda_l1", self.l1),
            ("lambda_p", self.occlusion),
            ("beta", self.kl),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Number of predicted frames after `I_0`.
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub fg_classes: Vec<u8>,
    pub content_dim: usize,
    pub motion_dim: usize,
    /// Foreground share of `motion_dim` in split mode.
    pub fg_motion_dim: usize,
    /// Base channel width of every network.
    pub base_width: usize,
    pub weights: LossWeights,
    pub kl_reduction: KlReduction,
    pub semantic_mode: SemanticMode,
    /// `false` selects the ablation that regresses frames directly.
    pub use_flow: bool,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub train_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub perceptual_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            height: 128,
            width: 128,
            num_classes: 4,
            fg_classes: vec![1, 2, 3],
            content_dim: 128,
            motion_dim: 1024,
            fg_motion_dim: 896,
            base_width: 8,
            weights: LossWeights::default(),
            kl_reduction: KlReduction::Sum,
            semantic_mode: SemanticMode::Split,
            use_flow: true,
            adam: AdamConfig::default(),
            batch_size: 8,
            train_steps: 2000,
            checkpoint_every: 500,
            seed: 0,
            perceptual_seed: 1234,
        }
    }
}

/// Every recognised key, in the order written by [`RunConfig::to_text`].
pub const KEYS: &[&str] = &[
    "t",
    "height",
    "width",
    "num_classes",
    "fg_classes",
    "content_dim",
    "motion_dim",
    "fg_motion_dim",
    "base_width",
    "lambda_r",
    "lambda_fs",
    "lambda_fc",
    "lambda_l1",
    "lambda_p",
    "beta",
    "kl_reduction",
    "semantic_mode",
    "use_flow",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "train_steps",
    "checkpoint_every",
    "seed",
    "perceptual_seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_class_list(value: &str) -> Result<Vec<u8>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse("fg_classes", s)).collect()
}

impl RunConfig {
    /// Overrides one key. Used by both the file parser and CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "t" => self.steps = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "fg_classes" => self.fg_classes = parse_class_list(value)?,
            "content_dim" => self.content_dim = parse(key, value)?,
            "motion_dim" => self.motion_dim = parse(key, value)?,
            "fg_motion_dim" => self.fg_motion_dim = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "lambda_r" => self.weights.recon = parse(key, value)?,
            "lambda_fs" => self.weights.smooth = parse(key, value)?,
            "lambda_fc" => self.weights.consistency = parse(key, value)?,
            "lambda_l1" => self.weights.l1 = parse(key, value)?,
            "lambda_p" => self.weights.occlusion = parse(key, value)?,
            "beta" => self.weights.kl = parse(key, value)?,
            "kl_reduction" => self.kl_reduction = value.parse()?,
            "semantic_mode" => self.semantic_mode = value.parse()?,
            "use_flow" => self.use_flow = parse(key, value)?,
            "learning_rate" => self.adam.lr = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "train_steps" => self.train_steps = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "perceptual_seed" => self.perceptual_seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let classes: Vec<String> = self.fg_classes.iter().map(u8::to_string).collect();
        let values = [
            self.steps.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            self.num_classes.to_string(),
            classes.join(","),
            self.content_dim.to_string(),
            self.motion_dim.to_string(),
            self.fg_motion_dim.to_string(),
            self.base_width.to_string(),
            self.weights.recon.to_string(),
            self.weights.smooth.to_string(),
            self.weights.consistency.to_string(),
            self.weights.l1.to_string(),
            self.weights.occlusion.to_string(),
            self.weights.kl.to_string(),
            self.kl_reduction.to_string(),
            self.semantic_mode.to_string(),
            self.use_flow.to_string(),
            self.adam.lr.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.batch_size.to_string(),
            self.train_steps.to_string(),
            self.checkpoint_every.to_string(),
            self.seed.to_string(),
            self.perceptual_seed.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn bg_motion_dim(&self) -> usize {
        self.motion_dim.saturating_sub(self.fg_motion_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.steps < 1 {
            return Err(Error::Config("t must be >= 1".into()));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "frame size {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::Config("num_classes must be in 1..=256".into()));
        }
        if let Some(&c) = self.fg_classes.iter().find(|&&c| c as usize >= self.num_classes) {
            return Err(Error::Config(format!("fg class {c} >= num_classes")));
        }
        if self.semantic_mode == SemanticMode::Split {
            let n = self.fg_classes.len();
            if n == 0 || n >= self.num_classes {
                return Err(Error::Config(
                    "split mode needs a nonempty proper foreground class subset".into(),
                ));
            }
            if self.fg_motion_dim == 0 || self.fg_motion_dim >= self.motion_dim {
                return Err(Error::Config(
                    "fg_motion_dim must be in 1..motion_dim in split mode".into(),
                ));
            }
        }
        if self.content_dim == 0 || self.motion_dim == 0 || self.base_width == 0 {
            return Err(Error::Config("latent dims and base_width must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

//! JSON run configuration. Unknown keys are rejected; optional fields carry
//! the documented defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::allocate::{AllocationConfig, SublayerId};
use crate::decompose::Method;
use crate::harness::ToyModelConfig;

/// Shape of the generated toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyShape {
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn_width")]
    pub ffn_width: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
}

impl Default for ToyShape {
    fn default() -> Self {
        Self {
            vocab: default_vocab(),
            hidden: default_hidden(),
            heads: default_heads(),
            ffn_width: default_ffn_width(),
            layers: default_layers(),
        }
    }
}

fn default_vocab() -> usize {
    256
}
fn default_hidden() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_ffn_width() -> usize {
    172
}
fn default_layers() -> usize {
    4
}
fn default_alpha() -> f64 {
    0.35
}
fn default_epsilon() -> f64 {
    1e-3
}
fn default_rank_floor_ratio() -> f64 {
    0.1
}
fn default_clamp() -> [f64; 2] {
    [0.01, 0.95]
}
fn default_calib_sequences() -> usize {
    128
}
fn default_calib_tokens() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub target_ratio: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_rank_floor_ratio")]
    pub rank_floor_ratio: f64,
    #[serde(default = "default_clamp")]
    pub clamp: [f64; 2],
    #[serde(default)]
    pub skip_sublayers: Vec<String>,
    pub seed: u64,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub calib: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub toy: ToyShape,
    #[serde(default = "default_calib_sequences")]
    pub calib_sequences: usize,
    #[serde(default = "default_calib_tokens")]
    pub calib_tokens: usize,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self, IoError> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_from(path: &Path) -> Result<Self, IoError> {
        let json = std::fs::read_to_string(path).map_err(|e| super::io_err(path, e))?;
        Self::from_json(&json)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if !(0.0 < self.target_ratio && self.target_ratio < 1.0) {
            return Err(IoError::Config(format!(
                "target_ratio {} outside (0, 1)",
                self.target_ratio
            )));
        }
        if self.alpha < 0.0 {
            return Err(IoError::Config("alpha must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(IoError::Config("epsilon must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.rank_floor_ratio) {
            return Err(IoError::Config(format!(
                "rank_floor_ratio {} outside [0, 1)",
                self.rank_floor_ratio
            )));
        }
        let [lo, hi] = self.clamp;
        if !(0.0 <= lo && lo <= self.target_ratio && self.target_ratio <= hi && hi < 1.0) {
            return Err(IoError::Config(format!(
                "clamp [{lo}, {hi}] must contain target_ratio {} within [0, 1)",
                self.target_ratio
            )));
        }
        for s in &self.skip_sublayers {
            s.parse::<SublayerId>().map_err(IoError::Config)?;
        }
        if self.toy.vocab == 0
            || self.toy.hidden == 0
            || self.toy.heads == 0
            || self.toy.ffn_width == 0
            || self.toy.layers == 0
        {
            return Err(IoError::Config("toy dimensions must be positive".into()));
        }
        if self.toy.hidden % self.toy.heads != 0 {
            return Err(IoError::Config(format!(
                "toy hidden {} not divisible by heads {}",
                self.toy.hidden, self.toy.heads
            )));
        }
        if self.calib_sequences == 0 || self.calib_tokens == 0 {
            return Err(IoError::Config("calibration shape must be positive".into()));
        }
        Ok(())
    }

    pub fn toy_model_config(&self) -> ToyModelConfig {
        ToyModelConfig {
            vocab: self.toy.vocab,
            hidden: self.toy.hidden,
            heads: self.toy.heads,
            ffn_width: self.toy.ffn_width,
            layers: self.toy.layers,
            seed: self.seed,
            norm_eps: 1e-6,
        }
    }

    pub fn allocation_config(&self) -> Result<AllocationConfig, IoError> {
        let mut skip = BTreeSet::new();
        for s in &self.skip_sublayers {
            skip.insert(s.parse::<SublayerId>().map_err(IoError::Config)?);
        }
        Ok(AllocationConfig {
            target_ratio: self.target_ratio,
            alpha: self.alpha,
            epsilon: self.epsilon,
            rank_floor_ratio: self.rank_floor_ratio,
            skip_sublayers: skip,
            clamp_range: (self.clamp[0], self.clamp[1]),
        })
    }
}

use std::fmt;
use std::str::FromStr;

use crate::error::{check_dim, Error, Result};
use crate::nn::math::log_softmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Decoder alone.
    None,
    /// Pretrained, frozen LM whose logits are scaled by `gamma`.
    Separate,
    /// LM trained together with the decoder; logits are added unscaled.
    Joint,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::Separate => "separate",
            FusionMode::Joint => "joint",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "separate" => Ok(FusionMode::Separate),
            "joint" => Ok(FusionMode::Joint),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub gamma: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::None,
            gamma: 0.3,
        }
    }
}

impl FusionConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn separate(gamma: f64) -> Self {
        Self {
            mode: FusionMode::Separate,
            gamma,
        }
    }

    pub fn joint() -> Self {
        Self {
            mode: FusionMode::Joint,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma >= 0.0 && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("fusion gamma must be >= 0, got {}", self.gamma)))
        }
    }

    pub fn uses_lm(&self) -> bool {
        self.mode != FusionMode::None
    }

    /// Weight applied to the LM logits.
    pub fn lm_weight(&self) -> f64 {
        match self.mode {
            FusionMode::None => 0.0,
            FusionMode::Separate => self.gamma,
            FusionMode::Joint => 1.0,
        }
    }
}

/// Log-distribution over `U ∪ {eos}` from decoder (and LM) pre-softmax activations.
pub fn fuse(dec_pre: &[f64], lm_pre: Option<&[f64]>, cfg: &FusionConfig) -> Result<Vec<f64>> {
    if cfg.mode == FusionMode::None {
        return Ok(log_softmax(dec_pre));
    }
    let lm_pre = lm_pre.ok_or_else(|| Error::Config(format!("fusion mode `{}` needs LM logits", cfg.mode)))?;
    check_dim("fused logits", dec_pre.len(), lm_pre.len())?;
    let w = cfg.lm_weight();
    let combined: Vec<f64> = dec_pre.iter().zip(lm_pre).map(|(d, l)| d + w * l).collect();
    Ok(log_softmax(&combined))
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Positive rational channel multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Self {
        Self { num, den }
    }

    /// `base * num / den` when that is a positive integer.
    pub fn scale(&self, base: usize) -> Option<usize> {
        let prod = base.checked_mul(self.num as usize)?;
        if self.den == 0 || prod % self.den as usize != 0 || prod == 0 {
            return None;
        }
        Some(prod / self.den as usize)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |t: &str| {
            t.trim()
                .parse::<u32>()
                .map_err(|e| format!("bad ratio {s:?}: {e}"))
        };
        let r = match s.split_once('/') {
            Some((n, d)) => Ratio::new(parse(n)?, parse(d)?),
            None => Ratio::new(parse(s)?, 1),
        };
        if r.num == 0 || r.den == 0 {
            return Err(format!("ratio {s:?} must be positive"));
        }
        Ok(r)
    }
}

/// Magnitude conditioning applied to sampled vectors before the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    None,
    SignedLog,
}

impl FromStr for InputNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "signed_log" | "signed-log" => Ok(Self::SignedLog),
            _ => Err(format!("unknown input normalization {s:?}")),
        }
    }
}

pub const STAGE_BASE_CHANNELS: [usize; 4] = [64, 128, 256, 512];

/// Shape of the 1-D ResNet embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Input width.
    pub h: usize,
    /// Embedding dimension.
    pub k: usize,
    /// Stem width before the multiplier is applied.
    pub stem_channels: usize,
    pub block_counts: [usize; 4],
    pub width_multiplier: Ratio,
    pub input_norm: InputNorm,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            h: 100,
            k: 100,
            stem_channels: 64,
            block_counts: [2, 2, 2, 2],
            width_multiplier: Ratio::ONE,
            input_norm: InputNorm::SignedLog,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ArchConfig {
    /// Default topology at 1/8 width.
    pub fn desk() -> Self {
        Self {
            width_multiplier: Ratio::new(1, 8),
            ..Self::default()
        }
    }

    pub fn stem_width(&self) -> Result<usize, ModelError> {
        self.width_multiplier.scale(self.stem_channels).ok_or_else(|| {
            ModelError::InvalidArch(format!(
                "stem {} x {} is not a positive integer",
                self.stem_channels, self.width_multiplier
            ))
        })
    }

    /// Channels of the four stages after applying the multiplier.
    pub fn stage_channels(&self) -> Result<[usize; 4], ModelError> {
        let mut out = [0; 4];
        for (o, &base) in out.iter_mut().zip(&STAGE_BASE_CHANNELS) {
            *o = self.width_multiplier.scale(base).ok_or_else(|| {
                ModelError::InvalidArch(format!(
                    "{base} x {} is not a positive integer",
                    self.width_multiplier
                ))
            })?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.h == 0 || self.k == 0 {
            return Err(ModelError::InvalidArch("h and k must be positive".into()));
        }
        if self.block_counts.contains(&0) {
            return Err(ModelError::InvalidArch(
                "every stage needs at least one block".into(),
            ));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(ModelError::InvalidArch(
                "bn_eps must be positive and bn_momentum in (0, 1)".into(),
            ));
        }
        self.stem_width()?;
        self.stage_channels()?;
        Ok(())
    }
}

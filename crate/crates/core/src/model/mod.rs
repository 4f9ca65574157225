//! Network definition: compact convolutional backbone, per-face logit and
//! weight heads, the angular-margin loss, face weighting and the GRU stack.

pub mod afw;
pub mod arcface;
pub mod backbone;
pub mod gru;
pub mod heads;
mod init;
mod network;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use network::{bce_with_logit, FaceOutputs, Network, VideoOutputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Side of the square input patch.
    pub input_side: usize,
    /// Output channels of each stride-2 3×3 conv stage.
    pub channels: Vec<usize>,
    /// Feature dimension D.
    pub feature_dim: usize,
    /// Angular-margin loss scale `s`.
    pub arcface_scale: f64,
    /// Additive angular margin `m` in radians.
    pub arcface_margin: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { input_side: 64, channels: vec![8, 16, 32, 32], feature_dim: 128, arcface_scale: 30.0, arcface_margin: 0.35 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 {
            return Err(CoreError::config("feature_dim must be at least 8"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(CoreError::config("backbone needs at least one non-empty stage"));
        }
        if self.input_side == 0 {
            return Err(CoreError::config("input_side must be positive"));
        }
        if !(self.arcface_scale > 0.0) {
            return Err(CoreError::config("arcface_scale must be positive"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.arcface_margin) {
            return Err(CoreError::config("arcface_margin must lie in [0, π/2)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GruConfig {
    pub hidden: usize,
    pub bidirectional_layers: usize,
    pub unidirectional_layers: usize,
}

impl Default for GruConfig {
    fn default() -> Self {
        GruConfig { hidden: 64, bidirectional_layers: 3, unidirectional_layers: 1 }
    }
}

impl GruConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(CoreError::config("GRU hidden size must be positive"));
        }
        if self.unidirectional_layers == 0 {
            return Err(CoreError::config("GRU stack needs a final unidirectional layer"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gru: GruConfig,
    /// Added to the weight sum in the face-weighting denominator.
    pub afw_eps: f64,
    /// Feed the face-weighted probability to the GRU as a constant
    /// (no gradient from the GRU loss flows back through it).
    pub detach_pw_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), gru: GruConfig::default(), afw_eps: 1e-8, detach_pw_input: true }
    }
}

impl ModelConfig {
    /// 2048-wide features, 224-pixel patches and a 512-wide GRU.
    pub fn full_scale() -> Self {
        ModelConfig {
            backbone: BackboneConfig { input_side: 224, channels: vec![32, 64, 128, 256], feature_dim: 2048, ..BackboneConfig::default() },
            gru: GruConfig { hidden: 512, ..GruConfig::default() },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.gru.validate()?;
        if !(self.afw_eps > 0.0) {
            return Err(CoreError::config("afw_eps must be positive"));
        }
        Ok(())
    }

    /// Width of each GRU input step: features, logit, weight and p_w.
    pub fn gru_input_dim(&self) -> usize {
        self.backbone.feature_dim + 3
    }
}

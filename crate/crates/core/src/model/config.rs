use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network dimensions. `vocab_size` counts every token id the LM side sees
/// (word pieces plus start/end symbols); the joint adds one output for blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub encoder_projection: usize,
    pub time_reduction_factor: usize,
    /// Number of encoder layers that run at the input frame rate before the
    /// time reduction (at most `encoder_layers - 1`).
    pub time_reduction_after: usize,
    pub prediction_layers: usize,
    pub prediction_width: usize,
    pub prediction_projection: usize,
    pub joint_hidden: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            encoder_layers: 2,
            encoder_width: 64,
            encoder_projection: 32,
            time_reduction_factor: 2,
            time_reduction_after: 1,
            prediction_layers: 2,
            prediction_width: 64,
            prediction_projection: 32,
            joint_hidden: 64,
            vocab_size: 60,
        }
    }
}

impl ModelConfig {
    pub fn output_dim(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn blank_id(&self) -> usize {
        self.vocab_size
    }

    pub fn reduced_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.time_reduction_factor)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("encoder_layers", self.encoder_layers),
            ("encoder_width", self.encoder_width),
            ("encoder_projection", self.encoder_projection),
            ("time_reduction_factor", self.time_reduction_factor),
            ("prediction_layers", self.prediction_layers),
            ("prediction_width", self.prediction_width),
            ("prediction_projection", self.prediction_projection),
            ("joint_hidden", self.joint_hidden),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        if self.time_reduction_after >= self.encoder_layers {
            return Err(Error::Invalid("time reduction must sit in front of an encoder layer".into()));
        }
        Ok(())
    }
}

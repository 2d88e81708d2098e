use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network hyperparameters. Two named profiles exist: [`ModelConfig::paper`]
/// for full-size inputs and [`ModelConfig::desk`] for 16³ toy data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_width: usize,
    pub stages: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub intra_layers: usize,
    pub corr_layers: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub alpha: f64,
    pub eps: f64,
    pub dropout: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper(2)
    }
}

impl ModelConfig {
    pub fn paper(num_classes: usize) -> Self {
        Self {
            base_width: 8,
            stages: 5,
            token_dim: 256,
            heads: 4,
            intra_layers: 4,
            corr_layers: 4,
            ffn_hidden: 512,
            head_hidden: 256,
            alpha: 0.3,
            eps: 1e-8,
            dropout: 0.1,
            num_classes,
        }
    }

    pub fn desk(num_classes: usize) -> Self {
        Self {
            base_width: 2,
            token_dim: 16,
            heads: 2,
            intra_layers: 1,
            corr_layers: 1,
            ffn_hidden: 32,
            head_hidden: 16,
            ..Self::paper(num_classes)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.stages != 5 {
            return bad(format!("stages must be 5, got {}", self.stages));
        }
        if self.base_width == 0 || self.token_dim == 0 || self.ffn_hidden == 0 || self.head_hidden == 0 {
            return bad("widths must be positive".into());
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return bad(format!("token_dim {} not divisible by heads {}", self.token_dim, self.heads));
        }
        if self.token_dim % 2 != 0 {
            return bad(format!("token_dim must be even, got {}", self.token_dim));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        Ok(())
    }
}

/// Channel width of encoder stage `s` (1-based): `2^(s-1) * base`.
pub fn channel_schedule(stage: usize, base_width: usize) -> Result<usize, ModelError> {
    if !(1..=5).contains(&stage) {
        return Err(ModelError::StageOutOfRange(stage));
    }
    Ok(base_width << (stage - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(channel_schedule(1, 8).unwrap(), 8);
        assert_eq!(channel_schedule(5, 8).unwrap(), 128);
        assert_eq!(channel_schedule(3, 2).unwrap(), 8);
        assert!(matches!(channel_schedule(0, 8), Err(ModelError::StageOutOfRange(0))));
        assert!(matches!(channel_schedule(6, 8), Err(ModelError::StageOutOfRange(6))));
    }

    #[test]
    fn profiles_validate() {
        ModelConfig::paper(4).validate().unwrap();
        ModelConfig::desk(2).validate().unwrap();
        assert!(ModelConfig { heads: 3, ..ModelConfig::desk(2) }.validate().is_err());
        assert!(ModelConfig { alpha: 0.0, ..ModelConfig::desk(2) }.validate().is_err());
        assert!(ModelConfig { num_classes: 1, ..ModelConfig::desk(2) }.validate().is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};

/// Shape and architecture hyperparameters of the multiscale detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Time steps per window.
    pub window_len: usize,
    /// Input channels per time step.
    pub feature_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers_per_scale: usize,
    pub ffn_dim: usize,
    /// Pooling factor of each scale path; strictly increasing, starting at 1.
    pub scale_factors: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_len: 60,
            feature_dim: 4,
            model_dim: 64,
            heads: 4,
            layers_per_scale: 2,
            ffn_dim: 256,
            scale_factors: vec![1, 2, 4],
            activation: Activation::Gelu,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn num_scales(&self) -> usize {
        self.scale_factors.len()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Time extent `⌈T / factor⌉` of each scale path.
    pub fn scale_lengths(&self) -> Vec<usize> {
        self.scale_factors
            .iter()
            .map(|&f| self.window_len.div_ceil(f))
            .collect()
    }

    /// Geometric factors `1, 2, 4, ..` for `count` scales.
    pub fn geometric_factors(count: usize) -> Vec<usize> {
        (0..count).map(|s| 1usize << s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.window_len == 0 || self.feature_dim == 0 || self.model_dim == 0 {
            return fail("window_len, feature_dim and model_dim must be positive".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.layers_per_scale == 0 || self.ffn_dim == 0 {
            return fail("layers_per_scale and ffn_dim must be positive".into());
        }
        match self.scale_factors.first() {
            Some(1) => {}
            _ => {
                return fail(format!(
                    "scale_factors must start at 1, got {:?}",
                    self.scale_factors
                ))
            }
        }
        if self.scale_factors.windows(2).any(|w| w[1] <= w[0]) {
            return fail(format!(
                "scale_factors must be strictly increasing, got {:?}",
                self.scale_factors
            ));
        }
        let max_factor = *self.scale_factors.last().unwrap();
        if self.window_len < max_factor {
            return fail(format!(
                "window_len {} shorter than largest scale factor {max_factor}",
                self.window_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.window_len, 60);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.scale_lengths(), vec![60, 30, 15]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        };
        bad(|c| c.heads = 3);
        bad(|c| c.scale_factors = vec![2, 4]);
        bad(|c| c.scale_factors = vec![1, 4, 2]);
        bad(|c| c.scale_factors = vec![]);
        bad(|c| c.window_len = 3);
        bad(|c| c.dropout = 1.0);
    }

    #[test]
    fn json_uses_defaults_for_missing_keys() {
        let c: ModelConfig = serde_json::from_str(r#"{"model_dim": 16, "heads": 2}"#).unwrap();
        assert_eq!(c.model_dim, 16);
        assert_eq!(c.window_len, 60);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }
}

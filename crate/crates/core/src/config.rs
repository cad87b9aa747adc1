use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Draft-depth ratio of the reference large-scale setup: 10 mask-route layers out of 36.
pub const REFERENCE_DRAFT_DEPTH_RATIO: f64 = 10.0 / 36.0;

/// Shape of the toy target and its mask route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Trailing layers that carry mask rows and their tuned projectors.
    pub n_draft_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Mask slots per draft block.
    pub block_slots: usize,
    pub rope_base: f64,
    /// Hidden width of the calibration MLP.
    pub calib_hidden: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 7,
            n_draft_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            block_slots: 5,
            rope_base: 10_000.0,
            calib_hidden: 32,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_draft_layers == 0 || self.n_draft_layers > self.n_layers {
            return fail(format!(
                "draft layers {} must lie in 1..={}",
                self.n_draft_layers, self.n_layers
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("head dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.block_slots < 2 {
            return fail(format!("block_slots {} < 2", self.block_slots));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.d_ff == 0 || self.calib_hidden == 0 {
            return fail("d_ff and calib_hidden must be positive".into());
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return fail("rope_base and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Index of the first layer that carries mask rows.
    pub fn first_draft_layer(&self) -> usize {
        self.n_layers - self.n_draft_layers
    }

    pub fn is_draft_layer(&self, layer: usize) -> bool {
        layer >= self.first_draft_layer()
    }

    /// Fraction of the depth a mask row traverses.
    pub fn draft_depth_ratio(&self) -> f64 {
        self.n_draft_layers as f64 / self.n_layers as f64
    }

    /// Draft tokens per parallel step.
    pub fn parallel_draft_len(&self) -> usize {
        self.block_slots - 1
    }

    /// Draft tokens per sequential step.
    pub fn sequential_draft_len(&self) -> usize {
        self.block_slots
    }

    /// Tiny shape for tests and the sampled losslessness oracle.
    pub fn tiny(vocab_size: usize, n_layers: usize, n_draft_layers: usize, block_slots: usize) -> Self {
        Self {
            n_layers,
            n_draft_layers,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size,
            block_slots,
            rope_base: 10_000.0,
            calib_hidden: 8,
            norm_eps: 1e-6,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.first_draft_layer(), 5);
        assert_eq!(c.parallel_draft_len(), 4);
        assert!((c.draft_depth_ratio() - REFERENCE_DRAFT_DEPTH_RATIO).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_shapes() {
        let base = ModelConfig::default();
        for bad in [
            ModelConfig { n_draft_layers: 0, ..base.clone() },
            ModelConfig { n_draft_layers: 8, ..base.clone() },
            ModelConfig { n_heads: 3, ..base.clone() },
            ModelConfig { block_slots: 1, ..base.clone() },
            ModelConfig { vocab_size: 1, ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}

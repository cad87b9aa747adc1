//! Toy decoder-only transformer with a frozen token route and a tuned mask route.
//!
//! Pre-norm residual blocks (RMSNorm, rotary multi-head attention, GELU FFN),
//! no attention bias, untied LM head. Mask rows exist only in the last
//! `n_draft_layers` layers, start from a shared learned mask embedding, use
//! their own attention projectors, and share the frozen norms and FFNs.

mod backward;
mod calib;
pub mod checkpoint;
mod forward;
mod kv;
mod weights;

use rand::Rng;

pub use backward::GradTargets;
pub use calib::{calibrate, CalibTrace};
pub(crate) use calib::trace as calib_trace;
pub(crate) use forward::ForwardTape;
pub use forward::ForwardOutput;
pub use kv::KvStore;
pub use weights::{AttnWeights, CalibMlp, DraftWeights, FrozenLayer, FrozenWeights, TensorView};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::vec_mat;

pub type TokenId = usize;

/// Frozen target weights plus the trainable draft weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<S> {
    pub config: ModelConfig,
    pub frozen: FrozenWeights<S>,
    pub draft: DraftWeights<S>,
    inv_freq: Vec<S>,
}

impl<S: Scalar> Transformer<S> {
    pub fn new(config: ModelConfig, frozen: FrozenWeights<S>, draft: DraftWeights<S>) -> Result<Self> {
        config.validate()?;
        frozen.check_shapes(&config)?;
        draft.check_shapes(&config)?;
        let hd = config.head_dim();
        let inv_freq = (0..hd / 2)
            .map(|i| S::of(config.rope_base.powf(-2.0 * i as f64 / hd as f64)))
            .collect();
        Ok(Self { config, frozen, draft, inv_freq })
    }

    /// Random target with the drafter initialized from it.
    pub fn random<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let frozen = FrozenWeights::random(&config, rng);
        let draft = DraftWeights::from_frozen(&config, &frozen, rng);
        Self::new(config, frozen, draft)
    }

    pub fn with_draft(&self, draft: DraftWeights<S>) -> Result<Self> {
        Self::new(self.config.clone(), self.frozen.clone(), draft)
    }

    pub fn new_kv(&self) -> KvStore<S> {
        KvStore::new(self.config.n_layers, self.config.d_model)
    }

    /// `h · head`.
    pub fn lm_head(&self, h: &[S]) -> Vec<S> {
        vec_mat(h, &self.frozen.head)
    }

    pub fn embedding(&self, token: TokenId) -> &[S] {
        self.frozen.embed.row(token)
    }

    pub fn trainable_params(&self) -> usize {
        self.draft.param_count()
    }

    pub fn target_params(&self) -> usize {
        self.frozen.param_count()
    }

    /// Rolls the store back to `new_len` committed positions.
    pub fn truncate_kv(&self, kv: &mut KvStore<S>, new_len: usize) -> Result<()> {
        kv.truncate(new_len)
    }
}

#[cfg(test)]
mod tests;

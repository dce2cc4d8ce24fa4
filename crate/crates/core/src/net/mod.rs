//! The neural core: a small pre-norm transformer that runs causally (as a
//! language model with a classification head on the last token) or
//! bidirectionally (as an encoder classifying from a leading CLS token).

mod checkpoint;
mod model;
mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest, TensorEntry};
pub use model::{backward, backward_into, forward, forward_cls, forward_joint, forward_lm, ForwardTrace};
pub use params::{Grads, JointModel, LayerParams, ParamKind, Params};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClsPool {
    /// Hidden state of position 0, which must hold the CLS token.
    FirstToken,
    /// Hidden state of the last non-PAD position.
    LastToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Classifier outputs (topics, plus NONE in multi-class mode).
    pub n_classes: usize,
    pub max_positions: usize,
    pub attention: AttentionMode,
    pub cls_pool: ClsPool,
    pub tie_lm_head: bool,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Causal double-heads configuration.
    pub fn causal(vocab_size: usize, n_classes: usize, max_positions: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            n_classes,
            max_positions,
            attention: AttentionMode::Causal,
            cls_pool: ClsPool::LastToken,
            tie_lm_head: false,
            ln_eps: 1e-5,
        }
    }

    /// The same backbone shape run as a bidirectional CLS classifier.
    pub fn to_encoder(&self) -> Self {
        ModelConfig {
            attention: AttentionMode::Bidirectional,
            cls_pool: ClsPool::FirstToken,
            tie_lm_head: true,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.n_classes == 0 || self.max_positions == 0 {
            return bad("vocab_size, n_classes and max_positions must be positive".into());
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        match (self.attention, self.cls_pool) {
            (AttentionMode::Causal, ClsPool::LastToken) | (AttentionMode::Bidirectional, ClsPool::FirstToken) => Ok(()),
            (a, p) => bad(format!("{p:?} pooling is not supported with {a:?} attention")),
        }
    }
}

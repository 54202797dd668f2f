//! A compact BERT-style transformer encoder with masked-LM/next-sentence,
//! token-classification and sequence-classification heads.
//!
//! Forward and backward passes are written out by hand over flat row-major
//! buffers. Everything is generic over [`Real`] so the same code runs in
//! `f32` for training and in `f64` for gradient verification.

pub mod adam;
pub mod backward;
pub mod checkpoint;
pub mod forward;
pub mod gradcheck;
pub mod loss;
mod params;
pub mod real;

pub use adam::{adam_step, adam_step_filtered, AdamConfig, AdamState};
pub use backward::backward;
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use forward::{encode_hidden, forward, head_logits, Batch, Forward, ForwardCache, HeadLogits, Logits, Mode};
pub use loss::{loss, LossOutput, Targets, IGNORE};
pub use params::{is_head_array, Array, Model, ParamSet};
pub use real::Real;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub dropout: f64,
    pub activation: String,
    pub tie_mlm_output: bool,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            ff_dim: 512,
            vocab_size: 8000,
            max_positions: 256,
            type_vocab: 2,
            dropout: 0.1,
            activation: "gelu".into(),
            tie_mlm_output: true,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    /// The configuration used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ff_dim: 64,
            vocab_size: 50,
            max_positions: 32,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab_size < 6 {
            return bad("vocab_size must exceed the special tokens".into());
        }
        if self.type_vocab != 2 {
            return bad("type_vocab must be 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.activation != "gelu" {
            return bad(format!("unsupported activation {:?}", self.activation));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadKind {
    Pretrain { nsp: bool },
    TokenClassify { classes: usize },
    SeqClassify { classes: usize },
}

impl HeadKind {
    pub fn classes(&self) -> Option<usize> {
        match *self {
            HeadKind::Pretrain { .. } => None,
            HeadKind::TokenClassify { classes } | HeadKind::SeqClassify { classes } => Some(classes),
        }
    }
}

//! Bag-level transformer classifier.
//!
//! Tile features are projected to the model width, a learned
//! classification token is prepended, and pre-norm self-attention blocks
//! mix the tokens. No positional encoding is used, so the prediction is
//! invariant to tile order. The classification token's final
//! representation feeds a two-logit head. Gradients are computed by hand.

mod checkpoint;
mod model;
mod params;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FeatureBag;
use crate::scalar::Scalar;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{forward, loss_and_grad, Prediction};
pub use params::{AggregatorParams, Block, LayerNorm, Linear};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value after layer {layer}")]
    NonFinite { layer: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub attention_dropout_p: f64,
    pub n_classes: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 192,
            model_dim: 192,
            n_layers: 2,
            n_heads: 3,
            mlp_ratio: 4,
            attention_dropout_p: 0.5,
            n_classes: 2,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.feature_dim, self.model_dim, self.n_layers, self.n_heads, self.mlp_ratio];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::Config("all dimensions must be >= 1".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.attention_dropout_p) {
            return Err(ModelError::Config(format!("attention_dropout_p {} not in [0, 1)", self.attention_dropout_p)));
        }
        if self.n_classes != 2 {
            return Err(ModelError::Config("only two classes are supported".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }
}

/// Forward-pass mode. Attention dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Per-tile attention of the classification token in the last layer,
/// averaged over heads and renormalized over tiles.
pub fn attention_weights<T: Scalar>(params: &AggregatorParams<T>, bag: &FeatureBag<T>) -> Result<Vec<T>> {
    Ok(forward(params, bag, Mode::Eval)?.attention)
}

/// Mean of the members' eval-mode `prob_high`.
pub fn ensemble_predict<T: Scalar>(members: &[AggregatorParams<T>], bag: &FeatureBag<T>) -> Result<T> {
    let first = members.first().ok_or_else(|| ModelError::Argument("ensemble has no members".into()))?;
    if members.iter().any(|m| m.config() != first.config()) {
        return Err(ModelError::Argument("ensemble members have different configurations".into()));
    }
    let probs = members.iter().map(|m| Ok(forward(m, bag, Mode::Eval)?.prob_high)).collect::<Result<Vec<T>>>()?;
    Ok(mean(&probs))
}

/// Arithmetic mean written as the first value plus the mean deviation
/// from it, so identical inputs return that value bit for bit.
pub fn mean<T: Scalar>(values: &[T]) -> T {
    let first = values[0];
    let dev: T = values.iter().map(|&v| v - first).sum();
    first + dev / T::of_usize(values.len())
}

//! The encoder-decoder model: sinusoidal positional encoding, multi-head
//! attention, feed-forward sublayers, residual + layer-norm wrapping
//! (post-norm), an encoder stack over projected image features, and a
//! decoder stack with masked self-attention and cross-attention feeding a
//! vocabulary projection.

mod forward;
mod params;

pub use forward::{
    decode_forward, decode_from_embeddings, embed_tokens, encode, feed_forward,
    multi_head_attention, scaled_dot_product_attention, scaled_dot_product_attention_with_weights,
    sublayer,
};
pub use params::{expected_param_count, ModelParams, ParamIds};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-9;

/// Additive score at masked positions; large enough that the softmax weight
/// underflows to exactly 0.
pub const MASK_NEG: f64 = -1e9;

/// Hyperparameters; every parameter shape is a pure function of this.
/// JSON configs may omit fields; omitted ones take the desk-scale defaults
/// (with `vocab_size` 0, which must be resolved from a vocabulary before
/// validation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    /// Also apply dropout to (embedding + position) sums. Disable to apply
    /// dropout only inside the feed-forward sublayer.
    pub embed_dropout: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_default(0, 2048)
    }
}

impl ModelConfig {
    /// Desk-scale defaults; vocab and feature dims come from the data.
    pub fn desk_default(vocab_size: usize, feature_dim: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 8,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 512,
            dropout_p: 0.1,
            vocab_size,
            max_len: 64,
            feature_dim,
            embed_dropout: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model must be a positive even integer (sin/cos pairs), got {}",
                self.d_model
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.n_dec_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must cover the 4 reserved ids, got {}",
                self.vocab_size
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("max_len must be at least 2, got {}", self.max_len)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Boolean attention mask; `true` means the query may attend the key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    t_q: usize,
    t_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(t_q: usize, t_k: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != t_q * t_k {
            return Err(Error::Dimension(format!(
                "mask data length {} does not match {t_q}×{t_k}",
                allowed.len()
            )));
        }
        let mask = AttentionMask { t_q, t_k, allowed };
        mask.validate()?;
        Ok(mask)
    }

    /// Every query may attend every key.
    pub fn all(t_q: usize, t_k: usize) -> Self {
        AttentionMask { t_q, t_k, allowed: vec![true; t_q * t_k] }
    }

    /// Lower-triangular including the diagonal: position t sees ≤ t.
    pub fn causal(t: usize) -> Self {
        let mut allowed = vec![false; t * t];
        for q in 0..t {
            for k in 0..=q {
                allowed[q * t + k] = true;
            }
        }
        AttentionMask { t_q: t, t_k: t, allowed }
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.t_k + k]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.t_q, self.t_k)
    }

    /// Checks that every query row admits at least one key.
    pub fn validate(&self) -> Result<()> {
        for q in 0..self.t_q {
            if !self.allowed[q * self.t_k..(q + 1) * self.t_k].iter().any(|&a| a) {
                return Err(Error::Mask(format!("query row {q} is fully masked")));
            }
        }
        Ok(())
    }

    /// Additive form: 0 where allowed, [`MASK_NEG`] where not.
    pub fn to_additive(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { MASK_NEG }).collect();
        Tensor::matrix(self.t_q, self.t_k, data).expect("mask dims validated at construction")
    }
}

/// Sinusoidal positional encoding: entry (t, 2k) = sin(ω_k·t) and
/// (t, 2k+1) = cos(ω_k·t) with ω_k = 10000^(-2k/d); frequencies decrease
/// along the vector dimension.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs a positive even dimension, got {d}"
        )));
    }
    if len == 0 {
        return Err(Error::Parameter("positional encoding needs length >= 1".into()));
    }
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for k in 0..d / 2 {
            let omega = 10000f64.powf(-(2.0 * k as f64) / d as f64);
            let angle = omega * t as f64;
            data[t * d + 2 * k] = angle.sin();
            data[t * d + 2 * k + 1] = angle.cos();
        }
    }
    Tensor::matrix(len, d, data)
}

//! Named trainable tensors for one encoder-decoder model.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::RngStream;
use crate::tensor::{NodeId, Tape, Tensor};

/// The complete set of named trainable tensors plus the config that fixes
/// their shapes. Names are stable and sorted (BTreeMap), so iteration order
/// is canonical everywhere: init, optimizer state, checkpoints, gradcheck.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// Names + shapes of every tensor for a config, in generation order.
fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut specs = vec![
        ("feat_proj.w".to_string(), vec![cfg.feature_dim, d]),
        ("feat_proj.b".to_string(), vec![d]),
    ];
    let attn = |prefix: &str, specs: &mut Vec<(String, Vec<usize>)>| {
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            specs.push((format!("{prefix}.{w}"), vec![d, d]));
        }
    };
    let norm = |prefix: &str, specs: &mut Vec<(String, Vec<usize>)>| {
        specs.push((format!("{prefix}.gamma"), vec![d]));
        specs.push((format!("{prefix}.beta"), vec![d]));
    };
    let ffn = |prefix: &str, specs: &mut Vec<(String, Vec<usize>)>| {
        specs.push((format!("{prefix}.w1"), vec![d, cfg.d_ff]));
        specs.push((format!("{prefix}.b1"), vec![cfg.d_ff]));
        specs.push((format!("{prefix}.w2"), vec![cfg.d_ff, d]));
        specs.push((format!("{prefix}.b2"), vec![d]));
    };
    for i in 0..cfg.n_enc_layers {
        attn(&format!("enc.{i}.attn"), &mut specs);
        norm(&format!("enc.{i}.norm1"), &mut specs);
        ffn(&format!("enc.{i}.ffn"), &mut specs);
        norm(&format!("enc.{i}.norm2"), &mut specs);
    }
    for i in 0..cfg.n_dec_layers {
        attn(&format!("dec.{i}.self_attn"), &mut specs);
        norm(&format!("dec.{i}.norm1"), &mut specs);
        attn(&format!("dec.{i}.cross_attn"), &mut specs);
        norm(&format!("dec.{i}.norm2"), &mut specs);
        ffn(&format!("dec.{i}.ffn"), &mut specs);
        norm(&format!("dec.{i}.norm3"), &mut specs);
    }
    specs.push(("embed.w".to_string(), vec![cfg.vocab_size, d]));
    specs.push(("out_proj.w".to_string(), vec![d, cfg.vocab_size]));
    specs.push(("out_proj.b".to_string(), vec![cfg.vocab_size]));
    specs
}

/// Closed-form parameter count for a config:
///
/// ```text
/// attn = 4·d²               (W_Q, W_K, W_V, W_O; no biases)
/// norm = 2·d                (gamma, beta)
/// ffn  = 2·d·d_ff + d_ff + d
/// total = F·d + d                        feature projection
///       + Ne·(attn + 2·norm + ffn)       encoder layers
///       + Nd·(2·attn + 3·norm + ffn)     decoder layers
///       + V·d                            token embedding
///       + d·V + V                        output projection
/// ```
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let attn = 4 * d * d;
    let norm = 2 * d;
    let ffn = 2 * d * cfg.d_ff + cfg.d_ff + d;
    (cfg.feature_dim * d + d)
        + cfg.n_enc_layers * (attn + 2 * norm + ffn)
        + cfg.n_dec_layers * (2 * attn + 3 * norm + ffn)
        + cfg.vocab_size * d
        + (d * cfg.vocab_size + cfg.vocab_size)
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, gamma=1, beta=0; draws depend
    /// only on the rng state, in fixed generation order.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in tensor_specs(&config) {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(shape)?
            } else if name.ends_with(".beta") || name.ends_with(".b")
                || name.ends_with(".b1") || name.ends_with(".b2")
            {
                Tensor::zeros(shape)?
            } else {
                // weights, including the embedding table
                let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(shape, -limit, limit, rng)?
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Rebuilds params from named tensors (checkpoint load); every expected
    /// name must be present with the right shape.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape) in tensor_specs(&config) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected parameter {extra}")));
        }
        Ok(ModelParams { config, tensors: out })
    }

    /// Registers every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamIds {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t)))
            .collect();
        ParamIds { ids }
    }
}

/// Tape node ids of bound parameters, addressed by name.
#[derive(Clone, Debug)]
pub struct ParamIds {
    ids: BTreeMap<String, NodeId>,
}

impl ParamIds {
    /// Pairs names with externally created nodes (gradcheck drives this).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        ParamIds { ids: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of all bound params after a backward pass, by name.
    /// Parameters untouched by the loss get zero gradients.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let g = tape
                    .grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_closed_form() {
        for (v, f, dm, ff, ne, nd, h) in [
            (100, 2048, 128, 512, 2, 2, 8),
            (10, 8, 16, 32, 1, 1, 4),
            (37, 64, 20, 40, 3, 2, 2),
        ] {
            let cfg = ModelConfig {
                d_model: dm,
                n_heads: h,
                n_enc_layers: ne,
                n_dec_layers: nd,
                d_ff: ff,
                dropout_p: 0.1,
                vocab_size: v,
                max_len: 64,
                feature_dim: f,
                embed_dropout: true,
            };
            let mut rng = RngStream::seed_from(0);
            let params = ModelParams::init(cfg.clone(), &mut rng).unwrap();
            assert_eq!(params.param_count(), expected_param_count(&cfg));
        }
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let cfg = ModelConfig::desk_default(50, 32);
        let a = ModelParams::init(cfg.clone(), &mut RngStream::seed_from(4)).unwrap();
        let b = ModelParams::init(cfg.clone(), &mut RngStream::seed_from(4)).unwrap();
        let c = ModelParams::init(cfg, &mut RngStream::seed_from(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gamma_ones_biases_zero() {
        let cfg = ModelConfig::desk_default(10, 8);
        let p = ModelParams::init(cfg, &mut RngStream::seed_from(1)).unwrap();
        assert!(p.get("enc.0.norm1.gamma").unwrap().data().iter().all(|&x| x == 1.0));
        assert!(p.get("enc.0.norm1.beta").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(p.get("feat_proj.b").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(p.get("out_proj.b").unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn from_tensors_round_trips_and_validates() {
        let cfg = ModelConfig::desk_default(12, 8);
        let p = ModelParams::init(cfg.clone(), &mut RngStream::seed_from(2)).unwrap();
        let map: BTreeMap<String, Tensor> =
            p.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let q = ModelParams::from_tensors(cfg.clone(), map.clone()).unwrap();
        assert_eq!(p, q);

        let mut missing = map.clone();
        missing.remove("embed.w");
        assert!(matches!(
            ModelParams::from_tensors(cfg.clone(), missing),
            Err(Error::Format(_))
        ));

        let mut extra = map;
        extra.insert("bogus".into(), Tensor::scalar(1.0));
        assert!(matches!(ModelParams::from_tensors(cfg, extra), Err(Error::Format(_))));
    }
}

//! Forward-graph builders. Each function appends ops to a [`Tape`] and
//! returns the output node, so the same code path serves training (with
//! backward) and inference.

use crate::error::{Error, Result};
use crate::model::{positional_encoding, AttentionMask, ModelConfig, ParamIds, LN_EPS};
use crate::rng::RngStream;
use crate::tensor::{Mode, NodeId, Tape, Tensor};

/// softmax(Q·Kᵀ/√d_k + M)·V with the additive mask M applied before the
/// softmax. Returns (output, attention weights).
pub fn scaled_dot_product_attention_with_weights(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &AttentionMask,
) -> Result<(NodeId, NodeId)> {
    let (t_q, d_k) = dims2(tape, q)?;
    let (t_k, d_k2) = dims2(tape, k)?;
    let (t_v, _) = dims2(tape, v)?;
    if d_k != d_k2 {
        return Err(Error::Dimension(format!(
            "attention: query dim {d_k} != key dim {d_k2}"
        )));
    }
    if t_k != t_v {
        return Err(Error::Dimension(format!(
            "attention: {t_k} keys but {t_v} value rows"
        )));
    }
    if mask.shape() != (t_q, t_k) {
        return Err(Error::Dimension(format!(
            "attention: mask shape {:?} does not match scores {t_q}×{t_k}",
            mask.shape()
        )));
    }
    mask.validate()?;

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let masked = tape.add_const(scaled, &mask.to_additive())?;
    let weights = tape.softmax(masked, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn scaled_dot_product_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &AttentionMask,
) -> Result<NodeId> {
    scaled_dot_product_attention_with_weights(tape, q, k, v, mask).map(|(out, _)| out)
}

/// Attention projections for one site (self or cross) of one layer.
struct AttnIds {
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    w_o: NodeId,
}

impl AttnIds {
    fn resolve(params: &ParamIds, prefix: &str) -> Result<Self> {
        Ok(AttnIds {
            w_q: params.get(&format!("{prefix}.w_q"))?,
            w_k: params.get(&format!("{prefix}.w_k"))?,
            w_v: params.get(&format!("{prefix}.w_v"))?,
            w_o: params.get(&format!("{prefix}.w_o"))?,
        })
    }
}

/// Multi-head attention: project, run per-head scaled dot-product attention
/// on column slices, concatenate heads, re-project with W_O.
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: NodeId,
    x_kv: NodeId,
    params: &ParamIds,
    prefix: &str,
    n_heads: usize,
    mask: &AttentionMask,
) -> Result<NodeId> {
    let (_, d_model) = dims2(tape, x_q)?;
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::Config(format!(
            "n_heads ({n_heads}) must divide d_model ({d_model})"
        )));
    }
    let head_dim = d_model / n_heads;
    let attn = AttnIds::resolve(params, prefix)?;

    let q_full = tape.matmul(x_q, attn.w_q)?;
    let k_full = tape.matmul(x_kv, attn.w_k)?;
    let v_full = tape.matmul(x_kv, attn.w_v)?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let start = h * head_dim;
        let q = tape.slice_cols(q_full, start, head_dim)?;
        let k = tape.slice_cols(k_full, start, head_dim)?;
        let v = tape.slice_cols(v_full, start, head_dim)?;
        heads.push(scaled_dot_product_attention(tape, q, k, v, mask)?);
    }
    let concat = tape.concat_cols(&heads)?;
    tape.matmul(concat, attn.w_o)
}

/// FC₂(Dropout(ReLU(FC₁(x)))) — dropout sits between ReLU and FC₂.
pub fn feed_forward(
    tape: &mut Tape,
    x: NodeId,
    params: &ParamIds,
    prefix: &str,
    dropout_p: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let w1 = params.get(&format!("{prefix}.w1"))?;
    let b1 = params.get(&format!("{prefix}.b1"))?;
    let w2 = params.get(&format!("{prefix}.w2"))?;
    let b2 = params.get(&format!("{prefix}.b2"))?;

    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let h = apply_dropout(tape, h, dropout_p, mode, rng)?;
    let y = tape.matmul(h, w2)?;
    tape.add_bias(y, b2)
}

/// x_out = LayerNorm(x_in + f(x_in)); post-norm placement. `f` must
/// preserve the shape of its input.
pub fn sublayer(
    tape: &mut Tape,
    x_in: NodeId,
    params: &ParamIds,
    norm_prefix: &str,
    f: impl FnOnce(&mut Tape, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let in_shape = tape.value(x_in).shape().to_vec();
    let fx = f(tape, x_in)?;
    if tape.value(fx).shape() != in_shape {
        return Err(Error::Contract(format!(
            "sublayer function changed shape {:?} -> {:?}",
            in_shape,
            tape.value(fx).shape()
        )));
    }
    let sum = tape.add(x_in, fx)?;
    let gamma = params.get(&format!("{norm_prefix}.gamma"))?;
    let beta = params.get(&format!("{norm_prefix}.beta"))?;
    tape.layer_norm(sum, gamma, beta, LN_EPS)
}

/// Projects a feature grid to d_model, adds positions, and runs the encoder
/// stack (self-attention sublayer then FFN sublayer, all-true mask).
pub fn encode(
    tape: &mut Tape,
    features: &Tensor,
    params: &ParamIds,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<NodeId> {
    if features.rank() != 2 || features.shape()[1] != config.feature_dim {
        return Err(Error::Dimension(format!(
            "feature grid shape {:?} does not match feature_dim {}",
            features.shape(),
            config.feature_dim
        )));
    }
    let s = features.shape()[0];
    if s > config.max_len {
        return Err(Error::Length(format!(
            "feature grid length {s} exceeds max_len {}",
            config.max_len
        )));
    }
    let feats = tape.constant(features.clone());
    let w = params.get("feat_proj.w")?;
    let b = params.get("feat_proj.b")?;
    let x = tape.matmul(feats, w)?;
    let x = tape.add_bias(x, b)?;
    let x = tape.add_const(x, &positional_encoding(s, config.d_model)?)?;
    let mut x = if config.embed_dropout {
        apply_dropout(tape, x, config.dropout_p, mode, rng)?
    } else {
        x
    };

    let mask = AttentionMask::all(s, s);
    for i in 0..config.n_enc_layers {
        x = sublayer(tape, x, params, &format!("enc.{i}.norm1"), |t, xi| {
            multi_head_attention(t, xi, xi, params, &format!("enc.{i}.attn"), config.n_heads, &mask)
        })?;
        x = sublayer(tape, x, params, &format!("enc.{i}.norm2"), |t, xi| {
            feed_forward(t, xi, params, &format!("enc.{i}.ffn"), config.dropout_p, mode, rng)
        })?;
    }
    Ok(x)
}

/// Token embedding scaled by √d_model plus positional encoding (the
/// decoder's layer input).
pub fn embed_tokens(
    tape: &mut Tape,
    token_ids: &[usize],
    params: &ParamIds,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let t = token_ids.len();
    if t == 0 {
        return Err(Error::Contract("decoder needs at least one token".into()));
    }
    if t > config.max_len {
        return Err(Error::Length(format!(
            "token sequence length {t} exceeds max_len {}",
            config.max_len
        )));
    }
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} out of range for vocab size {}",
            config.vocab_size
        )));
    }
    let table = params.get("embed.w")?;
    let emb = tape.embedding(table, token_ids)?;
    let emb = tape.scale(emb, (config.d_model as f64).sqrt())?;
    let emb = tape.add_const(emb, &positional_encoding(t, config.d_model)?)?;
    if config.embed_dropout {
        apply_dropout(tape, emb, config.dropout_p, mode, rng)
    } else {
        Ok(emb)
    }
}

/// Runs the decoder stack on prepared layer inputs `x[T×d_model]`: per
/// layer causal self-attention, cross-attention over `memory`, FFN — each
/// wrapped in residual + layer norm — then the vocabulary projection.
pub fn decode_from_embeddings(
    tape: &mut Tape,
    x: NodeId,
    memory: NodeId,
    params: &ParamIds,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let (t, _) = dims2(tape, x)?;
    let (s, _) = dims2(tape, memory)?;
    let causal = AttentionMask::causal(t);
    let cross = AttentionMask::all(t, s);

    let mut x = x;
    for i in 0..config.n_dec_layers {
        x = sublayer(tape, x, params, &format!("dec.{i}.norm1"), |tp, xi| {
            multi_head_attention(
                tp,
                xi,
                xi,
                params,
                &format!("dec.{i}.self_attn"),
                config.n_heads,
                &causal,
            )
        })?;
        x = sublayer(tape, x, params, &format!("dec.{i}.norm2"), |tp, xi| {
            multi_head_attention(
                tp,
                xi,
                memory,
                params,
                &format!("dec.{i}.cross_attn"),
                config.n_heads,
                &cross,
            )
        })?;
        x = sublayer(tape, x, params, &format!("dec.{i}.norm3"), |tp, xi| {
            feed_forward(tp, xi, params, &format!("dec.{i}.ffn"), config.dropout_p, mode, rng)
        })?;
    }
    let w = params.get("out_proj.w")?;
    let b = params.get("out_proj.b")?;
    let logits = tape.matmul(x, w)?;
    tape.add_bias(logits, b)
}

/// Full decoder forward: embed token ids and produce `[T×vocab_size]`
/// next-token logits against the encoder memory.
pub fn decode_forward(
    tape: &mut Tape,
    token_ids: &[usize],
    memory: NodeId,
    params: &ParamIds,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let emb = embed_tokens(tape, token_ids, params, config, mode, rng)?;
    decode_from_embeddings(tape, emb, memory, params, config, mode, rng)
}

fn apply_dropout(
    tape: &mut Tape,
    x: NodeId,
    p: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<NodeId> {
    if mode == Mode::Train && p > 0.0 {
        let seed = rng.next_seed();
        tape.dropout(x, p, mode, seed)
    } else {
        Ok(x)
    }
}

fn dims2(tape: &Tape, id: NodeId) -> Result<(usize, usize)> {
    let s = tape.value(id).shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("expected a matrix, got shape {s:?}")));
    }
    Ok((s[0], s[1]))
}

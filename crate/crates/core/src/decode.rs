//! Caption generation: greedy decoding and length-normalized beam search.
//!
//! Both decoders run against any conditional next-token scorer
//! `FnMut(&[usize]) -> Result<Vec<f64>>` (prefix ids starting with bos →
//! log-probabilities over the vocabulary). The model-backed scorer
//! re-evaluates the decoder on the full prefix each step; pad and bos are
//! never emitted, so returned captions contain content tokens only.

use crate::error::{Error, Result};
use crate::model::{decode_forward, encode, ModelParams};
use crate::rng::RngStream;
use crate::tensor::{Mode, Tape, Tensor};
use crate::text::{BOS_ID, EOS_ID, PAD_ID};

/// One beam hypothesis. `ids` starts with bos and never contains pad/bos
/// beyond that or any eos; the eos log-probability is folded into
/// `log_prob` when the beam finished by emitting eos.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    pub via_eos: bool,
}

impl Beam {
    /// Generated caption length (content tokens, bos excluded).
    pub fn len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// GNMT-style length-normalized score: logP / ((5+len)/6)^alpha.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        self.log_prob / (((5 + self.len()) as f64) / 6.0).powf(alpha)
    }

    /// Caption ids without the leading bos.
    pub fn caption(&self) -> &[usize] {
        &self.ids[1..]
    }
}

/// Runs the encoder once in eval mode and returns the memory tensor.
pub fn encode_memory(features: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = RngStream::seed_from(0); // eval mode draws nothing
    let memory = encode(&mut tape, features, &bound, params.config(), Mode::Eval, &mut rng)?;
    Ok(tape.value(memory).clone().with_requires_grad(false))
}

/// Next-token log-probabilities from the trained model for a bos-prefixed
/// id sequence.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    memory: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, memory: Tensor) -> Self {
        ModelScorer { params, memory }
    }

    pub fn from_features(params: &'a ModelParams, features: &Tensor) -> Result<Self> {
        Ok(ModelScorer { params, memory: encode_memory(features, params)? })
    }

    pub fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let config = self.params.config();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let memory = tape.constant(self.memory.clone());
        let mut rng = RngStream::seed_from(0); // eval mode draws nothing
        let logits =
            decode_forward(&mut tape, prefix, memory, &bound, config, Mode::Eval, &mut rng)?;
        let v = config.vocab_size;
        let last_row = &tape.value(logits).data()[(prefix.len() - 1) * v..prefix.len() * v];
        Ok(log_softmax(last_row))
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Greedy decoding over an arbitrary scorer: argmax each step (ties →
/// lowest id, pad/bos excluded), stop at eos or when the bos-prefixed
/// sequence reaches `max_len`.
pub fn greedy_decode_with<F>(mut score_fn: F, vocab_size: usize, max_len: usize) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    check_decode_args(vocab_size, 1)?;
    let mut seq = vec![BOS_ID];
    while seq.len() < max_len {
        let lp = checked_log_probs(&mut score_fn, &seq, vocab_size)?;
        let (next, _) = argmax_content(&lp);
        if next == EOS_ID {
            break;
        }
        seq.push(next);
    }
    Ok(seq.split_off(1))
}

/// Greedy decoding from encoder memory with the trained model.
pub fn greedy_decode(memory: &Tensor, params: &ModelParams, max_len: usize) -> Result<Vec<usize>> {
    let scorer = ModelScorer::new(params, memory.clone());
    greedy_decode_with(|prefix| scorer.log_probs(prefix), params.config().vocab_size, max_len)
}

/// Beam search over an arbitrary scorer, returning the final ranked beams
/// (all finished). Per-step selection is by raw log-probability; the final
/// ranking applies the length normalization. Ties break toward the
/// lexicographically smallest id sequence.
pub fn beam_search_scored_with<F>(
    mut score_fn: F,
    vocab_size: usize,
    beam_width: usize,
    max_len: usize,
    length_alpha: f64,
) -> Result<Vec<Beam>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    check_decode_args(vocab_size, beam_width)?;
    let mut beams = vec![Beam { ids: vec![BOS_ID], log_prob: 0.0, finished: false, via_eos: false }];

    while beams.iter().any(|b| !b.finished) {
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            if beam.ids.len() >= max_len {
                let mut done = beam.clone();
                done.finished = true;
                candidates.push(done);
                continue;
            }
            let lp = checked_log_probs(&mut score_fn, &beam.ids, vocab_size)?;
            for (token, &l) in lp.iter().enumerate() {
                if token == PAD_ID || token == BOS_ID {
                    continue;
                }
                let mut next = beam.clone();
                next.log_prob += l;
                if token == EOS_ID {
                    next.finished = true;
                    next.via_eos = true;
                } else {
                    next.ids.push(token);
                }
                candidates.push(next);
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob.total_cmp(&a.log_prob).then_with(|| a.ids.cmp(&b.ids))
        });
        candidates.truncate(beam_width);
        beams = candidates;
    }

    beams.sort_by(|a, b| {
        b.normalized_score(length_alpha)
            .total_cmp(&a.normalized_score(length_alpha))
            .then_with(|| a.ids.cmp(&b.ids))
    });
    Ok(beams)
}

/// Beam search from encoder memory; returns the best caption's ids.
pub fn beam_search(
    memory: &Tensor,
    params: &ModelParams,
    beam_width: usize,
    max_len: usize,
    length_alpha: f64,
) -> Result<Vec<usize>> {
    let scorer = ModelScorer::new(params, memory.clone());
    let beams = beam_search_scored_with(
        |prefix| scorer.log_probs(prefix),
        params.config().vocab_size,
        beam_width,
        max_len,
        length_alpha,
    )?;
    Ok(beams[0].caption().to_vec())
}

fn check_decode_args(vocab_size: usize, beam_width: usize) -> Result<()> {
    if vocab_size <= EOS_ID {
        return Err(Error::Vocab(format!(
            "vocab size {vocab_size} does not cover the reserved ids"
        )));
    }
    if beam_width == 0 {
        return Err(Error::Parameter("beam width must be at least 1".into()));
    }
    Ok(())
}

fn checked_log_probs<F>(score_fn: &mut F, prefix: &[usize], vocab_size: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let lp = score_fn(prefix)?;
    if lp.len() != vocab_size {
        return Err(Error::Contract(format!(
            "scorer returned {} log-probs for vocab size {vocab_size}",
            lp.len()
        )));
    }
    Ok(lp)
}

/// Highest-probability token outside pad/bos; ties go to the lowest id.
fn argmax_content(log_probs: &[f64]) -> (usize, f64) {
    let mut best = (EOS_ID, f64::NEG_INFINITY);
    for (token, &l) in log_probs.iter().enumerate() {
        if token == PAD_ID || token == BOS_ID {
            continue;
        }
        if l > best.1 {
            best = (token, l);
        }
    }
    best
}

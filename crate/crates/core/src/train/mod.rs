//! Cross-entropy training: Adam with Noam warmup, global-norm gradient
//! clipping, teacher forcing over padded batches, and checkpointing.
//!
//! All randomness (init, batch order, dropout) derives from the run seed
//! and the step counter, so a resumed run replays the exact same draws as
//! an uninterrupted one.

mod checkpoint;

pub use checkpoint::Checkpoint;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_feature_file, Manifest};
use crate::error::{Error, Result};
use crate::model::{decode_forward, encode, ModelConfig, ModelParams};
use crate::rng::{mix_seed, RngStream};
use crate::tensor::{Mode, NodeId, Tape, Tensor};
use crate::text::{normalize_and_tokenize, Vocab, PAD_ID};

/// Seed-mixing tags, one per purpose.
const TAG_INIT: u64 = 0x1217;
const TAG_ORDER: u64 = 0xDA7A;
const TAG_DROPOUT: u64 = 0xD809;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr_base: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub label: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            max_steps: 500,
            lr_base: 1.0,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip_norm: 1.0,
            seed: 7,
            checkpoint_every: 100,
            label: "run".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_base <= 0.0 || self.warmup_steps == 0 {
            return Err(Error::Config("lr_base and warmup_steps must be positive".into()));
        }
        for (b, name) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&b) || b == 0.0 {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("eps and grad_clip_norm must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over non-pad positions of `-log softmax(logits)[t, targets[t]]`.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    pad_id: usize,
) -> Result<NodeId> {
    tape.cross_entropy(logits, targets, pad_id)
}

/// Noam schedule: `lr_base · d_model^-1/2 · min(step^-1/2, step·warmup^-3/2)`.
pub fn lr_schedule(step: usize, d_model: usize, warmup_steps: usize, lr_base: f64) -> f64 {
    debug_assert!(step >= 1);
    let s = step as f64;
    let w = warmup_steps as f64;
    lr_base * (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

/// First and second Adam moments, aligned with parameter names.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zero = |p: &ModelParams| {
            p.iter()
                .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
                .collect::<BTreeMap<_, _>>()
        };
        AdamState { m: zero(params), v: zero(params) }
    }
}

/// One bias-corrected Adam update with an explicit learning rate.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    step: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Contract("adam step counter starts at 1".into()));
    }
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for (name, tensor) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Training(format!("missing gradient for parameter {name}")))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in parameter {name}")));
        }
        let m = state.m.get_mut(name).expect("moment keys mirror param keys");
        let v = state.v.get_mut(name).expect("moment keys mirror param keys");
        let w = tensor.data_mut();
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam update with the learning rate taken from [`lr_schedule`].
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    step: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = lr_schedule(step, params.config().d_model, cfg.warmup_steps, cfg.lr_base);
    adam_update(params, grads, state, step, lr, cfg.beta1, cfg.beta2, cfg.eps)
}

/// Scales all gradients so their global L2 norm is at most `clip`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, clip: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One teacher-forcing example: a feature grid index plus the encoded
/// caption `[bos, tokens..., eos]`.
#[derive(Clone, Debug)]
struct Sample {
    feature_idx: usize,
    ids: Vec<usize>,
}

/// Deterministic epoch-shuffled sample order; `index(p)` is a pure function
/// of (seed, p), so any step's batch can be reconstructed after a resume.
struct DataOrder {
    seed: u64,
    n: usize,
    cached_epoch: Option<(usize, Vec<usize>)>,
}

impl DataOrder {
    fn new(seed: u64, n: usize) -> Self {
        DataOrder { seed: mix_seed(seed, TAG_ORDER), n, cached_epoch: None }
    }

    fn index(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        let within = position % self.n;
        match &self.cached_epoch {
            Some((e, perm)) if *e == epoch => perm[within],
            _ => {
                let mut perm: Vec<usize> = (0..self.n).collect();
                RngStream::seed_from(mix_seed(self.seed, epoch as u64)).shuffle(&mut perm);
                let idx = perm[within];
                self.cached_epoch = Some((epoch, perm));
                idx
            }
        }
    }
}

/// Training result: the final checkpoint and the per-step loss curve.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<(usize, f64)>,
}

/// Runs teacher-forced training. When `out_dir` is given, periodic and
/// final checkpoints plus `loss.csv` are written there; checkpoint writes
/// are atomic (temp file + rename), so an aborted run keeps its last good
/// checkpoint. `resume` continues a run; data order and dropout draws
/// depend only on (seed, step), so the continuation is bit-identical to an
/// uninterrupted run. `on_step` observes every (step, loss) as it happens.
pub fn train(
    manifest: &Manifest,
    vocab: &Vocab,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    if manifest.is_empty() {
        return Err(Error::Data("manifest has no records".into()));
    }

    // Load every feature grid once; desk-scale datasets fit in memory.
    let mut features = Vec::with_capacity(manifest.len());
    let mut samples = Vec::new();
    for record in manifest.records() {
        let grid = read_feature_file(&manifest.feature_path(record))?;
        let feature_idx = features.len();
        features.push(grid);
        for caption in &record.captions {
            let tokens = normalize_and_tokenize(caption);
            let ids = vocab.encode(&tokens, model_config.max_len);
            samples.push(Sample { feature_idx, ids });
        }
    }

    let (mut params, mut moments, start_step) = match resume {
        Some(ckpt) => {
            if ckpt.params.config() != &model_config {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different model config".into(),
                ));
            }
            ckpt.verify_vocab(vocab)?;
            (ckpt.params, ckpt.moments, ckpt.step)
        }
        None => {
            let mut init_rng = RngStream::seed_from(mix_seed(train_config.seed, TAG_INIT));
            let params = ModelParams::init(model_config.clone(), &mut init_rng)?;
            let moments = AdamState::zeros_like(&params);
            (params, moments, 0)
        }
    };

    let mut order = DataOrder::new(train_config.seed, samples.len());
    let mut curve = Vec::new();
    let vocab_hash = vocab.content_hash();

    let make_checkpoint = |params: &ModelParams, moments: &AdamState, step: usize| Checkpoint {
        params: params.clone(),
        moments: moments.clone(),
        step,
        seed: train_config.seed,
        vocab_hash: vocab_hash.clone(),
        label: train_config.label.clone(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        if start_step == 0 {
            make_checkpoint(&params, &moments, 0).save(&dir.join("ckpt-000000.capc"))?;
        }
    }

    for step in (start_step + 1)..=train_config.max_steps {
        let mut dropout_rng =
            RngStream::seed_from(mix_seed(mix_seed(train_config.seed, TAG_DROPOUT), step as u64));

        // Assemble the batch, padding targets to the longest caption.
        let base = (step - 1) * train_config.batch_size;
        let batch: Vec<&Sample> = (0..train_config.batch_size)
            .map(|i| &samples[order.index(base + i)])
            .collect();
        let t_max = batch.iter().map(|s| s.ids.len() - 1).max().unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut total_positions = 0usize;
        let mut weighted_losses = Vec::with_capacity(batch.len());
        let mut position_counts = Vec::with_capacity(batch.len());
        for sample in &batch {
            let mut input: Vec<usize> = sample.ids[..sample.ids.len() - 1].to_vec();
            let mut target: Vec<usize> = sample.ids[1..].to_vec();
            input.resize(t_max, PAD_ID);
            target.resize(t_max, PAD_ID);

            let memory = encode(
                &mut tape,
                &features[sample.feature_idx],
                &bound,
                &model_config,
                Mode::Train,
                &mut dropout_rng,
            )?;
            let logits = decode_forward(
                &mut tape,
                &input,
                memory,
                &bound,
                &model_config,
                Mode::Train,
                &mut dropout_rng,
            )?;
            let loss = cross_entropy_loss(&mut tape, logits, &target, PAD_ID)?;
            let n_pos = target.iter().filter(|&&y| y != PAD_ID).count();
            total_positions += n_pos;
            weighted_losses.push(loss);
            position_counts.push(n_pos);
        }
        // Pooled mean over all non-pad positions in the batch.
        let mut batch_loss = None;
        for (loss, n_pos) in weighted_losses.into_iter().zip(position_counts) {
            let scaled = tape.scale(loss, n_pos as f64 / total_positions as f64)?;
            batch_loss = Some(match batch_loss {
                None => scaled,
                Some(acc) => tape.add(acc, scaled)?,
            });
        }
        let batch_loss = batch_loss.expect("batch is non-empty");
        let loss_value = tape.value(batch_loss).data()[0];

        tape.backward(batch_loss)?;
        let mut grads = bound.grads(&tape);
        drop(tape);

        clip_global_norm(&mut grads, train_config.grad_clip_norm);
        adam_step(&mut params, &grads, &mut moments, step, &train_config)?;
        curve.push((step, loss_value));
        on_step(step, loss_value);

        if let Some(dir) = out_dir {
            if step % train_config.checkpoint_every == 0 {
                make_checkpoint(&params, &moments, step)
                    .save(&dir.join(format!("ckpt-{step:06}.capc")))?;
            }
        }
    }

    let final_step = train_config.max_steps.max(start_step);
    let checkpoint = make_checkpoint(&params, &moments, final_step);
    if let Some(dir) = out_dir {
        // a zero-step run leaves only the initial checkpoint
        if final_step > start_step {
            checkpoint.save(&dir.join("ckpt-final.capc"))?;
        }
        let mut csv = String::from("step,loss\n");
        for (step, loss) in &curve {
            csv.push_str(&format!("{step},{loss}\n"));
        }
        std::fs::write(dir.join("loss.csv"), csv)?;
    }
    Ok(TrainOutcome { checkpoint, curve })
}

/// Gradient check of the full teacher-forced training loss (encoder plus
/// decoder plus cross-entropy) against central finite differences, over
/// every model parameter. Dropout stays in eval mode so the loss is
/// deterministic. Returns the max relative error.
pub fn gradcheck_training_loss(
    config: &ModelConfig,
    features: &Tensor,
    caption_ids: &[usize],
    h: f64,
    init_seed: u64,
) -> Result<f64> {
    config.validate()?;
    if caption_ids.len() < 2 {
        return Err(Error::Contract("caption needs at least [bos, eos]".into()));
    }
    let mut init_rng = RngStream::seed_from(init_seed);
    let params = ModelParams::init(config.clone(), &mut init_rng)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = names
        .iter()
        .map(|n| params.get(n).cloned())
        .collect::<Result<_>>()?;

    let input = &caption_ids[..caption_ids.len() - 1];
    let target = &caption_ids[1..];
    crate::tensor::grad_check(
        &tensors,
        |tape, ids| {
            let bound = crate::model::ParamIds::from_pairs(
                names.iter().cloned().zip(ids.iter().copied()),
            );
            let mut rng = RngStream::seed_from(0); // eval mode draws nothing
            let memory = encode(tape, features, &bound, config, Mode::Eval, &mut rng)?;
            let logits =
                decode_forward(tape, input, memory, &bound, config, Mode::Eval, &mut rng)?;
            tape.cross_entropy(logits, target, PAD_ID)
        },
        h,
    )
}

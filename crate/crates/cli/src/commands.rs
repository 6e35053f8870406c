//! Command implementations. stdout carries machine-readable results,
//! stderr carries human logs.

use std::path::Path;
use std::process::ExitCode;

use serde::{Deserialize, Serialize};

use capformer::data::{read_feature_file, synth_dataset, Manifest, SynthOptions};
use capformer::decode::{beam_search, encode_memory, greedy_decode};
use capformer::error::Error;
use capformer::metrics::{evaluate, EvalEntry};
use capformer::model::ModelConfig;
use capformer::rng::RngStream;
use capformer::tensor::Tensor;
use capformer::text::{normalize_and_tokenize, Vocab};
use capformer::train::{gradcheck_training_loss, train, Checkpoint, TrainConfig};
use capformer::Result;

use crate::Command;

/// Gradcheck threshold: the run fails (exit 1) at or above this.
const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Input-shaped errors exit 2; failed checks and internal contract
/// violations exit 1.
pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Contract(_) | Error::Training(_) => 1,
        _ => 2,
    }
}

/// Run config file: a merged view of model + train sections. Missing
/// fields take defaults; command-line flags override file values.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let body = std::fs::read_to_string(p).map_err(|e| {
                    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
                })?;
                serde_json::from_str(&body)
                    .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
            }
        }
    }
}

/// Everything echoed into config.lock.json: the resolved run config plus
/// the input paths, so a run is reproducible from this file and the seed.
#[derive(Serialize)]
struct ConfigLock<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    paths: serde_json::Value,
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::BuildVocab { manifest, min_freq, out } => build_vocab(&manifest, min_freq, &out),
        Command::Train {
            config,
            manifest,
            vocab,
            out_dir,
            resume,
            max_steps,
            batch_size,
            seed,
            lr_base,
            warmup_steps,
            checkpoint_every,
            label,
            d_model,
            n_heads,
            enc_layers,
            dec_layers,
            d_ff,
            dropout,
            max_len,
        } => {
            let mut rc = RunConfig::load(config.as_deref())?;
            override_opt(&mut rc.train.max_steps, max_steps);
            override_opt(&mut rc.train.batch_size, batch_size);
            override_opt(&mut rc.train.seed, seed);
            override_opt(&mut rc.train.lr_base, lr_base);
            override_opt(&mut rc.train.warmup_steps, warmup_steps);
            override_opt(&mut rc.train.checkpoint_every, checkpoint_every);
            override_opt(&mut rc.train.label, label);
            override_opt(&mut rc.model.d_model, d_model);
            override_opt(&mut rc.model.n_heads, n_heads);
            override_opt(&mut rc.model.n_enc_layers, enc_layers);
            override_opt(&mut rc.model.n_dec_layers, dec_layers);
            override_opt(&mut rc.model.d_ff, d_ff);
            override_opt(&mut rc.model.dropout_p, dropout);
            override_opt(&mut rc.model.max_len, max_len);
            cmd_train(rc, &manifest, &vocab, &out_dir, resume.as_deref())
        }
        Command::Caption { checkpoint, features, vocab, beam, max_len, length_alpha } => {
            cmd_caption(&checkpoint, &features, &vocab, beam, max_len, length_alpha)
        }
        Command::Evaluate {
            pairs,
            checkpoint,
            manifest,
            vocab,
            beam,
            max_len,
            length_alpha,
            out_dir,
        } => cmd_evaluate(
            pairs.as_deref(),
            checkpoint.as_deref(),
            manifest.as_deref(),
            vocab.as_deref(),
            beam,
            max_len,
            length_alpha,
            out_dir.as_deref(),
        ),
        Command::Gradcheck { config, seed } => cmd_gradcheck(config.as_deref(), seed),
        Command::SynthData { n, out_dir, seed, grid_len, feature_dim, tokens } => {
            let opts = SynthOptions {
                n_images: n,
                grid_len,
                feature_dim,
                vocab_size_tokens: tokens,
                seed,
            };
            let manifest = synth_dataset(&out_dir, &opts)?;
            println!("manifest={}", out_dir.join("manifest.jsonl").display());
            println!("images={}", manifest.len());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn override_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn manifest_token_corpus(manifest: &Manifest) -> Vec<Vec<String>> {
    manifest
        .records()
        .iter()
        .flat_map(|r| r.captions.iter().map(|c| normalize_and_tokenize(c)))
        .collect()
}

fn build_vocab(manifest_path: &Path, min_freq: usize, out: &Path) -> Result<ExitCode> {
    let manifest = Manifest::load(manifest_path)?;
    let corpus = manifest_token_corpus(&manifest);
    let vocab = Vocab::build(&corpus, min_freq)?;
    vocab.save(out)?;
    println!("vocab_size={}", vocab.size());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    mut rc: RunConfig,
    manifest_path: &Path,
    vocab_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let manifest = Manifest::load(manifest_path)?;
    let vocab = Vocab::load(vocab_path)?;
    rc.model.vocab_size = vocab.size();
    if let Some(first) = manifest.records().first() {
        let grid = read_feature_file(&manifest.feature_path(first))?;
        rc.model.feature_dim = grid.shape()[1];
    }
    rc.model.validate()?;
    rc.train.validate()?;

    std::fs::create_dir_all(out_dir)?;
    let lock = ConfigLock {
        model: &rc.model,
        train: &rc.train,
        paths: serde_json::json!({
            "manifest": manifest_path,
            "vocab": vocab_path,
            "out_dir": out_dir,
        }),
    };
    std::fs::write(
        out_dir.join("config.lock.json"),
        serde_json::to_string_pretty(&lock).expect("config serializes") + "\n",
    )?;

    let resume_ckpt = resume.map(Checkpoint::load).transpose()?;
    let outcome = train(
        &manifest,
        &vocab,
        rc.model,
        rc.train,
        Some(out_dir),
        resume_ckpt,
        |step, loss| eprintln!("step={step} loss={loss}"),
    )?;
    let final_loss = outcome.curve.last().map(|&(_, l)| l);
    let ckpt_name = if outcome.curve.is_empty() { "ckpt-000000.capc" } else { "ckpt-final.capc" };
    println!(
        "steps={} final_loss={} checkpoint={}",
        outcome.checkpoint.step,
        final_loss.map_or("n/a".into(), |l| l.to_string()),
        out_dir.join(ckpt_name).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_model(checkpoint: &Path, vocab_path: &Path) -> Result<(Checkpoint, Vocab)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab = Vocab::load(vocab_path)?;
    ckpt.verify_vocab(&vocab)?;
    Ok((ckpt, vocab))
}

fn caption_features(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    features: &Tensor,
    beam: usize,
    max_len: Option<usize>,
    length_alpha: f64,
) -> Result<String> {
    let config = ckpt.params.config();
    let max_len = max_len.unwrap_or(config.max_len).min(config.max_len);
    let memory = encode_memory(features, &ckpt.params)?;
    let ids = if beam <= 1 {
        greedy_decode(&memory, &ckpt.params, max_len)?
    } else {
        beam_search(&memory, &ckpt.params, beam, max_len, length_alpha)?
    };
    vocab.decode(&ids)
}

fn cmd_caption(
    checkpoint: &Path,
    features_path: &Path,
    vocab_path: &Path,
    beam: usize,
    max_len: Option<usize>,
    length_alpha: f64,
) -> Result<ExitCode> {
    let (ckpt, vocab) = load_model(checkpoint, vocab_path)?;
    let features = read_feature_file(features_path)?;
    let caption = caption_features(&ckpt, &vocab, &features, beam, max_len, length_alpha)?;
    println!("{caption}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct PairLine {
    candidate: String,
    references: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    pairs: Option<&Path>,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    vocab: Option<&Path>,
    beam: usize,
    max_len: Option<usize>,
    length_alpha: f64,
    out_dir: Option<&Path>,
) -> Result<ExitCode> {
    let corpus: Vec<EvalEntry> = match (pairs, checkpoint) {
        (Some(pairs_path), None) => {
            let body = std::fs::read_to_string(pairs_path).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", pairs_path.display())))
            })?;
            let mut corpus = Vec::new();
            for (lineno, line) in body.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let pair: PairLine = serde_json::from_str(line).map_err(|e| {
                    Error::Format(format!("{}:{}: {e}", pairs_path.display(), lineno + 1))
                })?;
                corpus.push(EvalEntry {
                    candidate: normalize_and_tokenize(&pair.candidate),
                    references: pair.references.iter().map(|r| normalize_and_tokenize(r)).collect(),
                });
            }
            corpus
        }
        (None, Some(ckpt_path)) => {
            let manifest_path = manifest.expect("clap enforces --manifest");
            let vocab_path = vocab.expect("clap enforces --vocab");
            let (ckpt, vocab) = load_model(ckpt_path, vocab_path)?;
            let manifest = Manifest::load(manifest_path)?;
            let mut corpus = Vec::new();
            for record in manifest.records() {
                let features = read_feature_file(&manifest.feature_path(record))?;
                let text =
                    caption_features(&ckpt, &vocab, &features, beam, max_len, length_alpha)?;
                corpus.push(EvalEntry {
                    candidate: normalize_and_tokenize(&text),
                    references: record
                        .captions
                        .iter()
                        .map(|c| normalize_and_tokenize(c))
                        .collect(),
                });
            }
            corpus
        }
        _ => {
            return Err(Error::Parameter(
                "pass either --pairs or --checkpoint with --manifest and --vocab".into(),
            ))
        }
    };

    let report = evaluate(&corpus)?;
    let json = report.corpus_json();
    println!("{}", serde_json::to_string(&json).expect("report serializes"));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&json).expect("report serializes") + "\n",
        )?;
        std::fs::write(dir.join("per_sentence.csv"), report.per_sentence_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(config: Option<&Path>, seed: u64) -> Result<ExitCode> {
    let rc = RunConfig::load(config)?;
    // Tiny default model; a supplied config's model section overrides it.
    let model = if config.is_some() {
        let mut m = rc.model;
        if m.vocab_size == 0 {
            m.vocab_size = 12;
        }
        m
    } else {
        ModelConfig {
            d_model: 16,
            n_heads: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            dropout_p: 0.0,
            vocab_size: 12,
            max_len: 8,
            feature_dim: 8,
            embed_dropout: true,
        }
    };
    model.validate()?;

    let mut rng = RngStream::seed_from(seed);
    let features = Tensor::uniform(vec![4, model.feature_dim], -1.0, 1.0, &mut rng)?;
    let mut caption_ids = vec![capformer::text::BOS_ID];
    for _ in 0..4 {
        caption_ids.push(4 + rng.below(model.vocab_size - 4));
    }
    caption_ids.push(capformer::text::EOS_ID);

    let err = gradcheck_training_loss(&model, &features, &caption_ids, 1e-5, seed)?;
    println!("gradcheck max_rel_err={err:e}");
    if err < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck failed: {err:e} >= {GRADCHECK_TOLERANCE:e}");
        Ok(ExitCode::from(1))
    }
}

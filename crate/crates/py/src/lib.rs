//! Python bindings: tokenization, vocabularies, CAPF feature files,
//! synthetic data, training, captioning, metrics, and the gradient check.
//! Tensors cross the boundary as nested lists of floats.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use capformer::data;
use capformer::decode;
use capformer::error::Error;
use capformer::metrics::{self, EvalEntry};
use capformer::model::{self, ModelConfig};
use capformer::rng::RngStream;
use capformer::tensor::Tensor;
use capformer::text;
use capformer::train::{self, Checkpoint, TrainConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows)
        .map(|i| t.data()[i * cols..(i + 1) * cols].to_vec())
        .collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(PyValueError::new_err("rows have unequal lengths"));
    }
    Tensor::matrix(n_rows, n_cols, rows.into_iter().flatten().collect()).map_err(py_err)
}

/// NFC-normalize and tokenize caption text.
#[pyfunction]
fn tokenize(text_in: &str) -> Vec<String> {
    text::normalize_and_tokenize(text_in)
}

/// Join tokens, reattaching split-off punctuation.
#[pyfunction]
fn detokenize(tokens: Vec<String>) -> String {
    text::detokenize(&tokens)
}

/// Sinusoidal positional encoding table as a list of rows.
#[pyfunction]
fn positional_encoding(len: usize, d: usize) -> PyResult<Vec<Vec<f64>>> {
    model::positional_encoding(len, d).map(|t| to_rows(&t)).map_err(py_err)
}

/// Token ↔ id vocabulary with reserved pad/bos/eos/unk ids.
#[pyclass(name = "Vocab")]
struct PyVocab {
    inner: text::Vocab,
}

#[pymethods]
impl PyVocab {
    /// Builds from raw caption strings (tokenized internally).
    #[staticmethod]
    #[pyo3(signature = (captions, min_freq = 1))]
    fn build(captions: Vec<String>, min_freq: usize) -> PyResult<Self> {
        let corpus: Vec<Vec<String>> =
            captions.iter().map(|c| text::normalize_and_tokenize(c)).collect();
        Ok(PyVocab { inner: text::Vocab::build(&corpus, min_freq).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocab { inner: text::Vocab::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn size(&self) -> usize {
        self.inner.size()
    }

    fn id_of(&self, token: &str) -> Option<usize> {
        self.inner.id_of(token)
    }

    fn token_of(&self, id: usize) -> Option<String> {
        self.inner.token_of(id).map(str::to_string)
    }

    /// `[bos] + ids + [eos]` for raw text, truncated to max_len.
    #[pyo3(signature = (text_in, max_len = 64))]
    fn encode(&self, text_in: &str, max_len: usize) -> Vec<usize> {
        self.inner.encode(&text::normalize_and_tokenize(text_in), max_len)
    }

    fn decode(&self, ids: Vec<usize>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(py_err)
    }
}

/// Write a feature grid (list of rows) as a CAPF file.
#[pyfunction]
fn write_features(path: PathBuf, rows: Vec<Vec<f64>>) -> PyResult<()> {
    data::write_feature_file(&path, &from_rows(rows)?).map_err(py_err)
}

/// Read a CAPF file back as a list of rows.
#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    data::read_feature_file(&path).map(|t| to_rows(&t)).map_err(py_err)
}

/// Generate a synthetic dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_images = 16, grid_len = 8, feature_dim = 32, tokens = 24, seed = 7))]
fn synth_dataset(
    out_dir: PathBuf,
    n_images: usize,
    grid_len: usize,
    feature_dim: usize,
    tokens: usize,
    seed: u64,
) -> PyResult<String> {
    let opts = data::SynthOptions {
        n_images,
        grid_len,
        feature_dim,
        vocab_size_tokens: tokens,
        seed,
    };
    data::synth_dataset(&out_dir, &opts).map_err(py_err)?;
    Ok(out_dir.join("manifest.jsonl").display().to_string())
}

fn corpus_from(candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<Vec<EvalEntry>> {
    if candidates.len() != references.len() {
        return Err(PyValueError::new_err(format!(
            "{} candidates but {} reference groups",
            candidates.len(),
            references.len()
        )));
    }
    Ok(candidates
        .iter()
        .zip(&references)
        .map(|(c, refs)| EvalEntry {
            candidate: text::normalize_and_tokenize(c),
            references: refs.iter().map(|r| text::normalize_and_tokenize(r)).collect(),
        })
        .collect())
}

/// Score candidates against references; returns a dict with keys
/// bleu1..bleu4, meteor, rouge_l, cider.
#[pyfunction]
fn evaluate(candidates: Vec<String>, references: Vec<Vec<String>>) -> PyResult<HashMap<String, f64>> {
    let corpus = corpus_from(candidates, references)?;
    let report = metrics::evaluate(&corpus).map_err(py_err)?;
    let mut out = HashMap::new();
    for (i, v) in report.bleu.iter().enumerate() {
        out.insert(format!("bleu{}", i + 1), *v);
    }
    out.insert("meteor".into(), report.meteor);
    out.insert("rouge_l".into(), report.rouge_l);
    out.insert("cider".into(), report.cider);
    Ok(out)
}

/// Train on a manifest; returns {"steps", "final_loss", "first_loss"} plus
/// writes checkpoints and loss.csv under out_dir.
#[pyfunction]
#[pyo3(signature = (
    manifest, vocab, out_dir, max_steps = 500, batch_size = 4, seed = 7,
    d_model = 64, n_heads = 8, enc_layers = 2, dec_layers = 2, d_ff = 256,
    dropout = 0.0, max_len = 32
))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    manifest: PathBuf,
    vocab: PathBuf,
    out_dir: PathBuf,
    max_steps: usize,
    batch_size: usize,
    seed: u64,
    d_model: usize,
    n_heads: usize,
    enc_layers: usize,
    dec_layers: usize,
    d_ff: usize,
    dropout: f64,
    max_len: usize,
) -> PyResult<HashMap<String, f64>> {
    let manifest = data::Manifest::load(&manifest).map_err(py_err)?;
    let vocab = text::Vocab::load(&vocab).map_err(py_err)?;
    let feature_dim = manifest
        .records()
        .first()
        .map(|r| data::read_feature_file(&manifest.feature_path(r)).map(|t| t.shape()[1]))
        .transpose()
        .map_err(py_err)?
        .unwrap_or(2048);
    let model_cfg = ModelConfig {
        d_model,
        n_heads,
        n_enc_layers: enc_layers,
        n_dec_layers: dec_layers,
        d_ff,
        dropout_p: dropout,
        vocab_size: vocab.size(),
        max_len,
        feature_dim,
        embed_dropout: true,
    };
    let train_cfg = TrainConfig { batch_size, max_steps, seed, ..TrainConfig::default() };
    let outcome = train::train(&manifest, &vocab, model_cfg, train_cfg, Some(&out_dir), None, |_, _| {})
        .map_err(py_err)?;
    let mut out = HashMap::new();
    out.insert("steps".into(), outcome.checkpoint.step as f64);
    if let (Some(&(_, first)), Some(&(_, last))) = (outcome.curve.first(), outcome.curve.last()) {
        out.insert("first_loss".into(), first);
        out.insert("final_loss".into(), last);
    }
    Ok(out)
}

/// A loaded checkpoint + vocabulary, ready to caption feature grids.
#[pyclass]
struct CaptionModel {
    checkpoint: Checkpoint,
    vocab: text::Vocab,
}

#[pymethods]
impl CaptionModel {
    #[staticmethod]
    fn load(checkpoint: PathBuf, vocab: PathBuf) -> PyResult<Self> {
        let checkpoint = Checkpoint::load(&checkpoint).map_err(py_err)?;
        let vocab = text::Vocab::load(&vocab).map_err(py_err)?;
        checkpoint.verify_vocab(&vocab).map_err(py_err)?;
        Ok(CaptionModel { checkpoint, vocab })
    }

    fn step(&self) -> usize {
        self.checkpoint.step
    }

    /// Caption a CAPF feature file; beam width 1 is greedy decoding.
    #[pyo3(signature = (features, beam = 1, max_len = None, length_alpha = 0.7))]
    fn caption(
        &self,
        features: PathBuf,
        beam: usize,
        max_len: Option<usize>,
        length_alpha: f64,
    ) -> PyResult<String> {
        let grid = data::read_feature_file(&features).map_err(py_err)?;
        self.caption_grid(to_rows(&grid), beam, max_len, length_alpha)
    }

    /// Caption a feature grid passed as a list of rows.
    #[pyo3(signature = (rows, beam = 1, max_len = None, length_alpha = 0.7))]
    fn caption_grid(
        &self,
        rows: Vec<Vec<f64>>,
        beam: usize,
        max_len: Option<usize>,
        length_alpha: f64,
    ) -> PyResult<String> {
        let grid = from_rows(rows)?;
        let params = &self.checkpoint.params;
        let config = params.config();
        let max_len = max_len.unwrap_or(config.max_len).min(config.max_len);
        let memory = decode::encode_memory(&grid, params).map_err(py_err)?;
        let ids = if beam <= 1 {
            decode::greedy_decode(&memory, params, max_len).map_err(py_err)?
        } else {
            decode::beam_search(&memory, params, beam, max_len, length_alpha).map_err(py_err)?
        };
        self.vocab.decode(&ids).map_err(py_err)
    }
}

/// Gradient check of the full encoder-decoder training loss against
/// central finite differences; returns the max relative error.
#[pyfunction]
#[pyo3(signature = (seed = 7))]
fn gradcheck(seed: u64) -> PyResult<f64> {
    let config = ModelConfig {
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
    };
    let mut rng = RngStream::seed_from(seed);
    let features = Tensor::uniform(vec![4, config.feature_dim], -1.0, 1.0, &mut rng).map_err(py_err)?;
    let mut caption = vec![text::BOS_ID];
    for _ in 0..4 {
        caption.push(4 + rng.below(config.vocab_size - 4));
    }
    caption.push(text::EOS_ID);
    train::gradcheck_training_loss(&config, &features, &caption, 1e-5, seed).map_err(py_err)
}

/// Split a manifest into train/validation halves; returns the two sizes.
#[pyfunction]
#[pyo3(signature = (manifest, train_fraction = 0.8, seed = 7))]
fn split_sizes(manifest: PathBuf, train_fraction: f64, seed: u64) -> PyResult<(usize, usize)> {
    let manifest = data::Manifest::load(&manifest).map_err(py_err)?;
    let (train_split, val_split) =
        data::split_dataset(&manifest, train_fraction, seed).map_err(py_err)?;
    Ok((train_split.len(), val_split.len()))
}

#[pymodule]
fn capformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(positional_encoding, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(split_sizes, m)?)?;
    m.add_class::<PyVocab>()?;
    m.add_class::<CaptionModel>()?;
    m.add("PAD_ID", text::PAD_ID)?;
    m.add("BOS_ID", text::BOS_ID)?;
    m.add("EOS_ID", text::EOS_ID)?;
    m.add("UNK_ID", text::UNK_ID)?;
    Ok(())
}

//! Dataset plumbing: JSON-lines manifests, the CAPF binary feature format,
//! the train/validation split, and a synthetic dataset generator whose
//! feature grids deterministically encode their captions.
//!
//! CAPF layout (little-endian): magic `CAPF`, version u32, S u32,
//! feature_dim u32, then S·feature_dim f32 payload values, row-major.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, RngStream};
use crate::tensor::Tensor;

pub const CAPF_MAGIC: &[u8; 4] = b"CAPF";
pub const CAPF_VERSION: u32 = 1;

/// One dataset record: an image, its feature file, and its captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub feature_path: String,
    pub captions: Vec<String>,
}

/// A validated list of records; image ids are unique, every record has at
/// least one caption. `feature_path` entries resolve relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Data(format!("duplicate image_id {:?}", r.image_id)));
            }
            if r.captions.is_empty() {
                return Err(Error::Data(format!(
                    "image_id {:?} has no captions",
                    r.image_id
                )));
            }
        }
        Ok(Manifest { records, base_dir })
    }

    /// Loads a JSON-lines manifest, one record per line.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            records.push(record);
        }
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Manifest::new(records, base_dir)
    }

    /// Writes JSON-lines; record order is preserved.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Absolute path of a record's feature file.
    pub fn feature_path(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.feature_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Writes a feature grid as a CAPF file (f64 narrowed to f32).
pub fn write_feature_file(path: &Path, features: &Tensor) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::Dimension(format!(
            "feature grid must be 2-d, got shape {:?}",
            features.shape()
        )));
    }
    let (s, dim) = (features.shape()[0], features.shape()[1]);
    let mut buf = Vec::with_capacity(16 + 4 * s * dim);
    buf.extend_from_slice(CAPF_MAGIC);
    buf.extend_from_slice(&CAPF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(s as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in features.data() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::Data(format!("feature value {v} is not finite as f32")));
        }
        buf.extend_from_slice(&narrowed.to_le_bytes());
    }
    let mut f = File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a CAPF file into an f64 tensor, validating header and payload.
pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != CAPF_MAGIC {
        return Err(Error::Format(format!("{}: not a CAPF file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != CAPF_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported CAPF version {version}",
            path.display()
        )));
    }
    let s = word(8) as usize;
    let dim = word(12) as usize;
    let expect = 16 + 4 * s * dim;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header implies {}",
            path.display(),
            bytes.len() - 16,
            expect - 16
        )));
    }
    let mut data = Vec::with_capacity(s * dim);
    for chunk in bytes[16..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Data(format!("{}: non-finite feature value", path.display())));
        }
        data.push(v as f64);
    }
    Tensor::matrix(s, dim, data)
}

/// Deterministic image-level split: seeded shuffle by image_id, then cut at
/// round(N·train_fraction).
pub fn split_dataset(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut records = manifest.records().to_vec();
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut rng = RngStream::seed_from(seed);
    rng.shuffle(&mut records);

    let n = records.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "split of {n} records at fraction {train_fraction} leaves one side empty"
        )));
    }
    let val = records.split_off(n_train);
    let train = Manifest::new(records, manifest.base_dir().to_path_buf())?;
    let val = Manifest::new(val, manifest.base_dir().to_path_buf())?;
    Ok((train, val))
}

/// Options for [`synth_dataset`].
#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub n_images: usize,
    pub grid_len: usize,
    pub feature_dim: usize,
    pub vocab_size_tokens: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { n_images: 16, grid_len: 8, feature_dim: 32, vocab_size_tokens: 24, seed: 7 }
    }
}

const SYLLABLES: [&str; 8] = ["ka", "ra", "mi", "to", "ne", "su", "ba", "lo"];

/// Deterministic synthetic word for a token index.
pub fn synth_word(index: usize) -> String {
    let mut word = String::new();
    let mut rest = index;
    loop {
        word.push_str(SYLLABLES[rest % SYLLABLES.len()]);
        rest /= SYLLABLES.len();
        if rest == 0 {
            break;
        }
    }
    word
}

/// Caption tokens induced by a pattern id: 3..6 words read off a wheel of
/// `vocab_size_tokens` synthetic words. Distinct pattern ids give distinct
/// captions (the first word differs); length never exceeds 8 tokens.
pub fn synth_caption_tokens(pattern: usize, vocab_size_tokens: usize) -> Vec<String> {
    let k = vocab_size_tokens.max(1);
    let len = 3 + pattern % 4;
    (0..len).map(|j| synth_word((pattern + j * j) % k)).collect()
}

/// Generates `n_images` feature grids plus a manifest under `out_dir`.
///
/// Image i carries pattern id `i % vocab_size_tokens`; its grid is small
/// seeded noise with a strong marker at column `(pattern + row) % dim`, so
/// features fully determine the caption and a correct model can reach zero
/// loss. Each record lists the induced caption twice (two captions per
/// image). Same options → byte-identical files.
pub fn synth_dataset(out_dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    if opts.n_images == 0 || opts.grid_len == 0 || opts.feature_dim == 0 || opts.vocab_size_tokens == 0 {
        return Err(Error::Parameter("synth_dataset options must be positive".into()));
    }
    let features_dir = out_dir.join("features");
    std::fs::create_dir_all(&features_dir)?;

    let mut records = Vec::with_capacity(opts.n_images);
    for i in 0..opts.n_images {
        let pattern = i % opts.vocab_size_tokens;
        let mut rng = RngStream::seed_from(mix_seed(opts.seed, i as u64));
        let mut grid =
            Tensor::uniform(vec![opts.grid_len, opts.feature_dim], -0.05, 0.05, &mut rng)?;
        for row in 0..opts.grid_len {
            let col = (pattern + row) % opts.feature_dim;
            grid.data_mut()[row * opts.feature_dim + col] += 1.0;
        }
        let rel_path = format!("features/img{i:04}.capf");
        write_feature_file(&out_dir.join(&rel_path), &grid)?;

        let caption = synth_caption_tokens(pattern, opts.vocab_size_tokens).join(" ");
        records.push(ManifestRecord {
            image_id: format!("img{i:04}"),
            feature_path: rel_path,
            captions: vec![caption.clone(), caption],
        });
    }
    let manifest = Manifest::new(records, out_dir.to_path_buf())?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

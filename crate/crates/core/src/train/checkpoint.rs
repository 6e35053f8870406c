//! CAPC checkpoint files: magic `CAPC`, version u32, a JSON metadata block
//! (model config, step, seed, vocab hash, label), then named f64 tensors,
//! all little-endian. Saving is atomic: write to a temp file, then rename.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::train::AdamState;

pub const CAPC_MAGIC: &[u8; 4] = b"CAPC";
pub const CAPC_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model_config: ModelConfig,
    step: usize,
    seed: u64,
    vocab_hash: String,
    label: String,
}

/// Everything needed to continue (or serve) a training run. The RNG state
/// is the pair (seed, step): all training-time draws are derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub moments: AdamState,
    pub step: usize,
    pub seed: u64,
    pub vocab_hash: String,
    pub label: String,
}

impl Checkpoint {
    /// Fails when the vocabulary content differs from the one the
    /// checkpoint was trained against.
    pub fn verify_vocab(&self, vocab: &Vocab) -> Result<()> {
        let got = vocab.content_hash();
        if got != self.vocab_hash {
            return Err(Error::Data(format!(
                "vocab hash mismatch: checkpoint has {}, supplied vocab hashes to {got}",
                self.vocab_hash
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            model_config: self.params.config().clone(),
            step: self.step,
            seed: self.seed,
            vocab_hash: self.vocab_hash.clone(),
            label: self.label.clone(),
        };
        let meta_bytes = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");

        let mut buf = Vec::new();
        buf.extend_from_slice(CAPC_MAGIC);
        buf.extend_from_slice(&CAPC_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_bytes);

        let sections: Vec<(String, Vec<usize>, &[f64])> = self
            .params
            .iter()
            .map(|(n, t)| (format!("p.{n}"), t.shape().to_vec(), t.data()))
            .chain(self.moments.m.iter().map(|(n, m)| {
                (format!("m.{n}"), vec![m.len()], m.as_slice())
            }))
            .chain(self.moments.v.iter().map(|(n, v)| {
                (format!("v.{n}"), vec![v.len()], v.as_slice())
            }))
            .collect();
        buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, shape, data) in sections {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let tmp = path.with_extension("capc.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
            .read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };

        if r.take(4)? != CAPC_MAGIC {
            return Err(Error::Format(format!("{}: not a CAPC checkpoint", path.display())));
        }
        let version = r.u32()?;
        if version != CAPC_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("{}: bad metadata block: {e}", path.display())))?;

        let n_sections = r.u32()? as usize;
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut v: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..n_sections {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format(format!("{}: tensor name is not UTF-8", path.display())))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(8 * numel)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            match name.split_once('.') {
                Some(("p", rest)) => {
                    params.insert(rest.to_string(), Tensor::new(shape, data)?);
                }
                Some(("m", rest)) => {
                    m.insert(rest.to_string(), data);
                }
                Some(("v", rest)) => {
                    v.insert(rest.to_string(), data);
                }
                _ => {
                    return Err(Error::Format(format!(
                        "{}: unknown tensor section {name}",
                        path.display()
                    )))
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{}: trailing bytes", path.display())));
        }

        let params = ModelParams::from_tensors(meta.model_config, params)?;
        for (name, t) in params.iter() {
            for (map, what) in [(&m, "first"), (&v, "second")] {
                let got = map.get(name).ok_or_else(|| {
                    Error::Format(format!("{}: missing {what} moment for {name}", path.display()))
                })?;
                if got.len() != t.numel() {
                    return Err(Error::Format(format!(
                        "{}: {what} moment for {name} has wrong length",
                        path.display()
                    )));
                }
            }
        }
        Ok(Checkpoint {
            params,
            moments: AdamState { m, v },
            step: meta.step,
            seed: meta.seed,
            vocab_hash: meta.vocab_hash,
            label: meta.label,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("{}: truncated checkpoint", self.path.display())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            dropout_p: 0.0,
            vocab_size: 9,
            max_len: 8,
            feature_dim: 6,
            embed_dropout: true,
        };
        let params = ModelParams::init(cfg, &mut RngStream::seed_from(77)).unwrap();
        let mut moments = AdamState::zeros_like(&params);
        moments.m.get_mut("embed.w").unwrap()[2] = 0.125;
        moments.v.get_mut("out_proj.b").unwrap()[1] = 3.5;
        Checkpoint {
            params,
            moments,
            step: 42,
            seed: 1234,
            vocab_hash: "abc123".into(),
            label: "unit".into(),
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.capc");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
        // no temp file left behind
        assert!(!dir.path().join("ck.capc.tmp").exists());
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.capc");
        sample_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));

        let mut corrupt = bytes;
        corrupt[0] = b'X';
        std::fs::write(&path, corrupt).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn vocab_hash_verification() {
        use crate::text::normalize_and_tokenize;
        let corpus = vec![normalize_and_tokenize("a b c")];
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let mut ckpt = sample_checkpoint();
        ckpt.vocab_hash = vocab.content_hash();
        ckpt.verify_vocab(&vocab).unwrap();

        let other = Vocab::build(&[normalize_and_tokenize("x y z")], 1).unwrap();
        assert!(matches!(ckpt.verify_vocab(&other), Err(Error::Data(_))));
    }
}

//! Word-level tokenizer and vocabulary for Bengali (and Latin) caption text.
//!
//! Tokenization is NFC-normalized, whitespace-split, with the Bengali danda
//! (U+0964), double danda (U+0965) and ASCII `.,!?;:` split off as their own
//! tokens. The four reserved entries (pad/bos/eos/unk) can never be produced
//! from raw text: a surface token that happens to spell one is escaped by
//! doubling its leading `<`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const DANDA: char = '\u{0964}';
const DOUBLE_DANDA: char = '\u{0965}';

fn is_split_punct(c: char) -> bool {
    matches!(c, DANDA | DOUBLE_DANDA | '.' | ',' | '!' | '?' | ';' | ':')
}

/// NFC-normalizes and tokenizes raw text. Never emits empty tokens or
/// reserved tokens; empty input gives an empty sequence.
pub fn normalize_and_tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect();
    let mut tokens = Vec::new();
    for chunk in normalized.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if is_split_punct(c) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    for t in &mut tokens {
        if RESERVED.contains(&t.as_str()) {
            t.insert(0, '<');
        }
    }
    tokens
}

/// Joins tokens back into text, attaching split-off punctuation to the
/// preceding token without a space.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for t in tokens {
        let attach = t.chars().count() == 1 && t.chars().next().is_some_and(is_split_punct);
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        let _ = write!(out, "{t}");
    }
    out
}

/// Bidirectional token ↔ id map with reserved ids pad=0, bos=1, eos=2, unk=3.
/// Non-reserved ids are dense and deterministic: frequency descending, then
/// token ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_freq: usize,
}

impl Vocab {
    /// Builds a vocabulary from tokenized sentences, keeping tokens whose
    /// corpus frequency is at least `min_freq`.
    pub fn build(corpus: &[Vec<String>], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Parameter("min_freq must be positive".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for token in sentence {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(t, n)| *n >= min_freq && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|(ta, na), (tb, nb)| nb.cmp(na).then_with(|| ta.cmp(tb)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { token_to_id, id_to_token, min_freq })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// `[bos] + ids + [eos]`, unk for OOV, truncated to `max_len` with eos
    /// always last.
    pub fn encode(&self, tokens: &[String], max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len().min(max_len.saturating_sub(1)) + 2);
        if max_len >= 2 {
            ids.push(BOS_ID);
        }
        let body_budget = max_len.saturating_sub(2);
        for t in tokens.iter().take(body_budget) {
            ids.push(self.id_of(t).unwrap_or(UNK_ID));
        }
        if max_len >= 1 {
            ids.push(EOS_ID);
        }
        ids
    }

    /// Drops reserved ids and joins the rest into text; unknown ids are a
    /// vocab error.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut tokens = Vec::with_capacity(ids.len());
        for &id in ids {
            let token = self
                .token_of(id)
                .ok_or_else(|| Error::Vocab(format!("id {id} outside vocab of size {}", self.size())))?;
            if id >= RESERVED.len() {
                tokens.push(token.to_string());
            }
        }
        Ok(detokenize(&tokens))
    }

    /// SHA-256 (hex) over the non-reserved token list; identifies vocab
    /// content independently of where the file lives.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for token in &self.id_to_token[RESERVED.len()..] {
            hasher.update(token.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }

    /// Writes the vocab file: UTF-8, one non-reserved token per line,
    /// line number = id - 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for token in &self.id_to_token[RESERVED.len()..] {
            body.push_str(token);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for line in body.lines() {
            if line.is_empty() {
                return Err(Error::Format(format!(
                    "{}: empty token line at id {}",
                    path.display(),
                    id_to_token.len()
                )));
            }
            id_to_token.push(line.to_string());
        }
        let token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::Format(format!("{}: duplicate token in vocab file", path.display())));
        }
        Ok(Vocab { token_to_id, id_to_token, min_freq: 1 })
    }
}

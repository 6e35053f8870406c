//! Corpus caption metrics: BLEU-1..4, METEOR (exact unigram matching),
//! ROUGE-L, and CIDEr, plus a combined report with per-sentence rows.
//!
//! BLEU substitutes the smallest positive normal double
//! (2.2250738585072014e-308) whenever any modified n-gram precision is
//! zero, instead of collapsing the geometric mean to 0.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Underflow sentinel returned when any BLEU n-gram precision is zero.
pub const BLEU_UNDERFLOW: f64 = f64::MIN_POSITIVE;

/// One scored sentence: a candidate against one or more references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

pub type EvalCorpus = [EvalEntry];

fn validate(corpus: &EvalCorpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Contract("evaluation corpus is empty".into()));
    }
    for (i, e) in corpus.iter().enumerate() {
        if e.references.is_empty() {
            return Err(Error::Contract(format!("entry {i} has no references")));
        }
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

// ── BLEU ────────────────────────────────────────────────────────────────

/// Corpus-level BLEU-N: modified n-gram precisions with clipped counts
/// summed over the corpus, uniform 1/N weights, and brevity penalty
/// exp(1 - r/c) when c < r with r built from per-sentence closest
/// reference lengths (ties → shorter).
pub fn bleu(corpus: &EvalCorpus, n_max: usize) -> Result<f64> {
    if !(1..=4).contains(&n_max) {
        return Err(Error::Parameter(format!("BLEU order must be 1..=4, got {n_max}")));
    }
    validate(corpus)?;

    let mut numer = vec![0usize; n_max];
    let mut denom = vec![0usize; n_max];
    let mut cand_len_total = 0usize;
    let mut ref_len_total = 0usize;

    for entry in corpus {
        let c_len = entry.candidate.len();
        cand_len_total += c_len;
        ref_len_total += entry
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&len| (len.abs_diff(c_len), len))
            .unwrap();

        for n in 1..=n_max {
            let cand_counts = ngram_counts(&entry.candidate, n);
            let mut max_ref_counts: HashMap<&[String], usize> = HashMap::new();
            for r in &entry.references {
                for (gram, count) in ngram_counts(r, n) {
                    let slot = max_ref_counts.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in &cand_counts {
                numer[n - 1] += (*count).min(max_ref_counts.get(gram).copied().unwrap_or(0));
            }
            denom[n - 1] += c_len.saturating_sub(n - 1);
        }
    }

    let mut log_precision_sum = 0.0;
    for n in 0..n_max {
        if numer[n] == 0 || denom[n] == 0 {
            return Ok(BLEU_UNDERFLOW);
        }
        log_precision_sum += (numer[n] as f64 / denom[n] as f64).ln();
    }
    let brevity_penalty = if cand_len_total < ref_len_total {
        (1.0 - ref_len_total as f64 / cand_len_total as f64).exp()
    } else {
        1.0
    };
    Ok(brevity_penalty * (log_precision_sum / n_max as f64).exp())
}

// ── METEOR ──────────────────────────────────────────────────────────────

/// Exact-unigram METEOR (no stems/synonyms): per sentence the best
/// reference by score, where the alignment maximizes matches and then
/// minimizes chunks; P = m/|cand|, R = m/|ref|, F = 10PR/(R+9P),
/// penalty = 0.5·(chunks/m)³, score = F·(1-penalty); corpus mean.
pub fn meteor(corpus: &EvalCorpus) -> Result<f64> {
    validate(corpus)?;
    let total: f64 = corpus.iter().map(meteor_sentence).sum();
    Ok(total / corpus.len() as f64)
}

fn meteor_sentence(entry: &EvalEntry) -> f64 {
    entry
        .references
        .iter()
        .map(|r| meteor_score(&entry.candidate, r))
        .fold(0.0, f64::max)
}

fn meteor_score(cand: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = best_alignment(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let m_f = m as f64;
    let precision = m_f / cand.len() as f64;
    let recall = m_f / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / m_f).powi(3);
    f_mean * (1.0 - penalty)
}

/// Maximum match count and minimum chunk count over all maximum matchings.
/// Branch-and-bound over candidate positions, any reference length.
fn best_alignment(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in cand {
        *cand_counts.entry(t).or_insert(0) += 1;
    }
    let mut quota: HashMap<&str, usize> = HashMap::new();
    let mut m = 0;
    for (tok, &c) in &cand_counts {
        let q = c.min(ref_counts.get(tok).copied().unwrap_or(0));
        if q > 0 {
            quota.insert(tok, q);
            m += q;
        }
    }
    if m == 0 {
        return (0, 0);
    }

    // suffix_counts[tok][i] = occurrences of tok in cand[i..]
    let mut suffix_counts: HashMap<&str, Vec<usize>> = HashMap::new();
    for tok in quota.keys() {
        let mut v = vec![0usize; cand.len() + 1];
        for i in (0..cand.len()).rev() {
            v[i] = v[i + 1] + usize::from(cand[i] == **tok);
        }
        suffix_counts.insert(tok, v);
    }

    struct Search<'a> {
        cand: &'a [String],
        reference: &'a [String],
        quota: HashMap<&'a str, usize>,
        suffix_counts: HashMap<&'a str, Vec<usize>>,
        m: usize,
        best: usize,
    }

    impl Search<'_> {
        fn rec(
            &mut self,
            i: usize,
            matched: usize,
            used: &mut Vec<bool>,
            prev: Option<(usize, usize)>,
            chunks: usize,
        ) {
            if chunks >= self.best {
                return;
            }
            if matched == self.m {
                self.best = chunks;
                return;
            }
            if i == self.cand.len() {
                return;
            }
            let tok = self.cand[i].as_str();
            if self.quota.get(tok).copied().unwrap_or(0) > 0 {
                // continuing the current chunk first reaches good bounds fast
                let continuation = prev.and_then(|(pi, pj)| {
                    (pi + 1 == i && pj + 1 < self.reference.len()).then_some(pj + 1)
                });
                let js: Vec<usize> = continuation
                    .into_iter()
                    .chain(0..self.reference.len())
                    .filter(|&j| self.reference[j] == tok && !used[j])
                    .collect();
                let mut tried = vec![false; self.reference.len()];
                for j in js {
                    if tried[j] {
                        continue;
                    }
                    tried[j] = true;
                    let new_chunk = match prev {
                        Some((pi, pj)) if pi + 1 == i && pj + 1 == j => 0,
                        _ => 1,
                    };
                    *self.quota.get_mut(tok).unwrap() -= 1;
                    used[j] = true;
                    self.rec(i + 1, matched + 1, used, Some((i, j)), chunks + new_chunk);
                    used[j] = false;
                    *self.quota.get_mut(tok).unwrap() += 1;
                }
            }
            // skip cand[i] when later occurrences still cover the quota
            let need = self.quota.get(tok).copied().unwrap_or(0);
            if need == 0 || self.suffix_counts[tok][i + 1] >= need {
                self.rec(i + 1, matched, used, prev, chunks);
            }
        }
    }

    let mut search = Search { cand, reference, quota, suffix_counts, m, best: m + 1 };
    let mut used = vec![false; reference.len()];
    search.rec(0, 0, &mut used, None, 0);
    (m, search.best)
}

// ── ROUGE-L ─────────────────────────────────────────────────────────────

/// LCS-based F-measure with β = 1.2: per sentence the best reference by
/// F = (1+β²)·R·P / (R + β²·P), R = LCS/|ref|, P = LCS/|cand|; corpus mean.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    validate(corpus)?;
    let total: f64 = corpus
        .iter()
        .map(|e| {
            e.references
                .iter()
                .map(|r| rouge_l_score(&e.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / corpus.len() as f64)
}

const ROUGE_BETA: f64 = 1.2;

fn rouge_l_score(cand: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for ai in a {
        let mut diag = 0;
        for (j, bj) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if ai == bj { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

// ── CIDEr ───────────────────────────────────────────────────────────────

/// CIDEr (original, not CIDEr-D): for n = 1..4, TF-IDF vectors over
/// n-grams with IDF = ln(|corpus| / max(1, df)) where df counts images
/// whose references contain the n-gram; cosine similarity against each
/// reference, averaged, then 10 · mean over n; corpus mean over images.
/// A single-image corpus has IDF = ln(1) = 0 everywhere and scores 0.
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    validate(corpus)?;
    let per_image = cider_per_image(corpus);
    Ok(per_image.iter().sum::<f64>() / corpus.len() as f64)
}

fn cider_per_image(corpus: &EvalCorpus) -> Vec<f64> {
    let n_images = corpus.len() as f64;
    // document frequency per n: in how many images' references does the
    // n-gram appear?
    let mut df: [HashMap<&[String], usize>; 4] = Default::default();
    for entry in corpus {
        for n in 1..=4usize {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in &entry.references {
                if r.len() >= n {
                    seen.extend(r.windows(n));
                }
            }
            for gram in seen {
                *df[n - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }

    let tfidf = |tokens: &[String], n: usize| -> HashMap<Vec<String>, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(gram, count)| {
                let d = df[n - 1].get(gram).copied().unwrap_or(0).max(1) as f64;
                (gram.to_vec(), count as f64 * (n_images / d).ln())
            })
            .collect()
    };

    corpus
        .iter()
        .map(|entry| {
            let mut score_sum = 0.0;
            for n in 1..=4usize {
                let cand_vec = tfidf(&entry.candidate, n);
                let mut cos_sum = 0.0;
                for r in &entry.references {
                    cos_sum += cosine(&cand_vec, &tfidf(r, n));
                }
                score_sum += cos_sum / entry.references.len() as f64;
            }
            10.0 * score_sum / 4.0
        })
        .collect()
}

pub(crate) fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &va)| b.get(g).map(|&vb| va * vb))
        .sum();
    let norm = |m: &HashMap<Vec<String>, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ── combined report ─────────────────────────────────────────────────────

/// Per-sentence metric rows (sentence-level BLEU is informational; the
/// corpus BLEU is not its mean).
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceReport {
    pub index: usize,
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub per_sentence: Vec<SentenceReport>,
}

impl MetricReport {
    /// Corpus-level scores as a JSON object with keys bleu1..bleu4,
    /// meteor, rouge_l, cider.
    pub fn corpus_json(&self) -> serde_json::Value {
        serde_json::json!({
            "bleu1": self.bleu[0],
            "bleu2": self.bleu[1],
            "bleu3": self.bleu[2],
            "bleu4": self.bleu[3],
            "meteor": self.meteor,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
        })
    }

    /// Per-sentence rows as CSV.
    pub fn per_sentence_csv(&self) -> String {
        let mut out = String::from("index,bleu1,bleu2,bleu3,bleu4,meteor,rouge_l,cider\n");
        for row in &self.per_sentence {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{},{},{}\n",
                row.index,
                row.bleu[0],
                row.bleu[1],
                row.bleu[2],
                row.bleu[3],
                row.meteor,
                row.rouge_l,
                row.cider
            ));
        }
        out
    }
}

/// Runs all four metrics and assembles the report.
pub fn evaluate(corpus: &EvalCorpus) -> Result<MetricReport> {
    validate(corpus)?;
    let bleu_scores = [
        bleu(corpus, 1)?,
        bleu(corpus, 2)?,
        bleu(corpus, 3)?,
        bleu(corpus, 4)?,
    ];
    let meteor_score = meteor(corpus)?;
    let rouge_score = rouge_l(corpus)?;
    let cider_score = cider(corpus)?;
    let cider_rows = cider_per_image(corpus);

    let per_sentence = corpus
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            let single = std::slice::from_ref(entry);
            Ok(SentenceReport {
                index,
                bleu: [
                    bleu(single, 1)?,
                    bleu(single, 2)?,
                    bleu(single, 3)?,
                    bleu(single, 4)?,
                ],
                meteor: meteor_sentence(entry),
                rouge_l: entry
                    .references
                    .iter()
                    .map(|r| rouge_l_score(&entry.candidate, r))
                    .fold(0.0, f64::max),
                cider: cider_rows[index],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let report = MetricReport {
        bleu: bleu_scores,
        meteor: meteor_score,
        rouge_l: rouge_score,
        cider: cider_score,
        per_sentence,
    };
    debug_assert!(report.bleu.iter().all(|v| (0.0..=1.0).contains(v)));
    debug_assert!((0.0..=1.0).contains(&report.meteor));
    debug_assert!((0.0..=1.0).contains(&report.rouge_l));
    debug_assert!((0.0..=10.0 + 1e-9).contains(&report.cider));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn entry(cand: &str, refs: &[&str]) -> EvalEntry {
        EvalEntry {
            candidate: toks(cand),
            references: refs.iter().map(|r| toks(r)).collect(),
        }
    }

    #[test]
    fn bleu_perfect_match_is_one_for_all_orders() {
        let corpus = vec![entry("a b c d e", &["a b c d e"])];
        for n in 1..=4 {
            assert_eq!(bleu(&corpus, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn bleu_hand_computed_brevity_penalty() {
        // cand [the cat sat], ref [the cat sat down]: p1=p2=p3=1,
        // BP = exp(1 - 4/3)
        let corpus = vec![entry("the cat sat", &["the cat sat down"])];
        let expect = (1.0f64 - 4.0 / 3.0).exp();
        assert!((bleu(&corpus, 3).unwrap() - expect).abs() < 1e-12);
        assert!((bleu(&corpus, 3).unwrap() - 0.7165313).abs() < 1e-7);
    }

    #[test]
    fn bleu_zero_overlap_returns_the_underflow_sentinel() {
        let corpus = vec![entry("a b c d e", &["v w x y z"])];
        let b4 = bleu(&corpus, 4).unwrap();
        assert_eq!(b4, 2.2250738585072014e-308);
        assert_eq!(b4, f64::MIN_POSITIVE);
        assert_eq!(format!("{b4:e}"), "2.2250738585072014e-308");
    }

    #[test]
    fn bleu_sentinel_triggers_on_missing_higher_order_overlap() {
        // shared unigrams but no shared 4-gram
        let corpus = vec![entry("a b c a b c a", &["a x b y c z a b"])];
        assert!(bleu(&corpus, 1).unwrap() > 0.0);
        assert_eq!(bleu(&corpus, 4).unwrap(), BLEU_UNDERFLOW);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // "the the the" vs "the cat": clipped p1 = 1/3
        let corpus = vec![entry("the the the", &["the cat"])];
        let b1 = bleu(&corpus, 1).unwrap();
        // BP: c=3, r=2 → 1
        assert!((b1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_nonincreasing_in_n_without_underflow() {
        let corpus = vec![
            entry("a b c d a b", &["a b c d e", "a b x d a b"]),
            entry("x y z w", &["x y z w q"]),
        ];
        let scores: Vec<f64> = (1..=4).map(|n| bleu(&corpus, n).unwrap()).collect();
        assert!(scores.iter().all(|&s| s > BLEU_UNDERFLOW));
        for pair in scores.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15, "{scores:?}");
        }
    }

    #[test]
    fn bleu_rejects_empty_corpus_and_bad_order() {
        assert!(matches!(bleu(&[], 1), Err(Error::Contract(_))));
        let corpus = vec![entry("a", &["a"])];
        assert!(matches!(bleu(&corpus, 0), Err(Error::Parameter(_))));
        assert!(matches!(bleu(&corpus, 5), Err(Error::Parameter(_))));
    }

    #[test]
    fn meteor_zero_overlap_is_zero() {
        let corpus = vec![entry("a b", &["x y"])];
        assert_eq!(meteor(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn meteor_hand_alignment_with_two_chunks() {
        // [a b c] vs [a c d]: m=2, P=R=2/3, F=2/3, chunks=2, penalty=0.5
        let corpus = vec![entry("a b c", &["a c d"])];
        assert!((meteor(&corpus).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn meteor_identical_ten_token_sentences() {
        let s = "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9";
        let corpus = vec![entry(s, &[s])];
        assert!((meteor(&corpus).unwrap() - 0.9995).abs() < 1e-12);
    }

    #[test]
    fn meteor_chunk_minimization_prefers_monotone_alignment() {
        // cand "a b a", ref "a b a": the in-order matching gives 1 chunk
        // even though "a" could cross-match.
        let corpus = vec![entry("a b a", &["a b a"])];
        let m = 3.0f64;
        let expect = 1.0 * (1.0 - 0.5 * (1.0 / m).powi(3));
        assert!((meteor(&corpus).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn meteor_handles_references_longer_than_64_tokens() {
        // 80-token reference; 10 matched tokens form one clean run
        let reference: Vec<String> = (0..70)
            .map(|i| format!("filler{i}"))
            .chain((0..10).map(|i| format!("hit{i}")))
            .collect();
        let cand: Vec<String> = (0..10).map(|i| format!("hit{i}")).collect();
        let corpus = vec![EvalEntry { candidate: cand, references: vec![reference] }];
        let score = meteor(&corpus).unwrap();
        // m=10, chunks=1, P=1, R=10/80
        let (p, r) = (1.0f64, 10.0 / 80.0);
        let f = 10.0 * p * r / (r + 9.0 * p);
        let expect = f * (1.0 - 0.5 * (1.0f64 / 10.0).powi(3));
        assert!((score - expect).abs() < 1e-12, "{score} vs {expect}");
    }

    #[test]
    fn meteor_takes_best_reference_by_score() {
        let corpus = vec![entry("a b c", &["x y z", "a b c"])];
        let expect = 1.0 * (1.0 - 0.5 * (1.0f64 / 3.0).powi(3));
        assert!((meteor(&corpus).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn rouge_identical_and_disjoint() {
        assert_eq!(rouge_l(&[entry("a b c", &["a b c"])]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[entry("a b c", &["x y z"])]).unwrap(), 0.0);
    }

    #[test]
    fn rouge_hand_computed_f_beta() {
        // cand [a b c d], ref [a c d]: LCS=3, R=1, P=0.75
        let corpus = vec![entry("a b c d", &["a c d"])];
        let expect = 2.44 * 0.75 / (1.0 + 1.44 * 0.75);
        assert!((rouge_l(&corpus).unwrap() - expect).abs() < 1e-12);
        assert!((rouge_l(&corpus).unwrap() - 0.87980).abs() < 1e-5);
    }

    #[test]
    fn cider_identical_distinct_captions_score_ten() {
        // 4+ tokens per caption so every order n = 1..4 has n-grams
        let corpus = vec![
            entry("a b c x", &["a b c x"]),
            entry("d e f y", &["d e f y"]),
            entry("g h i z", &["g h i z"]),
        ];
        assert!((cider(&corpus).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cider_short_captions_lack_higher_order_grams() {
        // identical 3-token captions have no 4-grams: the n=4 cosine is 0
        // (zero-norm convention), so the score is 7.5 rather than 10.
        let corpus = vec![
            entry("a b c", &["a b c"]),
            entry("d e f", &["d e f"]),
        ];
        assert!((cider(&corpus).unwrap() - 7.5).abs() < 1e-12);
    }

    #[test]
    fn cider_disjoint_ngrams_score_zero() {
        let corpus = vec![
            entry("a b", &["x y"]),
            entry("c d", &["w z"]),
        ];
        assert_eq!(cider(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn cider_single_image_corpus_degenerates_to_zero() {
        // IDF = ln(1) = 0 → zero vectors → cosine 0
        let corpus = vec![entry("a b", &["a b"])];
        assert_eq!(cider(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let v = |pairs: &[(&str, f64)]| {
            pairs
                .iter()
                .map(|(g, w)| (vec![g.to_string()], *w))
                .collect::<HashMap<_, _>>()
        };
        let a = v(&[("x", 1.0), ("y", 2.0)]);
        let b = v(&[("x", 0.5), ("z", 1.5)]);
        let scaled_a: HashMap<_, _> = a.iter().map(|(g, w)| (g.clone(), w * 7.25)).collect();
        let scaled_b: HashMap<_, _> = b.iter().map(|(g, w)| (g.clone(), w * 0.03)).collect();
        assert!((cosine(&a, &b) - cosine(&scaled_a, &scaled_b)).abs() < 1e-15);
    }

    #[test]
    fn evaluate_all_perfect_corpus() {
        let corpus = vec![
            entry("a b c x", &["a b c x"]),
            entry("d e f g h", &["d e f g h"]),
        ];
        let report = evaluate(&corpus).unwrap();
        assert_eq!(report.bleu, [1.0; 4]);
        assert_eq!(report.rouge_l, 1.0);
        assert!((report.cider - 10.0).abs() < 1e-12);
        let meteor_expect =
            (1.0 - 0.5 * (1.0f64 / 4.0).powi(3) + 1.0 - 0.5 * (1.0f64 / 5.0).powi(3)) / 2.0;
        assert!((report.meteor - meteor_expect).abs() < 1e-12);
        assert_eq!(report.per_sentence.len(), 2);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let corpus = vec![
            entry("a b x", &["a b c", "a x"]),
            entry("q w", &["q w e"]),
        ];
        assert_eq!(evaluate(&corpus).unwrap(), evaluate(&corpus).unwrap());
    }

    #[test]
    fn swapping_candidate_and_reference_changes_bleu() {
        // length-asymmetric pair: BLEU is precision-based, so swapping
        // candidate and reference must change it.
        let forward = vec![entry("a b", &["a b c d"])];
        let swapped = vec![entry("a b c d", &["a b"])];
        let f = bleu(&forward, 2).unwrap();
        let s = bleu(&swapped, 2).unwrap();
        assert_ne!(f, s);
    }

    #[test]
    fn metrics_are_invariant_under_token_relabeling() {
        let corpus = vec![
            entry("a b c a", &["a c b", "b b a"]),
            entry("c c d", &["d c", "c d d"]),
        ];
        let rename = |t: &str| format!("tok_{t}_renamed");
        let relabeled: Vec<EvalEntry> = corpus
            .iter()
            .map(|e| EvalEntry {
                candidate: e.candidate.iter().map(|t| rename(t)).collect(),
                references: e
                    .references
                    .iter()
                    .map(|r| r.iter().map(|t| rename(t)).collect())
                    .collect(),
            })
            .collect();
        let a = evaluate(&corpus).unwrap();
        let b = evaluate(&relabeled).unwrap();
        assert_eq!(a.bleu, b.bleu);
        assert_eq!(a.meteor, b.meteor);
        assert_eq!(a.rouge_l, b.rouge_l);
        assert!((a.cider - b.cider).abs() < 1e-12);
    }

    #[test]
    fn report_json_has_the_schema_keys() {
        let corpus = vec![entry("a", &["a"]), entry("b", &["c"])];
        let report = evaluate(&corpus).unwrap();
        let json = report.corpus_json();
        for key in ["bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider"] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
        let csv = report.per_sentence_csv();
        assert!(csv.starts_with("index,bleu1,bleu2,bleu3,bleu4,meteor,rouge_l,cider\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}

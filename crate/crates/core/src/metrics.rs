//! Caption metrics over token-id sequences: CIDEr-D, BLEU and ROUGE-L.
//!
//! Inputs are expected with SOS/EOS already stripped.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_NGRAM: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;

type NGram = Vec<u32>;

fn ngram_counts(tokens: &[u32], n: usize) -> BTreeMap<NGram, f64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// Document frequencies of 1..4-grams over a reference corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    corpus_size: usize,
    doc_freq: Vec<HashMap<NGram, usize>>,
}

impl IdfTable {
    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn doc_freq(&self, ngram: &[u32]) -> usize {
        match ngram.len() {
            n @ 1..=MAX_NGRAM => self.doc_freq[n - 1].get(ngram).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// `ln(|corpus| / max(df, 1))`.
    pub fn idf(&self, ngram: &[u32]) -> f64 {
        (self.corpus_size as f64).ln() - (self.doc_freq(ngram).max(1) as f64).ln()
    }
}

pub fn build_idf<S: AsRef<[u32]>>(references: &[S]) -> Result<IdfTable> {
    if references.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut doc_freq = vec![HashMap::new(); MAX_NGRAM];
    for r in references {
        for (n, df) in doc_freq.iter_mut().enumerate() {
            for g in ngram_counts(r.as_ref(), n + 1).into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
    }
    Ok(IdfTable {
        corpus_size: references.len(),
        doc_freq,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CiderVariant {
    /// Clipped TF-IDF similarity with a Gaussian length penalty.
    #[default]
    CiderD,
    /// Plain cosine similarity of TF-IDF vectors.
    Plain,
}

/// Sparse TF-IDF weights for a single n-gram order, kept ordered so every
/// floating-point sum over them runs in the same order on every run.
#[derive(Clone, Debug, Default)]
pub struct NGramVector {
    pub weights: BTreeMap<NGram, f64>,
    pub norm: f64,
}

fn tfidf(tokens: &[u32], n: usize, idf: &IdfTable) -> NGramVector {
    let mut weights = ngram_counts(tokens, n);
    for (g, w) in weights.iter_mut() {
        *w *= idf.idf(g);
    }
    let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
    NGramVector { weights, norm }
}

fn similarity(cand: &NGramVector, reference: &NGramVector, variant: CiderVariant) -> f64 {
    let mut val = 0.0;
    for (g, &wc) in &cand.weights {
        if let Some(&wr) = reference.weights.get(g) {
            val += match variant {
                CiderVariant::CiderD => wc.min(wr) * wr,
                CiderVariant::Plain => wc * wr,
            };
        }
    }
    if cand.norm != 0.0 && reference.norm != 0.0 {
        val / (cand.norm * reference.norm)
    } else {
        0.0
    }
}

/// CIDEr-D of `candidate` against `references`, in `[0, 10]`.
pub fn cider<S: AsRef<[u32]>>(candidate: &[u32], references: &[S], idf: &IdfTable) -> Result<f64> {
    cider_with(candidate, references, idf, CiderVariant::CiderD)
}

pub fn cider_with<S: AsRef<[u32]>>(
    candidate: &[u32],
    references: &[S],
    idf: &IdfTable,
    variant: CiderVariant,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut per_n = [0.0; MAX_NGRAM];
    for (n, acc) in per_n.iter_mut().enumerate() {
        let cv = tfidf(candidate, n + 1, idf);
        for r in references {
            let r = r.as_ref();
            let rv = tfidf(r, n + 1, idf);
            let mut s = similarity(&cv, &rv, variant);
            if variant == CiderVariant::CiderD {
                let delta = candidate.len() as f64 - r.len() as f64;
                s *= (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            }
            *acc += s;
        }
        *acc /= references.len() as f64;
    }
    Ok(per_n.iter().sum::<f64>() / MAX_NGRAM as f64 * 10.0)
}

/// Corpus-level BLEU with clipped precisions, a brevity penalty and no smoothing.
pub fn bleu<C: AsRef<[u32]>, R: AsRef<[u32]>>(candidates: &[C], references: &[R], max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(candidates.len(), references.len()));
    }
    if !(1..=MAX_NGRAM).contains(&max_n) {
        return Err(Error::UnsupportedOrder(max_n));
    }
    let mut matched = vec![0.0; max_n];
    let mut total = vec![0.0; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, cnt) in ngram_counts(c, n) {
                matched[n - 1] += cnt.min(rc.get(&g).copied().unwrap_or(0.0));
                total[n - 1] += cnt;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for (m, t) in matched.iter().zip(&total) {
        if *m == 0.0 || *t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with `β = 1.2`.
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> f64 {
    rouge_l_beta(candidate, reference, ROUGE_BETA)
}

pub fn rouge_l_beta(candidate: &[u32], reference: &[u32], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub n: usize,
}

/// Corpus BLEU@1/@4 plus per-example means of ROUGE-L and CIDEr-D.
pub fn evaluate_corpus<C: AsRef<[u32]>, R: AsRef<[u32]>>(
    candidates: &[C],
    references: &[R],
    idf: &IdfTable,
) -> Result<MetricsReport> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let n = candidates.len();
    let mut rouge = 0.0;
    let mut cid = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        rouge += rouge_l(c.as_ref(), r.as_ref());
        cid += cider(c.as_ref(), &[r.as_ref()], idf)?;
    }
    Ok(MetricsReport {
        bleu1: bleu(candidates, references, 1)?,
        bleu4: bleu(candidates, references, 4)?,
        rouge_l: rouge / n as f64,
        cider: cid / n as f64,
        n,
    })
}

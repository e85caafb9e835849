//! Corpus metrics for generated questions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocab;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{hyps} hypotheses for {refs} references")]
    Length { hyps: usize, refs: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// ROUGE-L recall weight.
pub const ROUGE_BETA_SQ: f64 = 1.2;

/// Words that open a question.
pub const QUESTION_WORDS: [&str; 9] = [
    "what", "who", "whom", "whose", "when", "where", "which", "why", "how",
];

/// Splits a line into tokens on whitespace.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

fn aligned<T, U>(hyps: &[T], refs: &[U]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::Length {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus totals of clipped `n`-gram matches and hypothesis `n`-grams.
pub fn modified_precision(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<(usize, usize)> {
    aligned(hyps, refs)?;
    let mut matched = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let rc = ngram_counts(r, n);
        for (gram, count) in ngram_counts(h, n) {
            matched += count.min(rc.get(gram).copied().unwrap_or(0));
            total += count;
        }
    }
    Ok((matched, total))
}

/// Corpus BLEU up to `max_n`-grams with a brevity penalty. A zero precision
/// for `n ≥ 2` is smoothed to `1 / (total + 1)`.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> Result<f64> {
    aligned(hyps, refs)?;
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 || max_n == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matched, total) = modified_precision(hyps, refs, n)?;
        let p = if matched == 0 {
            if n == 1 {
                return Ok(0.0);
            }
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RougeScore {
    pub lcs: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// LCS precision, recall and F-measure of one pair.
pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> RougeScore {
    let lcs = lcs_len(hyp, reference);
    if hyp.is_empty() && reference.is_empty() {
        return RougeScore {
            lcs,
            precision: 1.0,
            recall: 1.0,
            f: 1.0,
        };
    }
    if lcs == 0 {
        return RougeScore {
            lcs,
            precision: 0.0,
            recall: 0.0,
            f: 0.0,
        };
    }
    let precision = lcs as f64 / hyp.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    let f = (1.0 + ROUGE_BETA_SQ) * precision * recall / (recall + ROUGE_BETA_SQ * precision);
    RougeScore {
        lcs,
        precision,
        recall,
        f,
    }
}

/// Mean ROUGE-L F-measure over pairs.
pub fn rouge_l(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    aligned(hyps, refs)?;
    if hyps.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = hyps.iter().zip(refs).map(|(h, r)| rouge_l_pair(h, r).f).sum();
    Ok(total / hyps.len() as f64)
}

/// Micro-averaged agreement on out-of-vocabulary words. `None` marks a zero
/// denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub shared: usize,
    pub generated: usize,
    pub reference: usize,
}

pub fn copy_precision_recall(hyps: &[Vec<String>], refs: &[Vec<String>], vocab: &Vocab) -> Result<CopyScores> {
    aligned(hyps, refs)?;
    let oov = |toks: &[String]| {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in toks.iter().filter(|t| !vocab.contains(t)) {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        counts
    };
    let (mut shared, mut generated, mut reference) = (0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (g, rr) = (oov(h), oov(r));
        generated += g.values().sum::<usize>();
        reference += rr.values().sum::<usize>();
        shared += g
            .iter()
            .map(|(t, &c)| c.min(rr.get(t).copied().unwrap_or(0)))
            .sum::<usize>();
    }
    let ratio = |den: usize| (den > 0).then(|| shared as f64 / den as f64);
    Ok(CopyScores {
        precision: ratio(generated),
        recall: ratio(reference),
        shared,
        generated,
        reference,
    })
}

fn first_question_word(tokens: &[String]) -> Option<String> {
    tokens
        .iter()
        .map(|t| t.to_lowercase())
        .find(|t| QUESTION_WORDS.contains(&t.as_str()))
}

/// Share of pairs whose first question word matches the reference's.
/// References without a question word are skipped; `None` if none remain.
pub fn question_word_accuracy(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<Option<f64>> {
    aligned(hyps, refs)?;
    let mut counted = 0;
    let mut matched = 0;
    for (h, r) in hyps.iter().zip(refs) {
        if let Some(want) = first_question_word(r) {
            counted += 1;
            if first_question_word(h).as_deref() == Some(want.as_str()) {
                matched += 1;
            }
        }
    }
    Ok((counted > 0).then(|| matched as f64 / counted as f64))
}

/// All metrics of one corpus, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub copy_precision: Option<f64>,
    pub copy_recall: Option<f64>,
    pub question_word_accuracy: Option<f64>,
}

impl EvalReport {
    /// Copy metrics need the generation vocabulary and are absent without it.
    pub fn compute(hyps: &[Vec<String>], refs: &[Vec<String>], vocab: Option<&Vocab>) -> Result<Self> {
        let copy = vocab.map(|v| copy_precision_recall(hyps, refs, v)).transpose()?;
        Ok(EvalReport {
            bleu1: bleu(hyps, refs, 1)?,
            bleu2: bleu(hyps, refs, 2)?,
            bleu3: bleu(hyps, refs, 3)?,
            bleu4: bleu(hyps, refs, 4)?,
            rouge_l: rouge_l(hyps, refs)?,
            copy_precision: copy.and_then(|c| c.precision),
            copy_recall: copy.and_then(|c| c.recall),
            question_word_accuracy: question_word_accuracy(hyps, refs)?,
        })
    }

    /// The same report with every value multiplied by 100.
    pub fn percent(&self) -> Self {
        let p = |x: f64| x * 100.0;
        EvalReport {
            bleu1: p(self.bleu1),
            bleu2: p(self.bleu2),
            bleu3: p(self.bleu3),
            bleu4: p(self.bleu4),
            rouge_l: p(self.rouge_l),
            copy_precision: self.copy_precision.map(p),
            copy_recall: self.copy_recall.map(p),
            question_word_accuracy: self.question_word_accuracy.map(p),
        }
    }
}

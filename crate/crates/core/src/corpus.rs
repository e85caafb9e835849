//! Annotated examples, vocabularies, BIO answer tagging and padded batches.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One sentence with lexical features, an answer span and its question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    #[serde(rename = "tokens")]
    pub sentence_tokens: Vec<String>,
    #[serde(rename = "pos")]
    pub pos_tags: Vec<String>,
    #[serde(rename = "ner")]
    pub ner_tags: Vec<String>,
    #[serde(rename = "case")]
    pub case_tags: Vec<String>,
    /// Inclusive token index of the first answer token.
    pub answer_start: usize,
    /// Inclusive token index of the last answer token.
    pub answer_end: usize,
    #[serde(rename = "question", default)]
    pub question_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage_id: Option<String>,
}

/// Answer-position tag. The discriminants are the embedding ids, with 0 left
/// for padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bio {
    O = 1,
    B = 2,
    I = 3,
}

pub const BIO_PAD: usize = 0;
/// Rows in the answer-position embedding table: pad, O, B, I.
pub const BIO_TAGS: usize = 4;

impl Example {
    /// Checks the span, feature alignment and (optionally) the question.
    pub fn validate(&self, require_question: bool) -> Result<(), String> {
        let m = self.sentence_tokens.len();
        if m == 0 {
            return Err("empty sentence".into());
        }
        for (name, feats) in [
            ("pos", &self.pos_tags),
            ("ner", &self.ner_tags),
            ("case", &self.case_tags),
        ] {
            if feats.len() != m {
                return Err(format!(
                    "`{name}` has {} tags for {m} tokens",
                    feats.len()
                ));
            }
        }
        if self.answer_start > self.answer_end || self.answer_end >= m {
            return Err(format!(
                "answer span ({}, {}) out of range for {m} tokens",
                self.answer_start, self.answer_end
            ));
        }
        if require_question && self.question_tokens.is_empty() {
            return Err("empty question".into());
        }
        Ok(())
    }

    pub fn bio_tags(&self) -> Vec<Bio> {
        (0..self.sentence_tokens.len())
            .map(|i| {
                if i == self.answer_start {
                    Bio::B
                } else if i > self.answer_start && i <= self.answer_end {
                    Bio::I
                } else {
                    Bio::O
                }
            })
            .collect()
    }
}

/// Whether loaded records must carry a question.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    Training,
    Inference,
}

/// Reads one JSON record per line. Blank lines are skipped.
pub fn load_examples(path: &Path) -> Result<Vec<Example>, CorpusError> {
    load_examples_with(path, LoadMode::Training)
}

pub fn load_examples_with(path: &Path, mode: LoadMode) -> Result<Vec<Example>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    parse_examples(BufReader::new(file), mode).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::io(path, source),
        other => other,
    })
}

pub fn parse_examples(reader: impl BufRead, mode: LoadMode) -> Result<Vec<Example>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(Path::new("<input>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let ex: Example = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        ex.validate(mode == LoadMode::Training)
            .map_err(|message| CorpusError::Invalid {
                line: lineno,
                message,
            })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples serialize");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

/// Token ↔ id table with four reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const SOS: usize = 2;
    pub const EOS: usize = 3;
    pub const RESERVED: [&'static str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

    /// A vocabulary holding only the reserved entries.
    pub fn empty() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }

    /// Reserved entries followed by `tokens` in order; duplicates and
    /// reserved spellings are skipped.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in Self::RESERVED {
            v.push(r.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
    }

    /// Ranks tokens by descending count, then lexicographically, keeping at
    /// most `max_size` non-reserved entries seen at least `min_count` times.
    pub fn from_counts(counts: &HashMap<String, usize>, max_size: usize, min_count: usize) -> Self {
        let mut ranked: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(_, &c)| c >= min_count)
            .map(|(t, &c)| (t, c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().take(max_size).map(|(t, _)| t.clone()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`Vocab::UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[Self::RESERVED.len()..]
    }

    /// Writes non-reserved tokens one per line; line `k` (0-based) is id `k + 4`.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in self.entries() {
            writeln!(w, "{t}").map_err(|e| CorpusError::io(path, e))?;
        }
        w.flush().map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            tokens.push(line.map_err(|e| CorpusError::io(path, e))?);
        }
        let v = Self::from_tokens(tokens.iter().cloned());
        if v.len() != tokens.len() + Self::RESERVED.len() {
            return Err(CorpusError::Invalid {
                line: 0,
                message: format!("{}: duplicate or reserved entries", path.display()),
            });
        }
        Ok(v)
    }
}

/// Every lookup table the model needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub source: Vocab,
    pub target: Vocab,
    pub pos: Vocab,
    pub ner: Vocab,
    pub case: Vocab,
}

impl Vocabs {
    pub const FILES: [&'static str; 5] = [
        "source.vocab",
        "target.vocab",
        "pos.vocab",
        "ner.vocab",
        "case.vocab",
    ];

    fn tables(&self) -> [&Vocab; 5] {
        [&self.source, &self.target, &self.pos, &self.ner, &self.case]
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        for (v, name) in self.tables().into_iter().zip(Self::FILES) {
            v.save(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let [source, target, pos, ner, case] = Self::FILES.map(|f| Vocab::load(&dir.join(f)));
        Ok(Vocabs {
            source: source?,
            target: target?,
            pos: pos?,
            ner: ner?,
            case: case?,
        })
    }
}

fn count<'a>(items: impl Iterator<Item = &'a String>) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for t in items {
        *counts.entry(t.clone()).or_insert(0) += 1;
    }
    counts
}

/// Word vocabularies are frequency-ranked and capped; feature vocabularies
/// keep every tag.
pub fn build_vocabs(
    examples: &[Example],
    max_source_vocab: usize,
    max_target_vocab: usize,
    min_count: usize,
) -> Vocabs {
    let source = count(examples.iter().flat_map(|e| &e.sentence_tokens));
    let target = count(examples.iter().flat_map(|e| &e.question_tokens));
    let feature = |f: fn(&Example) -> &Vec<String>| {
        Vocab::from_counts(&count(examples.iter().flat_map(f)), usize::MAX, 1)
    };
    Vocabs {
        source: Vocab::from_counts(&source, max_source_vocab, min_count),
        target: Vocab::from_counts(&target, max_target_vocab, min_count),
        pos: feature(|e| &e.pos_tags),
        ner: feature(|e| &e.ner_tags),
        case: feature(|e| &e.case_tags),
    }
}

/// Padded, id-encoded examples. All matrices are `B` rows long.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Source-vocabulary ids used for embedding lookup (unk for OOV).
    pub source_ids: Vec<Vec<usize>>,
    /// Target-vocabulary ids of source tokens, with extended ids for tokens
    /// the target vocabulary lacks; used to scatter copy probabilities.
    pub source_ext_ids: Vec<Vec<usize>>,
    pub pos_ids: Vec<Vec<usize>>,
    pub ner_ids: Vec<Vec<usize>>,
    pub case_ids: Vec<Vec<usize>>,
    pub bio_ids: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<bool>>,
    /// Decoder inputs: sos followed by the question (extended ids as unk).
    pub target_inputs: Vec<Vec<usize>>,
    /// Decoder outputs: the question followed by eos, in extended ids.
    pub target_outputs: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<bool>>,
    pub answer_starts: Vec<usize>,
    pub answer_ends: Vec<usize>,
    /// Per example, the distinct source tokens missing from the target
    /// vocabulary; entry `k` has extended id `target_vocab_size + k`.
    pub source_oovs: Vec<Vec<String>>,
    pub passage_ids: Vec<Option<String>>,
    pub target_vocab_size: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn source_len(&self, row: usize) -> usize {
        self.source_mask[row].iter().filter(|&&m| m).count()
    }

    pub fn target_len(&self, row: usize) -> usize {
        self.target_mask[row].iter().filter(|&&m| m).count()
    }

    /// Size of the extended vocabulary of one row.
    pub fn extended_size(&self, row: usize) -> usize {
        self.target_vocab_size + self.source_oovs[row].len()
    }

    /// Maps an extended target id back to a token.
    pub fn ext_token<'a>(&'a self, row: usize, id: usize, target: &'a Vocab) -> Option<&'a str> {
        if id < self.target_vocab_size {
            target.token(id)
        } else {
            self.source_oovs[row]
                .get(id - self.target_vocab_size)
                .map(String::as_str)
        }
    }

    /// The gold question of `row` as tokens, without eos.
    pub fn decode_target(&self, row: usize, target: &Vocab) -> Vec<String> {
        self.target_outputs[row]
            .iter()
            .zip(&self.target_mask[row])
            .filter(|(&id, &m)| m && id != Vocab::EOS)
            .map(|(&id, _)| self.ext_token(row, id, target).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// The sentence of `row`, recovered through the extended ids.
    pub fn decode_source(&self, row: usize, target: &Vocab) -> Vec<String> {
        self.source_ext_ids[row]
            .iter()
            .zip(&self.source_mask[row])
            .filter(|(_, &m)| m)
            .map(|(&id, _)| self.ext_token(row, id, target).unwrap_or("<unk>").to_string())
            .collect()
    }
}

fn pad_to(mut v: Vec<usize>, len: usize) -> Vec<usize> {
    v.resize(len, Vocab::PAD);
    v
}

fn mask_of(real: usize, len: usize) -> Vec<bool> {
    (0..len).map(|i| i < real).collect()
}

/// Encodes and pads `examples`. Examples are assumed valid.
pub fn make_batch(examples: &[Example], vocabs: &Vocabs) -> Batch {
    let m_max = examples
        .iter()
        .map(|e| e.sentence_tokens.len())
        .max()
        .unwrap_or(0);
    let n_max = examples
        .iter()
        .map(|e| e.question_tokens.len() + 1)
        .max()
        .unwrap_or(0);
    let tv = &vocabs.target;
    let mut b = Batch {
        source_ids: Vec::new(),
        source_ext_ids: Vec::new(),
        pos_ids: Vec::new(),
        ner_ids: Vec::new(),
        case_ids: Vec::new(),
        bio_ids: Vec::new(),
        source_mask: Vec::new(),
        target_inputs: Vec::new(),
        target_outputs: Vec::new(),
        target_mask: Vec::new(),
        answer_starts: Vec::new(),
        answer_ends: Vec::new(),
        source_oovs: Vec::new(),
        passage_ids: Vec::new(),
        target_vocab_size: tv.len(),
    };
    for ex in examples {
        let m = ex.sentence_tokens.len();
        let mut oovs: Vec<String> = Vec::new();
        let mut ext = Vec::with_capacity(m);
        for t in &ex.sentence_tokens {
            let id = match tv.get(t) {
                Some(id) => id,
                None => {
                    let k = oovs.iter().position(|o| o == t).unwrap_or_else(|| {
                        oovs.push(t.clone());
                        oovs.len() - 1
                    });
                    tv.len() + k
                }
            };
            ext.push(id);
        }
        let lookup = |v: &Vocab, toks: &[String]| -> Vec<usize> {
            pad_to(toks.iter().map(|t| v.id(t)).collect(), m_max)
        };
        b.source_ids.push(lookup(&vocabs.source, &ex.sentence_tokens));
        b.pos_ids.push(lookup(&vocabs.pos, &ex.pos_tags));
        b.ner_ids.push(lookup(&vocabs.ner, &ex.ner_tags));
        b.case_ids.push(lookup(&vocabs.case, &ex.case_tags));
        b.bio_ids.push(pad_to(
            ex.bio_tags().into_iter().map(|t| t as usize).collect(),
            m_max,
        ));
        b.source_ext_ids.push(pad_to(ext, m_max));
        b.source_mask.push(mask_of(m, m_max));

        let n = ex.question_tokens.len();
        let mut inputs = vec![Vocab::SOS];
        let mut outputs = Vec::with_capacity(n + 1);
        for t in &ex.question_tokens {
            let out = match tv.get(t) {
                Some(id) => id,
                None => oovs
                    .iter()
                    .position(|o| o == t)
                    .map_or(Vocab::UNK, |k| tv.len() + k),
            };
            outputs.push(out);
            inputs.push(if out >= tv.len() { Vocab::UNK } else { out });
        }
        outputs.push(Vocab::EOS);
        b.target_inputs.push(pad_to(inputs, n_max));
        b.target_outputs.push(pad_to(outputs, n_max));
        b.target_mask.push(mask_of(n + 1, n_max));
        b.answer_starts.push(ex.answer_start);
        b.answer_ends.push(ex.answer_end);
        b.source_oovs.push(oovs);
        b.passage_ids.push(ex.passage_id.clone());
    }
    b
}

/// A (sentence, question) pairing for the semantic-matching classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SmPair {
    pub sentence: usize,
    pub question: usize,
    pub matching: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmPairs {
    pub pairs: Vec<SmPair>,
    /// Set when the batch was too small to draw a negative.
    pub positives_only: bool,
}

/// One positive and one in-batch negative per example.
///
/// With `prefer_same_passage`, negatives are drawn from examples sharing the
/// row's passage id when any exist; otherwise uniformly from the batch.
pub fn sample_sm_pairs(batch: &Batch, rng: &mut impl Rng, prefer_same_passage: bool) -> SmPairs {
    let n = batch.len();
    let mut pairs: Vec<SmPair> = (0..n)
        .map(|i| SmPair {
            sentence: i,
            question: i,
            matching: true,
        })
        .collect();
    if n < 2 {
        log::warn!("batch of {n} cannot provide semantic-matching negatives");
        return SmPairs {
            pairs,
            positives_only: true,
        };
    }
    for i in 0..n {
        let same: Vec<usize> = match (&batch.passage_ids[i], prefer_same_passage) {
            (Some(p), true) => (0..n)
                .filter(|&j| j != i && batch.passage_ids[j].as_ref() == Some(p))
                .collect(),
            _ => Vec::new(),
        };
        let j = if same.is_empty() {
            let k = rng.gen_range(0..n - 1);
            if k >= i {
                k + 1
            } else {
                k
            }
        } else {
            same[rng.gen_range(0..same.len())]
        };
        pairs.push(SmPair {
            sentence: i,
            question: j,
            matching: false,
        });
    }
    SmPairs {
        pairs,
        positives_only: false,
    }
}

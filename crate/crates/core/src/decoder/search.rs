//! Greedy and beam decoding over any next-token distribution.

use crate::autodiff::Tape;
use crate::corpus::{Batch, Vocab};
use crate::decoder::{self, DecoderState, SourceMemory};
use crate::model::{ModelError, QgModel, Result};

/// Supplies next-token distributions for a search.
pub trait StepScorer {
    type State: Clone;

    fn start(&mut self) -> Result<Self::State>;

    /// Feeds `token` and returns the distribution over the next id.
    fn step(&mut self, state: &Self::State, token: usize) -> Result<(Vec<f64>, Self::State)>;
}

fn emittable(id: usize) -> bool {
    id != Vocab::PAD && id != Vocab::SOS
}

/// Argmax decoding with ties going to the lowest id. The result excludes eos.
pub fn greedy_search<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    if max_len == 0 {
        return Ok(out);
    }
    let mut state = scorer.start()?;
    let mut token = Vocab::SOS;
    while out.len() < max_len {
        let (probs, next) = scorer.step(&state, token)?;
        let mut best: Option<usize> = None;
        for (id, &p) in probs.iter().enumerate() {
            if emittable(id) && best.is_none_or(|b| p > probs[b]) {
                best = Some(id);
            }
        }
        let best = best.ok_or_else(|| ModelError::Contract("empty distribution".into()))?;
        if best == Vocab::EOS {
            break;
        }
        out.push(best);
        state = next;
        token = best;
    }
    Ok(out)
}

/// A finished or truncated beam entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids, including a final eos when `finished`.
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability divided by length.
    pub fn normalized(&self) -> f64 {
        if self.ids.is_empty() {
            0.0
        } else {
            self.log_prob / self.ids.len() as f64
        }
    }

    /// Ids without the trailing eos.
    pub fn tokens(&self) -> &[usize] {
        match self.ids.last() {
            Some(&Vocab::EOS) if self.finished => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

struct Live<T> {
    hyp: Hypothesis,
    state: T,
}

/// Beam search keeping the `beam_size` best extensions by cumulative
/// log-probability. Hypotheses that emit eos leave the beam; the search ends
/// when none remain or at `max_len`, and the best length-normalised entry is
/// returned.
pub fn beam_search<S: StepScorer>(scorer: &mut S, beam_size: usize, max_len: usize) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(ModelError::Contract("beam size must be at least 1".into()));
    }
    let empty = Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    if max_len == 0 {
        return Ok(empty);
    }
    let mut live = vec![Live {
        hyp: empty,
        state: scorer.start()?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (k, entry) in live.iter().enumerate() {
            let token = entry.hyp.ids.last().copied().unwrap_or(Vocab::SOS);
            let (probs, next) = scorer.step(&entry.state, token)?;
            for (id, &p) in probs.iter().enumerate() {
                if emittable(id) {
                    candidates.push((entry.hyp.log_prob + p.ln(), k, id));
                }
            }
            next_states.push(next);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut survivors = Vec::with_capacity(beam_size);
        for &(score, k, id) in candidates.iter().take(beam_size) {
            let mut ids = live[k].hyp.ids.clone();
            ids.push(id);
            let done = id == Vocab::EOS;
            let hyp = Hypothesis {
                ids,
                log_prob: score,
                finished: done,
            };
            if done {
                finished.push(hyp);
            } else {
                survivors.push(Live {
                    hyp,
                    state: next_states[k].clone(),
                });
            }
        }
        live = survivors;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|l| l.hyp));
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.normalized() > b.normalized()) {
            best = Some(h);
        }
    }
    best.ok_or_else(|| ModelError::Contract("beam produced no hypotheses".into()))
}

/// Scores continuations of one batch row with a model.
pub struct ModelScorer<'a> {
    model: &'a QgModel,
    batch: &'a Batch,
    row: usize,
    tape: Tape,
    memory: Option<SourceMemory>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a QgModel, batch: &'a Batch, row: usize) -> Self {
        ModelScorer {
            model,
            batch,
            row,
            tape: Tape::new(),
            memory: None,
        }
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn start(&mut self) -> Result<DecoderState> {
        self.tape = Tape::new();
        let enc = self.model.encode_row(&mut self.tape, self.batch, self.row)?;
        self.memory = Some(self.model.memory(&mut self.tape, self.batch, self.row, &enc)?);
        Ok(DecoderState::initial(
            &mut self.tape,
            enc.fused,
            self.model.config.state_dim(),
        ))
    }

    fn step(&mut self, state: &DecoderState, token: usize) -> Result<(Vec<f64>, DecoderState)> {
        let memory = self
            .memory
            .as_ref()
            .ok_or_else(|| ModelError::Contract("scorer used before start".into()))?;
        let m = self.model;
        let token = if token >= m.config.target_vocab { Vocab::UNK } else { token };
        let emb = decoder::embed_token(&mut self.tape, &m.params, &m.decoder, token)?;
        let (out, next) = decoder::decode_step(&mut self.tape, &m.params, &m.decoder, state, emb, memory)?;
        Ok((self.tape.value(out.p_final).data().to_vec(), next))
    }
}

/// Greedy question for one batch row, in extended ids.
pub fn greedy_decode(model: &QgModel, batch: &Batch, row: usize, max_len: usize) -> Result<Vec<usize>> {
    greedy_search(&mut ModelScorer::new(model, batch, row), max_len)
}

/// Beam-search question for one batch row, in extended ids without eos.
pub fn beam_decode(
    model: &QgModel,
    batch: &Batch,
    row: usize,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let best = beam_search(&mut ModelScorer::new(model, batch, row), beam_size, max_len)?;
    Ok(best.tokens().to_vec())
}

/// Maps extended ids back to tokens, copying source words for OOV ids.
pub fn ids_to_tokens(batch: &Batch, row: usize, ids: &[usize], target: &Vocab) -> Vec<String> {
    ids.iter()
        .map(|&id| batch.ext_token(row, id, target).unwrap_or("<unk>").to_string())
        .collect()
}

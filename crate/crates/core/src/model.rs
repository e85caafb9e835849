//! The full question-generation network: parameter registry and the shared
//! teacher-forced forward pass used by every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer_position::ApHead;
use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{Batch, Vocabs};
use crate::decoder::{self, DecoderParams, DecoderState, SourceMemory};
use crate::encoder::{self, EncoderConfig, EncoderOutput, EncoderParams};
use crate::semantic_match::{self, SmHead};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Floor applied inside every log-likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dimensions of every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub pos_vocab: usize,
    pub ner_vocab: usize,
    pub case_vocab: usize,
}

impl ModelConfig {
    pub fn for_vocabs(encoder: EncoderConfig, vocabs: &Vocabs) -> Self {
        ModelConfig {
            encoder,
            source_vocab: vocabs.source.len(),
            target_vocab: vocabs.target.len(),
            pos_vocab: vocabs.pos.len(),
            ner_vocab: vocabs.ner.len(),
            case_vocab: vocabs.case.len(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.state_dim
    }
}

/// Which loss a parameter primarily serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Seq2Seq,
    SemanticMatch,
    AnswerPosition,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("sm.") {
            ParamGroup::SemanticMatch
        } else if name.starts_with("ap.") {
            ParamGroup::AnswerPosition
        } else {
            ParamGroup::Seq2Seq
        }
    }
}

/// Registers parameters with the standard initialisation: uniform(-0.1, 0.1)
/// for matrices, zeros for biases.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| self.rng.gen_range(-0.1..0.1))
            .collect();
        Ok(self.store.add(name, Tensor::new(vec![rows, cols], data)?)?)
    }

    pub fn bias(&mut self, name: &str, cols: usize) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::zeros(&[1, cols]))?)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        Ok(self.store.add(name, value)?)
    }
}

#[derive(Clone, Debug)]
pub struct QgModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub sm: SmHead,
    pub ap: ApHead,
}

impl QgModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config
            .encoder
            .validate()
            .map_err(ModelError::Contract)?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let encoder = EncoderParams::register(&mut init, &config)?;
        let decoder = DecoderParams::register(&mut init, &config)?;
        let sm = SmHead::register(&mut init, config.state_dim())?;
        let ap = ApHead::register(&mut init, config.state_dim())?;
        Ok(QgModel {
            config,
            params: store,
            encoder,
            decoder,
            sm,
            ap,
        })
    }

    /// Encodes one batch row.
    pub fn encode_row(&self, tape: &mut Tape, batch: &Batch, row: usize) -> Result<EncoderOutput> {
        encoder::encode_row(tape, &self.params, &self.encoder, batch, row)
    }

    pub fn memory(&self, tape: &mut Tape, batch: &Batch, row: usize, enc: &EncoderOutput) -> Result<SourceMemory> {
        SourceMemory::new(
            tape,
            &self.params,
            &self.decoder,
            enc.states,
            enc.mask.clone(),
            batch.source_ext_ids[row].clone(),
            batch.extended_size(row),
        )
    }

    /// Teacher-forced pass over every row, producing everything the three
    /// losses share.
    pub fn teacher_forced(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardPass> {
        let d = self.config.state_dim();
        let mut rows = Vec::with_capacity(batch.len());
        let mut tokens = 0;
        for row in 0..batch.len() {
            let encoded = self.encode_row(tape, batch, row)?;
            let memory = self.memory(tape, batch, row, &encoded)?;
            let mut state = DecoderState::initial(tape, encoded.fused, d);
            let n = batch.target_len(row);
            let mut hidden = Vec::with_capacity(n);
            let mut log_probs = Vec::with_capacity(n);
            let mut floored = 0;
            for t in 0..n {
                let emb = decoder::embed_token(
                    tape,
                    &self.params,
                    &self.decoder,
                    batch.target_inputs[row][t],
                )?;
                let (out, next) =
                    decoder::decode_step(tape, &self.params, &self.decoder, &state, emb, &memory)?;
                let gold = tape.pick(out.p_final, &[batch.target_outputs[row][t]])?;
                if tape.value(gold).item() < PROB_FLOOR {
                    floored += 1;
                }
                log_probs.push(tape.log_floor(gold, PROB_FLOOR));
                hidden.push(next.hidden);
                state = next;
            }
            tokens += n;
            let states = stack_padded(tape, &hidden, batch.target_mask[row].len(), d)?;
            let question = semantic_match::question_vector(tape, states, &batch.target_mask[row])?;
            rows.push(RowForward {
                encoded,
                memory,
                decoder_states: states,
                question_vector: question,
                log_probs,
                floored,
            });
        }
        Ok(ForwardPass { rows, tokens })
    }

    /// Final decoder hidden state after reading the gold question of
    /// `question_row` conditioned on the sentence of `sentence_row`.
    pub fn conditioned_question_vector(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        fwd: &ForwardPass,
        sentence_row: usize,
        question_row: usize,
    ) -> Result<Var> {
        if sentence_row == question_row {
            return Ok(fwd.rows[sentence_row].question_vector);
        }
        let r = &fwd.rows[sentence_row];
        let mut state = DecoderState::initial(tape, r.encoded.fused, self.config.state_dim());
        for t in 0..batch.target_len(question_row) {
            let emb = decoder::embed_token(
                tape,
                &self.params,
                &self.decoder,
                batch.target_inputs[question_row][t],
            )?;
            let (next, _) =
                decoder::advance(tape, &self.params, &self.decoder, &state, emb, &r.memory)?;
            state = next;
        }
        Ok(state.hidden)
    }
}

/// Stacks `1 × d` rows and pads with zero rows up to `len`.
pub(crate) fn stack_padded(tape: &mut Tape, rows: &[Var], len: usize, d: usize) -> Result<Var> {
    let mut parts = rows.to_vec();
    if rows.len() < len {
        parts.push(tape.constant(Tensor::zeros(&[len - rows.len(), d])));
    }
    Ok(tape.concat(&parts, 0)?)
}

/// Shared state of one row after the teacher-forced pass.
#[derive(Clone, Debug)]
pub struct RowForward {
    pub encoded: EncoderOutput,
    pub memory: SourceMemory,
    /// `N_max × D` decoder hidden states, zero on padding.
    pub decoder_states: Var,
    pub question_vector: Var,
    /// `log p_final(gold)` per real target position.
    pub log_probs: Vec<Var>,
    /// Positions whose gold probability fell under [`PROB_FLOOR`].
    pub floored: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub rows: Vec<RowForward>,
    /// Real target positions across the batch.
    pub tokens: usize,
}

impl ForwardPass {
    /// Mean negative log-likelihood over every real target position.
    pub fn sequence_nll(&self, tape: &mut Tape) -> Result<Var> {
        let terms: Vec<Var> = self.rows.iter().flat_map(|r| r.log_probs.iter().copied()).collect();
        if terms.is_empty() {
            return Err(ModelError::Contract("batch has no target tokens".into()));
        }
        let total = tape.add_all(&terms)?;
        Ok(tape.scale(total, -1.0 / self.tokens as f64))
    }

    pub fn floored(&self) -> usize {
        self.rows.iter().map(|r| r.floored).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SequenceNll {
    pub loss: Var,
    pub tokens: usize,
    pub floored: usize,
}

/// Teacher-forced negative log-likelihood of the gold questions.
pub fn sequence_nll(tape: &mut Tape, model: &QgModel, batch: &Batch) -> Result<SequenceNll> {
    let fwd = model.teacher_forced(tape, batch)?;
    let loss = fwd.sequence_nll(tape)?;
    Ok(SequenceNll {
        loss,
        tokens: fwd.tokens,
        floored: fwd.floored(),
    })
}

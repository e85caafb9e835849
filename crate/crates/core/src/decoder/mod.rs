//! Attention LSTM decoder with input feeding and pointer-generator copying.

pub mod search;

pub use search::{
    beam_decode, beam_search, greedy_decode, greedy_search, ids_to_tokens, Hypothesis, ModelScorer,
    StepScorer,
};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::{lstm_cell, LstmParams};
use crate::model::{Init, ModelConfig, ModelError, Result};

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Target-side word embeddings, separate from the source table.
    pub word_emb: ParamId,
    pub lstm: LstmParams,
    pub attn_w: ParamId,
    pub attn_u: ParamId,
    pub attn_v: ParamId,
    pub gen_w1: ParamId,
    pub gen_b1: ParamId,
    pub gen_w2: ParamId,
    pub gen_b2: ParamId,
    pub copy_w: ParamId,
    pub copy_u: ParamId,
    pub copy_b: ParamId,
    pub state_dim: usize,
    pub vocab: usize,
}

impl DecoderParams {
    pub(crate) fn register(init: &mut Init, config: &ModelConfig) -> Result<Self> {
        let d = config.state_dim();
        let dw = config.encoder.word_dim;
        let v = config.target_vocab;
        Ok(DecoderParams {
            word_emb: init.matrix("dec.word_emb", v, dw)?,
            lstm: LstmParams::register(init, "dec.lstm", dw + d, d)?,
            attn_w: init.matrix("dec.attn.w", d, d)?,
            attn_u: init.matrix("dec.attn.u", d, d)?,
            attn_v: init.matrix("dec.attn.v", d, 1)?,
            gen_w1: init.matrix("dec.gen.w1", 2 * d, d)?,
            gen_b1: init.bias("dec.gen.b1", d)?,
            gen_w2: init.matrix("dec.gen.w2", d, v)?,
            gen_b2: init.bias("dec.gen.b2", v)?,
            copy_w: init.matrix("dec.copy.w", d, 1)?,
            copy_u: init.matrix("dec.copy.u", d, 1)?,
            copy_b: init.bias("dec.copy.b", 1)?,
            state_dim: d,
            vocab: v,
        })
    }
}

/// Encoder states of one sentence together with the quantities every decoder
/// step reuses.
#[derive(Clone, Debug)]
pub struct SourceMemory {
    /// `M × D` encoder states.
    pub states: Var,
    /// `U·H`, precomputed once per sentence.
    pub keys: Var,
    pub mask: Vec<bool>,
    /// Extended target id of every source position.
    pub ext_ids: Vec<usize>,
    pub ext_size: usize,
}

impl SourceMemory {
    pub fn new(
        tape: &mut Tape,
        store: &ParamStore,
        p: &DecoderParams,
        states: Var,
        mask: Vec<bool>,
        ext_ids: Vec<usize>,
        ext_size: usize,
    ) -> Result<Self> {
        if mask.len() != ext_ids.len() || tape.shape(states)[0] != mask.len() {
            return Err(ModelError::Contract(format!(
                "source memory of shape {:?} with {} mask entries and {} ids",
                tape.shape(states),
                mask.len(),
                ext_ids.len()
            )));
        }
        let u = tape.param(store, p.attn_u);
        let keys = tape.matmul(states, u)?;
        Ok(SourceMemory {
            states,
            keys,
            mask,
            ext_ids,
            ext_size,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
    /// Context vector of the previous step, fed into the next input.
    pub context: Var,
}

impl DecoderState {
    /// Hidden state `z`, zero cell and zero context.
    pub fn initial(tape: &mut Tape, z: Var, d: usize) -> Self {
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        DecoderState {
            hidden: z,
            cell: zero,
            context: zero,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `1 × M` attention weights.
    pub alpha: Var,
    pub context: Var,
    /// `1 × |V|` generation distribution.
    pub p_generate: Var,
    /// `1 × 1` copy switch.
    pub g_copy: Var,
    /// `1 × (|V| + OOV)` final distribution over the extended vocabulary.
    pub p_final: Var,
}

/// `1 × d_w` embedding of a target-vocabulary id.
pub fn embed_token(tape: &mut Tape, store: &ParamStore, p: &DecoderParams, id: usize) -> Result<Var> {
    let table = tape.param(store, p.word_emb);
    Ok(tape.gather_rows(table, &[id])?)
}

/// Additive attention of `s` over the memory: `(alpha, context)`.
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DecoderParams,
    s: Var,
    memory: &SourceMemory,
) -> Result<(Var, Var)> {
    let w = tape.param(store, p.attn_w);
    let v = tape.param(store, p.attn_v);
    let query = tape.matmul(s, w)?;
    let joint = tape.add(memory.keys, query)?;
    let joint = tape.tanh(joint);
    let scores = tape.matmul(joint, v)?;
    let scores = tape.reshape(scores, &[1, memory.mask.len()])?;
    let alpha = tape.masked_softmax(scores, 1, Some(&memory.mask))?;
    let context = tape.matmul(alpha, memory.states)?;
    Ok((alpha, context))
}

/// LSTM step on `[w_t; c_{t-1}]` followed by attention. Returns the new state
/// and the attention weights.
pub fn advance(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DecoderParams,
    state: &DecoderState,
    embedding: Var,
    memory: &SourceMemory,
) -> Result<(DecoderState, Var)> {
    let input = tape.concat(&[embedding, state.context], 1)?;
    let (hidden, cell) = lstm_cell(tape, store, &p.lstm, input, state.hidden, state.cell)?;
    let (alpha, context) = attention(tape, store, p, hidden, memory)?;
    Ok((
        DecoderState {
            hidden,
            cell,
            context,
        },
        alpha,
    ))
}

/// Output distributions for a decoder state whose context is current.
pub fn output_distribution(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DecoderParams,
    state: &DecoderState,
    alpha: Var,
    memory: &SourceMemory,
) -> Result<StepOutput> {
    let (s, c) = (state.hidden, state.context);
    let sc = tape.concat(&[s, c], 1)?;
    let w1 = tape.param(store, p.gen_w1);
    let b1 = tape.param(store, p.gen_b1);
    let w2 = tape.param(store, p.gen_w2);
    let b2 = tape.param(store, p.gen_b2);
    let hidden = tape.affine(sc, w1, b1)?;
    let hidden = tape.tanh(hidden);
    let logits = tape.affine(hidden, w2, b2)?;
    let p_generate = tape.softmax(logits, 1)?;

    let cw = tape.param(store, p.copy_w);
    let cu = tape.param(store, p.copy_u);
    let cb = tape.param(store, p.copy_b);
    let from_s = tape.affine(s, cw, cb)?;
    let from_c = tape.matmul(c, cu)?;
    let g = tape.add(from_s, from_c)?;
    let g_copy = tape.sigmoid(g);

    let p_copy = tape.scatter_add(alpha, &memory.ext_ids, memory.ext_size)?;
    let extra = memory.ext_size.checked_sub(p.vocab).ok_or_else(|| {
        ModelError::Contract(format!(
            "extended size {} below vocabulary size {}",
            memory.ext_size, p.vocab
        ))
    })?;
    let p_gen_ext = if extra > 0 {
        let pad = tape.constant(Tensor::zeros(&[1, extra]));
        tape.concat(&[p_generate, pad], 1)?
    } else {
        p_generate
    };
    let copied = tape.mul(g_copy, p_copy)?;
    let keep = tape.one_minus(g_copy);
    let generated = tape.mul(keep, p_gen_ext)?;
    let p_final = tape.add(copied, generated)?;
    Ok(StepOutput {
        alpha,
        context: c,
        p_generate,
        g_copy,
        p_final,
    })
}

/// One full decoder step.
pub fn decode_step(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DecoderParams,
    state: &DecoderState,
    embedding: Var,
    memory: &SourceMemory,
) -> Result<(StepOutput, DecoderState)> {
    let (next, alpha) = advance(tape, store, p, state, embedding, memory)?;
    let out = output_distribution(tape, store, p, &next, alpha, memory)?;
    Ok((out, next))
}

#[cfg(test)]
mod tests;

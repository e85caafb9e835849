//! Feature-enriched embedding, bidirectional LSTM encoding and answer-aware
//! gated fusion of the decoder's initial state.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{Batch, BIO_TAGS};
use crate::model::{Init, ModelConfig, ModelError, Result};

/// Embedding and state sizes of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub word_dim: usize,
    pub pos_dim: usize,
    pub ner_dim: usize,
    pub case_dim: usize,
    pub answer_dim: usize,
    /// Size `D` of a full (both directions) encoder state.
    pub state_dim: usize,
}

impl Default for EncoderConfig {
    /// 300-d words, 16-d features, 512-d states.
    fn default() -> Self {
        EncoderConfig {
            word_dim: 300,
            pos_dim: 16,
            ner_dim: 16,
            case_dim: 16,
            answer_dim: 16,
            state_dim: 512,
        }
    }
}

impl EncoderConfig {
    /// A small configuration with every feature embedding `feature_dim` wide.
    pub fn small(word_dim: usize, feature_dim: usize, state_dim: usize) -> Self {
        EncoderConfig {
            word_dim,
            pos_dim: feature_dim,
            ner_dim: feature_dim,
            case_dim: feature_dim,
            answer_dim: feature_dim,
            state_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.word_dim + self.ner_dim + self.pos_dim + self.case_dim + self.answer_dim
    }

    /// Per-direction LSTM size.
    pub fn hidden(&self) -> usize {
        self.state_dim / 2
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.state_dim == 0 || self.state_dim % 2 != 0 {
            return Err(format!("state size must be even and positive, got {}", self.state_dim));
        }
        let dims = [self.word_dim, self.pos_dim, self.ner_dim, self.case_dim, self.answer_dim];
        if dims.contains(&0) {
            return Err("embedding sizes must be positive".into());
        }
        Ok(())
    }
}

/// One LSTM layer. Gate columns are ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub(crate) fn register(init: &mut Init, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let w_x = init.matrix(&format!("{prefix}.w_x"), input, 4 * hidden)?;
        let w_h = init.matrix(&format!("{prefix}.w_h"), hidden, 4 * hidden)?;
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = init.tensor(&format!("{prefix}.b"), bias)?;
        Ok(LstmParams { w_x, w_h, b, hidden })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub(crate) fn register(init: &mut Init, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstmParams {
            fwd: LstmParams::register(init, &format!("{prefix}.fwd"), input, hidden)?,
            bwd: LstmParams::register(init, &format!("{prefix}.bwd"), input, hidden)?,
        })
    }

    /// Width of the concatenated output.
    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }
}

/// Gate nonlinearities applied to the `1 × 4H` pre-activation.
fn lstm_gates(tape: &mut Tape, pre: Var, c_prev: Var, hidden: usize) -> Result<(Var, Var)> {
    let i = tape.slice(pre, 1, 0, hidden)?;
    let f = tape.slice(pre, 1, hidden, hidden)?;
    let g = tape.slice(pre, 1, 2 * hidden, hidden)?;
    let o = tape.slice(pre, 1, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// One LSTM step on a `1 × input` row.
pub fn lstm_cell(
    tape: &mut Tape,
    store: &ParamStore,
    p: &LstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let w_x = tape.param(store, p.w_x);
    let w_h = tape.param(store, p.w_h);
    let b = tape.param(store, p.b);
    let xw = tape.affine(x, w_x, b)?;
    let hw = tape.matmul(h_prev, w_h)?;
    let pre = tape.add(xw, hw)?;
    lstm_gates(tape, pre, c_prev, p.hidden)
}

/// Runs one direction over the real positions of `inputs` (`M × in`),
/// returning an `M × H` matrix with zero rows where `mask` is false.
fn run_direction(
    tape: &mut Tape,
    store: &ParamStore,
    p: &LstmParams,
    inputs: Var,
    mask: &[bool],
    reverse: bool,
) -> Result<Var> {
    let w_x = tape.param(store, p.w_x);
    let w_h = tape.param(store, p.w_h);
    let b = tape.param(store, p.b);
    // input projections for all positions at once
    let projected = tape.affine(inputs, w_x, b)?;
    let zero = tape.constant(Tensor::zeros(&[1, p.hidden]));
    let mut rows = vec![zero; mask.len()];
    let (mut h, mut c) = (zero, zero);
    let order: Vec<usize> = if reverse {
        (0..mask.len()).rev().collect()
    } else {
        (0..mask.len()).collect()
    };
    for i in order.into_iter().filter(|&i| mask[i]) {
        let xw = tape.slice(projected, 0, i, 1)?;
        let hw = tape.matmul(h, w_h)?;
        let pre = tape.add(xw, hw)?;
        (h, c) = lstm_gates(tape, pre, c, p.hidden)?;
        rows[i] = h;
    }
    Ok(tape.concat(&rows, 0)?)
}

/// Bidirectional encoding of `embedded` (`M × in`) into `M × 2H` states
/// `[→h_i, ←h_i]`. Masked positions are skipped and carry zero states.
pub fn bilstm_encode(
    tape: &mut Tape,
    store: &ParamStore,
    p: &BiLstmParams,
    embedded: Var,
    mask: &[bool],
) -> Result<Var> {
    if tape.shape(embedded).first() != Some(&mask.len()) {
        return Err(ModelError::Contract(format!(
            "mask of length {} for inputs of shape {:?}",
            mask.len(),
            tape.shape(embedded)
        )));
    }
    let fwd = run_direction(tape, store, &p.fwd, embedded, mask, false)?;
    let bwd = run_direction(tape, store, &p.bwd, embedded, mask, true)?;
    Ok(tape.concat(&[fwd, bwd], 1)?)
}

#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub w_m: ParamId,
    pub b_m: ParamId,
    pub w_a: ParamId,
    pub b_a: ParamId,
}

/// `z = g_m ∘ h_m + g_a ∘ h_a` with both gates sigmoid functions of
/// `[h_m, h_a]`.
pub fn gated_fusion(
    tape: &mut Tape,
    store: &ParamStore,
    p: &FusionParams,
    h_m: Var,
    h_a: Var,
) -> Result<Var> {
    let joint = tape.concat(&[h_m, h_a], 1)?;
    let w_m = tape.param(store, p.w_m);
    let b_m = tape.param(store, p.b_m);
    let w_a = tape.param(store, p.w_a);
    let b_a = tape.param(store, p.b_a);
    let g_m = tape.affine(joint, w_m, b_m)?;
    let g_m = tape.sigmoid(g_m);
    let g_a = tape.affine(joint, w_a, b_a)?;
    let g_a = tape.sigmoid(g_a);
    let from_sentence = tape.mul(g_m, h_m)?;
    let from_answer = tape.mul(g_a, h_a)?;
    Ok(tape.add(from_sentence, from_answer)?)
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub word_emb: ParamId,
    pub pos_emb: ParamId,
    pub ner_emb: ParamId,
    pub case_emb: ParamId,
    pub answer_emb: ParamId,
    pub lstm: BiLstmParams,
    pub fusion: FusionParams,
}

impl EncoderParams {
    pub(crate) fn register(init: &mut Init, config: &ModelConfig) -> Result<Self> {
        let e = &config.encoder;
        let d = e.state_dim;
        Ok(EncoderParams {
            word_emb: init.matrix("enc.word_emb", config.source_vocab, e.word_dim)?,
            pos_emb: init.matrix("enc.pos_emb", config.pos_vocab, e.pos_dim)?,
            ner_emb: init.matrix("enc.ner_emb", config.ner_vocab, e.ner_dim)?,
            case_emb: init.matrix("enc.case_emb", config.case_vocab, e.case_dim)?,
            answer_emb: init.matrix("enc.answer_emb", BIO_TAGS, e.answer_dim)?,
            lstm: BiLstmParams::register(init, "enc.lstm", e.input_dim(), e.hidden())?,
            fusion: FusionParams {
                w_m: init.matrix("enc.fusion.w_m", 2 * d, d)?,
                b_m: init.bias("enc.fusion.b_m", d)?,
                w_a: init.matrix("enc.fusion.w_a", 2 * d, d)?,
                b_a: init.bias("enc.fusion.b_a", d)?,
            },
        })
    }
}

/// `M_max × (d_w + d_n + d_p + d_c + d_ap)` embedding of one batch row, with
/// padding rows zeroed.
pub fn embed_row(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderParams,
    batch: &Batch,
    row: usize,
) -> Result<Var> {
    let tables = [
        (p.word_emb, &batch.source_ids[row]),
        (p.ner_emb, &batch.ner_ids[row]),
        (p.pos_emb, &batch.pos_ids[row]),
        (p.case_emb, &batch.case_ids[row]),
        (p.answer_emb, &batch.bio_ids[row]),
    ];
    let mut parts = Vec::with_capacity(tables.len());
    for (table, ids) in tables {
        let t = tape.param(store, table);
        parts.push(tape.gather_rows(t, ids)?);
    }
    let joined = tape.concat(&parts, 1)?;
    let mask: Vec<f64> = batch.source_mask[row]
        .iter()
        .map(|&m| if m { 1.0 } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::new(vec![mask.len(), 1], mask)?);
    Ok(tape.mul(joined, mask)?)
}

/// `B × M_max × input_dim` embedding of a whole batch.
pub fn embed(tape: &mut Tape, store: &ParamStore, p: &EncoderParams, batch: &Batch) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.len());
    for row in 0..batch.len() {
        let e = embed_row(tape, store, p, batch, row)?;
        let shape = tape.shape(e).to_vec();
        rows.push(tape.reshape(e, &[1, shape[0], shape[1]])?);
    }
    Ok(tape.concat(&rows, 0)?)
}

/// Encoder results for one sentence.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `M_max × D` hidden states `H`, zero on padding.
    pub states: Var,
    /// Hidden state at the answer start, `h_a`.
    pub answer: Var,
    /// Hidden state at the last real position, `h_m`.
    pub last: Var,
    /// Fused sentence vector `z`.
    pub fused: Var,
    pub mask: Vec<bool>,
}

pub fn encode_row(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderParams,
    batch: &Batch,
    row: usize,
) -> Result<EncoderOutput> {
    let mask = batch.source_mask[row].clone();
    let last_real = mask
        .iter()
        .rposition(|&m| m)
        .ok_or_else(|| ModelError::Contract(format!("row {row} has no real tokens")))?;
    let start = batch.answer_starts[row];
    if start >= mask.len() || !mask[start] {
        return Err(ModelError::Contract(format!(
            "answer start {start} is not a real position of row {row}"
        )));
    }
    let embedded = embed_row(tape, store, p, batch, row)?;
    let states = bilstm_encode(tape, store, &p.lstm, embedded, &mask)?;
    let last = tape.slice(states, 0, last_real, 1)?;
    let answer = tape.slice(states, 0, start, 1)?;
    let fused = gated_fusion(tape, store, &p.fusion, last, answer)?;
    Ok(EncoderOutput {
        states,
        answer,
        last,
        fused,
        mask,
    })
}

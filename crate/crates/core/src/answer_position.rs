//! Answer-position inference: attention flow between encoder and decoder
//! states, two modeling BiLSTMs and start/end distributions over the source.

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var, MASK_NEG};
use crate::corpus::Batch;
use crate::encoder::{bilstm_encode, BiLstmParams};
use crate::model::{ForwardPass, Init, ModelError, Result, PROB_FLOOR};

#[derive(Clone, Copy, Debug)]
pub struct ApHead {
    /// `3D × 1` similarity weights over `[h; s; h∘s]`.
    pub sim_w: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub model1: BiLstmParams,
    pub model2: BiLstmParams,
    pub w_p1: ParamId,
    pub w_p2: ParamId,
    pub state_dim: usize,
}

impl ApHead {
    pub(crate) fn register(init: &mut Init, d: usize) -> Result<Self> {
        Ok(ApHead {
            sim_w: init.matrix("ap.sim_w", 3 * d, 1)?,
            mlp_w1: init.matrix("ap.mlp.w1", 4 * d, d)?,
            mlp_b1: init.bias("ap.mlp.b1", d)?,
            mlp_w2: init.matrix("ap.mlp.w2", d, d)?,
            mlp_b2: init.bias("ap.mlp.b2", d)?,
            model1: BiLstmParams::register(init, "ap.model1", d, d / 2)?,
            model2: BiLstmParams::register(init, "ap.model2", d, d / 2)?,
            w_p1: init.matrix("ap.w_p1", 2 * d, 1)?,
            w_p2: init.matrix("ap.w_p2", 2 * d, 1)?,
            state_dim: d,
        })
    }
}

/// `M × N` similarities `wᵀ[h_i; s_j; h_i∘s_j]`.
pub fn similarity(tape: &mut Tape, store: &ParamStore, head: &ApHead, h: Var, s: Var) -> Result<Var> {
    let d = head.state_dim;
    let n = tape.shape(s)[0];
    let w = tape.param(store, head.sim_w);
    let w_h = tape.slice(w, 0, 0, d)?;
    let w_s = tape.slice(w, 0, d, d)?;
    let w_hs = tape.slice(w, 0, 2 * d, d)?;
    let from_h = tape.matmul(h, w_h)?;
    let from_s = tape.matmul(s, w_s)?;
    let from_s = tape.reshape(from_s, &[1, n])?;
    let w_hs = tape.reshape(w_hs, &[1, d])?;
    let hw = tape.mul(h, w_hs)?;
    let st = tape.transpose(s)?;
    let cross = tape.matmul(hw, st)?;
    let partial = tape.add(cross, from_h)?;
    Ok(tape.add(partial, from_s)?)
}

fn check_masks(tape: &Tape, sim: Var, h_mask: &[bool], s_mask: &[bool]) -> Result<()> {
    if tape.shape(sim) != [h_mask.len(), s_mask.len()] {
        return Err(ModelError::Contract(format!(
            "similarity of shape {:?} with masks of length {} and {}",
            tape.shape(sim),
            h_mask.len(),
            s_mask.len()
        )));
    }
    Ok(())
}

/// Sentence-to-question attention: row `i` is the attention-weighted mix of
/// question states for source position `i`.
pub fn s2q_attention(
    tape: &mut Tape,
    sim: Var,
    s: Var,
    h_mask: &[bool],
    s_mask: &[bool],
) -> Result<Var> {
    check_masks(tape, sim, h_mask, s_mask)?;
    let mask: Vec<bool> = h_mask.iter().flat_map(|_| s_mask.iter().copied()).collect();
    let a = tape.masked_softmax(sim, 1, Some(&mask))?;
    Ok(tape.matmul(a, s)?)
}

/// Question-to-sentence attention: one summary of the source, weighted by
/// each position's best question match, tiled to `M` rows.
pub fn q2s_attention(
    tape: &mut Tape,
    sim: Var,
    h: Var,
    h_mask: &[bool],
    s_mask: &[bool],
) -> Result<Var> {
    check_masks(tape, sim, h_mask, s_mask)?;
    let m = h_mask.len();
    let penalty: Vec<f64> = s_mask.iter().map(|&r| if r { 0.0 } else { MASK_NEG }).collect();
    let penalty = tape.constant(Tensor::row(&penalty));
    let masked = tape.add(sim, penalty)?;
    let best = tape.max_last_axis(masked)?;
    let best = tape.reshape(best, &[1, m])?;
    let b = tape.masked_softmax(best, 1, Some(h_mask))?;
    let summary = tape.matmul(b, h)?;
    let ones = tape.constant(Tensor::ones(&[m, 1]));
    Ok(tape.matmul(ones, summary)?)
}

/// Start and end distributions for one sentence, each `1 × M`.
#[derive(Clone, Copy, Debug)]
pub struct SpanDistributions {
    pub start: Var,
    pub end: Var,
}

/// Full head on encoder states `h` (`M × D`) and decoder states `s` (`N × D`).
pub fn span_distributions(
    tape: &mut Tape,
    store: &ParamStore,
    head: &ApHead,
    h: Var,
    s: Var,
    h_mask: &[bool],
    s_mask: &[bool],
) -> Result<SpanDistributions> {
    let m = h_mask.len();
    let sim = similarity(tape, store, head, h, s)?;
    let h_tilde = s2q_attention(tape, sim, s, h_mask, s_mask)?;
    let s_tilde = q2s_attention(tape, sim, h, h_mask, s_mask)?;
    let h_ht = tape.mul(h, h_tilde)?;
    let h_st = tape.mul(h, s_tilde)?;
    let joint = tape.concat(&[h, h_tilde, h_ht, h_st], 1)?;
    let w1 = tape.param(store, head.mlp_w1);
    let b1 = tape.param(store, head.mlp_b1);
    let w2 = tape.param(store, head.mlp_w2);
    let b2 = tape.param(store, head.mlp_b2);
    let g = tape.affine(joint, w1, b1)?;
    let g = tape.tanh(g);
    let g = tape.affine(g, w2, b2)?;
    let m1 = bilstm_encode(tape, store, &head.model1, g, h_mask)?;
    let m2 = bilstm_encode(tape, store, &head.model2, m1, h_mask)?;
    let mut out = [None, None];
    for (k, (states, w)) in [(m1, head.w_p1), (m2, head.w_p2)].into_iter().enumerate() {
        let feats = tape.concat(&[h_tilde, states], 1)?;
        let w = tape.param(store, w);
        let logits = tape.matmul(feats, w)?;
        let logits = tape.reshape(logits, &[1, m])?;
        out[k] = Some(tape.masked_softmax(logits, 1, Some(h_mask))?);
    }
    let [Some(start), Some(end)] = out else {
        unreachable!()
    };
    Ok(SpanDistributions { start, end })
}

/// Gold span of one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ApLoss {
    pub loss: Var,
    /// Rows whose predicted span equals the gold span exactly.
    pub exact: usize,
}

/// Mean over rows of `−log p¹(start) − log p²(end)`.
pub fn ap_loss(
    tape: &mut Tape,
    dists: &[SpanDistributions],
    gold: &[Span],
    masks: &[Vec<bool>],
) -> Result<ApLoss> {
    if dists.is_empty() || dists.len() != gold.len() || gold.len() != masks.len() {
        return Err(ModelError::Contract(format!(
            "{} distributions for {} spans and {} masks",
            dists.len(),
            gold.len(),
            masks.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * dists.len());
    let mut exact = 0;
    for ((dist, span), mask) in dists.iter().zip(gold).zip(masks) {
        for idx in [span.start, span.end] {
            if !mask.get(idx).copied().unwrap_or(false) {
                return Err(ModelError::Contract(format!(
                    "gold position {idx} is padding or out of range"
                )));
            }
        }
        let predicted = predict_span(tape.value(dist.start).data(), tape.value(dist.end).data());
        if predicted == *span {
            exact += 1;
        }
        for (p, idx) in [(dist.start, span.start), (dist.end, span.end)] {
            let pg = tape.pick(p, &[idx])?;
            terms.push(tape.log_floor(pg, PROB_FLOOR));
        }
    }
    let total = tape.add_all(&terms)?;
    Ok(ApLoss {
        loss: tape.scale(total, -1.0 / dists.len() as f64),
        exact,
    })
}

/// The span `(i, j)`, `i ≤ j`, maximising `p¹_i · p²_j`. Ties go to the
/// smallest start and then the smallest end.
pub fn predict_span(p1: &[f64], p2: &[f64]) -> Span {
    let mut best = Span { start: 0, end: 0 };
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..p1.len() {
        for j in i..p2.len() {
            let score = p1[i] * p2[j];
            if score > best_score {
                best_score = score;
                best = Span { start: i, end: j };
            }
        }
    }
    best
}

/// Runs the head on every row of a teacher-forced pass.
pub fn batch_distributions(
    tape: &mut Tape,
    store: &ParamStore,
    head: &ApHead,
    batch: &Batch,
    fwd: &ForwardPass,
) -> Result<Vec<SpanDistributions>> {
    fwd.rows
        .iter()
        .enumerate()
        .map(|(row, r)| {
            span_distributions(
                tape,
                store,
                head,
                r.encoded.states,
                r.decoder_states,
                &batch.source_mask[row],
                &batch.target_mask[row],
            )
        })
        .collect()
}

/// Answer-position loss of a whole batch.
pub fn batch_ap_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &ApHead,
    batch: &Batch,
    fwd: &ForwardPass,
) -> Result<ApLoss> {
    let dists = batch_distributions(tape, store, head, batch, fwd)?;
    let gold: Vec<Span> = batch
        .answer_starts
        .iter()
        .zip(&batch.answer_ends)
        .map(|(&start, &end)| Span { start, end })
        .collect();
    ap_loss(tape, &dists, &gold, &batch.source_mask)
}

//! Sentence-level semantic matching: a two-way classifier deciding whether a
//! sentence vector `z` and a question vector `s_n` belong together.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{Batch, SmPairs};
use crate::model::{ForwardPass, Init, ModelError, QgModel, Result, PROB_FLOOR};

#[derive(Clone, Copy, Debug)]
pub struct SmHead {
    /// `2D × 2`; column 1 scores "matching".
    pub w: ParamId,
    pub b: ParamId,
}

impl SmHead {
    pub(crate) fn register(init: &mut Init, d: usize) -> Result<Self> {
        Ok(SmHead {
            w: init.matrix("sm.w", 2 * d, 2)?,
            b: init.bias("sm.b", 2)?,
        })
    }
}

/// How the question vector of a negative pair `(sentence i, question j)` is
/// obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// Re-read question `j` with the decoder started from sentence `i`.
    #[default]
    Conditioned,
    /// Reuse the teacher-forced vector of example `j` as is.
    Reused,
}

impl std::str::FromStr for NegativeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "conditioned" => Ok(NegativeMode::Conditioned),
            "reused" => Ok(NegativeMode::Reused),
            other => Err(format!("unknown negative mode `{other}`")),
        }
    }
}

/// Hidden state at the last real row of `states` (`N × D`).
pub fn question_vector(tape: &mut Tape, states: Var, mask: &[bool]) -> Result<Var> {
    let last = mask
        .iter()
        .rposition(|&m| m)
        .ok_or_else(|| ModelError::Contract("question has no real positions".into()))?;
    Ok(tape.slice(states, 0, last, 1)?)
}

/// `softmax(W[z, s] + b)` as a `1 × 2` row.
pub fn sm_forward(tape: &mut Tape, store: &ParamStore, head: &SmHead, z: Var, s: Var) -> Result<Var> {
    let zs = tape.concat(&[z, s], 1)?;
    let w = tape.param(store, head.w);
    let b = tape.param(store, head.b);
    let logits = tape.affine(zs, w, b)?;
    Ok(tape.softmax(logits, 1)?)
}

/// One classifier input.
#[derive(Clone, Copy, Debug)]
pub struct SmInput {
    pub z: Var,
    pub s: Var,
    pub matching: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SmLoss {
    pub loss: Var,
    pub pairs: usize,
    /// Pairs whose more probable class is the gold one.
    pub correct: usize,
}

/// Mean cross entropy over `inputs`. An empty set gives a constant zero loss.
pub fn sm_loss(tape: &mut Tape, store: &ParamStore, head: &SmHead, inputs: &[SmInput]) -> Result<SmLoss> {
    if inputs.is_empty() {
        log::warn!("no semantic-matching pairs; loss is zero");
        return Ok(SmLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            pairs: 0,
            correct: 0,
        });
    }
    let mut terms = Vec::with_capacity(inputs.len());
    let mut correct = 0;
    for input in inputs {
        let p = sm_forward(tape, store, head, input.z, input.s)?;
        let gold = usize::from(input.matching);
        let v = tape.value(p).data();
        if (v[1] > v[0]) == input.matching {
            correct += 1;
        }
        let pg = tape.pick(p, &[gold])?;
        terms.push(tape.log_floor(pg, PROB_FLOOR));
    }
    let total = tape.add_all(&terms)?;
    Ok(SmLoss {
        loss: tape.scale(total, -1.0 / inputs.len() as f64),
        pairs: inputs.len(),
        correct,
    })
}

/// Builds classifier inputs for sampled pairs on top of a teacher-forced
/// pass.
pub fn resolve_pairs(
    tape: &mut Tape,
    model: &QgModel,
    batch: &Batch,
    fwd: &ForwardPass,
    pairs: &SmPairs,
    mode: NegativeMode,
) -> Result<Vec<SmInput>> {
    pairs
        .pairs
        .iter()
        .map(|p| {
            let s = match mode {
                NegativeMode::Reused => fwd.rows[p.question].question_vector,
                NegativeMode::Conditioned => {
                    model.conditioned_question_vector(tape, batch, fwd, p.sentence, p.question)?
                }
            };
            Ok(SmInput {
                z: fwd.rows[p.sentence].encoded.fused,
                s,
                matching: p.matching,
            })
        })
        .collect()
}

//! Joint training: the weighted multi-task loss, Adam, the epoch loop and
//! checkpoints.

mod checkpoint;
mod embeddings;
mod suite;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embeddings::load_embeddings;
pub use suite::{gradient_suite, synthetic_examples, LossCheck, SuiteConfig, SUITE_LOSSES};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer_position::batch_ap_loss;
use crate::autodiff::{ParamStore, Tape, Var};
use crate::corpus::{make_batch, sample_sm_pairs, Batch, CorpusError, Example, SmPairs, Vocabs};
use crate::decoder::{beam_decode, greedy_decode, ids_to_tokens};
use crate::metrics;
use crate::model::{ModelError, QgModel};
use crate::semantic_match::{resolve_pairs, sm_loss, NegativeMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("tensor `{name}` has shape {found:?} in the checkpoint but the model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` is missing from the checkpoint")]
    Missing(String),
    #[error("checkpoint holds tensor `{0}` the model does not have")]
    Unexpected(String),
    #[error("non-finite {component} loss ({value}) at step {step}")]
    NonFinite {
        step: usize,
        component: &'static str,
        value: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the semantic-matching loss.
    pub alpha: f64,
    /// Weight of the answer-position loss.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs without a dev improvement before the learning rate halves.
    pub patience: usize,
    /// Global gradient-norm limit; off when absent.
    pub clip_norm: Option<f64>,
    pub negative_mode: NegativeMode,
    /// Draw semantic-matching negatives from the same passage when possible.
    pub same_passage: bool,
    /// Decode length limit for dev scoring.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 2.0,
            lr: 0.001,
            batch_size: 32,
            epochs: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 1,
            patience: 1,
            clip_norm: None,
            negative_mode: NegativeMode::Conditioned,
            same_passage: true,
            max_len: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// Scalar values of one evaluation of the joint loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub s2s: f64,
    pub sm: f64,
    pub ap: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub s2s: Var,
    pub sm: Var,
    pub ap: Var,
    pub values: LossComponents,
    pub tokens: usize,
    pub floored: usize,
    pub sm_pairs: usize,
    pub sm_correct: usize,
    pub ap_exact: usize,
}

/// `L_s2s + α·L_sm + β·L_ap` over one shared forward pass.
pub fn total_loss(
    tape: &mut Tape,
    model: &QgModel,
    batch: &Batch,
    pairs: &SmPairs,
    alpha: f64,
    beta: f64,
    mode: NegativeMode,
) -> std::result::Result<TotalLoss, ModelError> {
    let fwd = model.teacher_forced(tape, batch)?;
    let s2s = fwd.sequence_nll(tape)?;
    let inputs = resolve_pairs(tape, model, batch, &fwd, pairs, mode)?;
    let sm = sm_loss(tape, &model.params, &model.sm, &inputs)?;
    let ap = batch_ap_loss(tape, &model.params, &model.ap, batch, &fwd)?;
    let weighted_sm = tape.scale(sm.loss, alpha);
    let weighted_ap = tape.scale(ap.loss, beta);
    let partial = tape.add(s2s, weighted_sm)?;
    let total = tape.add(partial, weighted_ap)?;
    let values = LossComponents {
        total: tape.value(total).item(),
        s2s: tape.value(s2s).item(),
        sm: tape.value(sm.loss).item(),
        ap: tape.value(ap.loss).item(),
    };
    Ok(TotalLoss {
        total,
        s2s,
        sm: sm.loss,
        ap: ap.loss,
        values,
        tokens: fwd.tokens,
        floored: fwd.floored(),
        sm_pairs: sm.pairs,
        sm_correct: sm.correct,
        ap_exact: ap.exact,
    })
}

fn check_finite(step: usize, v: &LossComponents) -> Result<()> {
    for (component, value) in [("seq2seq", v.s2s), ("semantic-matching", v.sm), ("answer-position", v.ap), ("total", v.total)] {
        if !value.is_finite() {
            return Err(TrainError::NonFinite { step, component, value });
        }
    }
    Ok(())
}

/// Adam with bias correction over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, c: &TrainConfig) -> Self {
        Adam::new(store, c.lr, c.adam_beta1, c.adam_beta2, c.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the gradients held in `store`. Parameters without a
    /// gradient count as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grad = p.grad.as_ref().map(|g| g.data());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        total: f64,
        s2s: f64,
        sm: f64,
        ap: f64,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        /// Mean of the step totals of the epoch.
        train_total: f64,
        dev_bleu4: Option<f64>,
        improved: bool,
        lr_halved: bool,
    },
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: Vec<LogRecord>,
    pub steps: usize,
    pub best_dev_bleu4: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_lr: f64,
}

/// Where and how `train` reports progress.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Best-dev (or, without a dev set, final) checkpoint destination.
    pub checkpoint: Option<PathBuf>,
    pub on_record: Option<Box<dyn FnMut(&LogRecord) + 'a>>,
}

/// Trains `model` in place. With a dev set the parameters of the best dev
/// epoch are restored at the end.
pub fn train(
    model: &mut QgModel,
    vocabs: &Vocabs,
    train_set: &[Example],
    dev_set: &[Example],
    config: &TrainConfig,
    mut hooks: TrainHooks,
) -> Result<TrainSummary> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::from_config(&model.params, config);
    let mut log = Vec::new();
    let mut emit = |r: LogRecord, log: &mut Vec<LogRecord>| {
        if let Some(f) = hooks.on_record.as_mut() {
            f(&r);
        }
        log.push(r);
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<Example> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let batch = make_batch(&examples, vocabs);
            let pairs = sample_sm_pairs(&batch, &mut rng, config.same_passage);
            let mut tape = Tape::new();
            let loss = total_loss(&mut tape, model, &batch, &pairs, config.alpha, config.beta, config.negative_mode)?;
            step += 1;
            check_finite(step, &loss.values)?;
            model.params.zero_grads();
            tape.backward(loss.total, &mut model.params).map_err(ModelError::from)?;
            if let Some(max) = config.clip_norm {
                clip_gradients(&mut model.params, max);
            }
            adam.step(&mut model.params);
            let v = loss.values;
            epoch_total += v.total;
            batches += 1;
            emit(
                LogRecord::Step {
                    epoch,
                    step,
                    lr: adam.lr,
                    total: v.total,
                    s2s: v.s2s,
                    sm: v.sm,
                    ap: v.ap,
                },
                &mut log,
            );
        }
        model.params.zero_grads();
        let mut improved = false;
        let mut lr_halved = false;
        let mut dev_bleu4 = None;
        if !dev_set.is_empty() {
            let hyps = generate(model, vocabs, dev_set, 1, config.max_len)?;
            let refs: Vec<Vec<String>> = dev_set.iter().map(|e| e.question_tokens.clone()).collect();
            let score = metrics::bleu(&hyps, &refs, 4).map_err(|e| TrainError::Config(e.to_string()))?;
            dev_bleu4 = Some(score);
            if best.as_ref().is_none_or(|b| score > b.0) {
                improved = true;
                stale = 0;
                best = Some((score, epoch, model.params.clone()));
                if let Some(path) = &hooks.checkpoint {
                    save_checkpoint(path, &model.params)?;
                }
            } else {
                stale += 1;
                if stale >= config.patience {
                    adam.lr /= 2.0;
                    lr_halved = true;
                    stale = 0;
                }
            }
        }
        emit(
            LogRecord::Epoch {
                epoch,
                lr: adam.lr,
                train_total: epoch_total / batches as f64,
                dev_bleu4,
                improved,
                lr_halved,
            },
            &mut log,
        );
    }
    let (best_dev_bleu4, best_epoch) = match best {
        Some((score, epoch, params)) => {
            model.params = params;
            (Some(score), Some(epoch))
        }
        None => {
            if let Some(path) = &hooks.checkpoint {
                save_checkpoint(path, &model.params)?;
            }
            (None, None)
        }
    };
    Ok(TrainSummary {
        log,
        steps: step,
        best_dev_bleu4,
        best_epoch,
        final_lr: adam.lr,
    })
}

/// Decodes a question for each example: greedy when `beam` is 1.
pub fn generate(
    model: &QgModel,
    vocabs: &Vocabs,
    examples: &[Example],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    examples
        .iter()
        .map(|ex| {
            let batch = make_batch(std::slice::from_ref(ex), vocabs);
            let ids = if beam <= 1 {
                greedy_decode(model, &batch, 0, max_len)?
            } else {
                beam_decode(model, &batch, 0, beam, max_len)?
            };
            Ok(ids_to_tokens(&batch, 0, &ids, &vocabs.target))
        })
        .collect()
}

/// Training-set diagnostics of the three tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Per-token sequence negative log-likelihood.
    pub s2s_nll: f64,
    pub sm_accuracy: f64,
    pub sm_pairs: usize,
    pub span_exact: f64,
}

/// Forward-only evaluation over `examples` in order, in batches of
/// `batch_size`, with semantic-matching negatives drawn from `seed`.
pub fn evaluate_tasks(
    model: &QgModel,
    vocabs: &Vocabs,
    examples: &[Example],
    config: &TrainConfig,
    seed: u64,
) -> Result<TaskMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut nll, mut tokens) = (0.0, 0);
    let (mut correct, mut pairs, mut exact) = (0, 0, 0);
    for chunk in examples.chunks(config.batch_size.max(1)) {
        let batch = make_batch(chunk, vocabs);
        let sm_pairs = sample_sm_pairs(&batch, &mut rng, config.same_passage);
        let mut tape = Tape::new();
        let loss = total_loss(&mut tape, model, &batch, &sm_pairs, 1.0, 1.0, config.negative_mode)?;
        nll += loss.values.s2s * loss.tokens as f64;
        tokens += loss.tokens;
        correct += loss.sm_correct;
        pairs += loss.sm_pairs;
        exact += loss.ap_exact;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(TaskMetrics {
        s2s_nll: if tokens == 0 { 0.0 } else { nll / tokens as f64 },
        sm_accuracy: ratio(correct, pairs),
        sm_pairs: pairs,
        span_exact: ratio(exact, examples.len()),
    })
}

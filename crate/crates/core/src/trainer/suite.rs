//! Finite-difference check of every loss on a small random fixture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_check, GradCheckReport, Tape};
use crate::corpus::{make_batch, sample_sm_pairs, Example, Vocab, Vocabs};
use crate::encoder::EncoderConfig;
use crate::model::{ModelConfig, ModelError, QgModel};
use crate::semantic_match::NegativeMode;

use super::total_loss;

/// Fixture dimensions for [`gradient_suite`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub state_dim: usize,
    pub sentence_len: usize,
    pub question_len: usize,
    /// Word-vocabulary size including the reserved ids.
    pub vocab: usize,
    pub batch: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Scales the sigmoid adjoint on every tape. Negative control only.
    pub corrupt_adjoint: Option<f64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            state_dim: 8,
            sentence_len: 5,
            question_len: 4,
            vocab: 20,
            batch: 2,
            seed: 1,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt_adjoint: None,
        }
    }
}

/// Result for one loss.
#[derive(Clone, Debug)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

pub const SUITE_LOSSES: [&str; 4] = ["sequence_nll", "sm_loss", "ap_loss", "total_loss"];

/// Random examples over `w0..`, a few of them outside `vocab_words` so copying
/// sees extended ids.
pub fn synthetic_examples(n: usize, sentence_len: usize, question_len: usize, vocab_words: usize, rng: &mut impl Rng) -> Vec<Example> {
    let word = |rng: &mut dyn rand::RngCore| format!("w{}", rng.gen_range(0..vocab_words + 4));
    (0..n)
        .map(|k| {
            let tokens: Vec<String> = (0..sentence_len).map(|_| word(rng)).collect();
            let start = rng.gen_range(0..sentence_len);
            let end = rng.gen_range(start..sentence_len.min(start + 2));
            let question: Vec<String> = (0..question_len)
                .map(|i| if i % 2 == 1 { tokens[rng.gen_range(0..sentence_len)].clone() } else { word(rng) })
                .collect();
            let tag = |opts: &[&str], rng: &mut dyn rand::RngCore| opts[rng.gen_range(0..opts.len())].to_string();
            Example {
                pos_tags: (0..sentence_len).map(|_| tag(&["NN", "VB", "DT"], rng)).collect(),
                ner_tags: (0..sentence_len).map(|_| tag(&["O", "PER"], rng)).collect(),
                case_tags: (0..sentence_len).map(|_| tag(&["L", "U"], rng)).collect(),
                sentence_tokens: tokens,
                answer_start: start,
                answer_end: end,
                question_tokens: question,
                passage_id: Some(format!("p{}", k / 2)),
            }
        })
        .collect()
}

/// Word vocabularies of exactly `size` entries.
fn fixture_vocabs(size: usize) -> Vocabs {
    let words = Vocab::from_tokens((0..size.saturating_sub(Vocab::empty().len())).map(|i| format!("w{i}")));
    Vocabs {
        source: words.clone(),
        target: words,
        pos: Vocab::from_tokens(["NN", "VB", "DT"]),
        ner: Vocab::from_tokens(["O", "PER"]),
        case: Vocab::from_tokens(["L", "U"]),
    }
}

/// Checks analytic gradients of the sequence, matching, answer-position and
/// joint losses against central differences over every parameter.
pub fn gradient_suite(config: &SuiteConfig) -> Result<Vec<LossCheck>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocabs = fixture_vocabs(config.vocab);
    let words = vocabs.source.len() - Vocab::empty().len();
    let examples = synthetic_examples(config.batch, config.sentence_len, config.question_len, words, &mut rng);
    let batch = make_batch(&examples, &vocabs);
    let pairs = sample_sm_pairs(&batch, &mut rng, true);
    let d = config.state_dim;
    let model_config = ModelConfig::for_vocabs(EncoderConfig::small(d, 2, d), &vocabs);
    let model = QgModel::new(model_config, config.seed)?;

    let mut out = Vec::new();
    for (k, name) in SUITE_LOSSES.iter().enumerate() {
        let mut store = model.params.clone();
        let mut local = model.clone();
        let report = finite_diff_check(
            &mut store,
            |tape: &mut Tape, params| {
                if let Some(scale) = config.corrupt_adjoint {
                    tape.corrupt_sigmoid_adjoint(scale);
                }
                local.params.clone_from(params);
                let l = total_loss(tape, &local, &batch, &pairs, 1.0, 2.0, NegativeMode::Conditioned)?;
                Ok::<_, ModelError>([l.s2s, l.sm, l.ap, l.total][k])
            },
            config.step,
            config.tolerance,
        )?;
        out.push(LossCheck { loss: name, report });
    }
    Ok(out)
}

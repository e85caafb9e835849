//! Small deterministic fixtures shared by unit tests.

use crate::corpus::{Example, Vocabs};
use crate::encoder::EncoderConfig;
use crate::model::{ModelConfig, QgModel};

const SUBJECTS: [&str; 6] = ["cat", "dog", "fox", "owl", "eel", "bee"];
const PLACES: [&str; 5] = ["mat", "barn", "den", "tree", "pond"];
const VERBS: [&str; 3] = ["sat", "slept", "hid"];

/// `n` distinct examples "the S V on the P ." with the answer span on `S`
/// and the question "what V on the P ?".
pub fn toy_examples(n: usize) -> Vec<Example> {
    (0..n)
        .map(|k| {
            let s = SUBJECTS[k % SUBJECTS.len()];
            let v = VERBS[k % VERBS.len()];
            let p = PLACES[k % PLACES.len()];
            let mut tokens = vec!["the", s, v, "on", "the", p];
            if k % 2 == 1 {
                tokens.insert(5, "old");
            }
            tokens.push(".");
            let m = tokens.len();
            let pos: Vec<&str> = tokens
                .iter()
                .map(|t| match *t {
                    "the" => "DT",
                    "on" => "IN",
                    "." => ".",
                    "old" => "JJ",
                    t if VERBS.contains(&t) => "VBD",
                    _ => "NN",
                })
                .collect();
            let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
            Example {
                sentence_tokens: own(&tokens),
                pos_tags: own(&pos),
                ner_tags: vec!["O".to_string(); m],
                case_tags: vec!["L".to_string(); m],
                answer_start: 1,
                answer_end: 1,
                question_tokens: own(&["what", v, "on", "the", p, "?"]),
                passage_id: Some(format!("p{}", k / 2)),
            }
        })
        .collect()
}

/// A model with 6-dimensional words, 2-dimensional features and state size
/// `d`.
pub fn toy_model(vocabs: &Vocabs, d: usize, seed: u64) -> QgModel {
    let config = ModelConfig::for_vocabs(EncoderConfig::small(6, 2, d), vocabs);
    QgModel::new(config, seed).expect("valid toy config")
}

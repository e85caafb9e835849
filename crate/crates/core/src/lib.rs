//! Multi-task neural question generation.
//!
//! An answer-aware sequence-to-sequence model with a pointer-generator
//! decoder, trained jointly with a sentence/question semantic-matching
//! classifier and an answer-span inference head. Everything runs on the small
//! reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod corpus;
pub mod model;
pub mod encoder;
pub mod decoder;
pub mod semantic_match;
pub mod answer_position;
pub mod trainer;
pub mod metrics;

#[cfg(test)]
mod test_support;

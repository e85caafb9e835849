use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_diff_check_where;
use crate::corpus::{build_vocabs, make_batch, Batch, Example, Vocab, Vocabs};
use crate::model::{sequence_nll, QgModel};
use crate::test_support::{toy_examples, toy_model};

const D: usize = 4;

fn setup(exs: &[Example], seed: u64) -> (Vocabs, Batch, QgModel) {
    let vocabs = build_vocabs(exs, 60, 60, 1);
    let batch = make_batch(exs, &vocabs);
    let model = toy_model(&vocabs, D, seed);
    (vocabs, batch, model)
}

fn memory_of(tape: &mut Tape, model: &QgModel, rows: Vec<Vec<f64>>, ext_ids: Vec<usize>, ext_size: usize) -> SourceMemory {
    let m = rows.len();
    let h = tape.constant(Tensor::from_rows(&rows).unwrap());
    SourceMemory::new(tape, &model.params, &model.decoder, h, vec![true; m], ext_ids, ext_size).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn single_position_attention() {
    let (_, _, model) = setup(&toy_examples(1), 0);
    let mut tape = Tape::new();
    let h = vec![0.3, -0.2, 0.9, 0.1];
    let mem = memory_of(&mut tape, &model, vec![h.clone()], vec![4], model.config.target_vocab);
    let s = tape.constant(Tensor::row(&[0.5, 0.5, -1.0, 0.0]));
    let (alpha, ctx) = attention(&mut tape, &model.params, &model.decoder, s, &mem).unwrap();
    assert_eq!(tape.value(alpha).data(), &[1.0]);
    assert!(close(tape.value(ctx).data(), &h, 1e-15));
}

#[test]
fn zero_scoring_vector_gives_uniform_attention() {
    let (_, _, mut model) = setup(&toy_examples(1), 1);
    model.params.value_mut(model.decoder.attn_v).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::from_rows(&[vec![1.0; D], vec![2.0; D], vec![4.0; D]]).unwrap());
    let mem = SourceMemory::new(
        &mut tape,
        &model.params,
        &model.decoder,
        h,
        vec![true, true, false],
        vec![4, 5, 0],
        model.config.target_vocab,
    )
    .unwrap();
    let s = tape.constant(Tensor::row(&[0.1, 0.2, 0.3, 0.4]));
    let (alpha, ctx) = attention(&mut tape, &model.params, &model.decoder, s, &mem).unwrap();
    assert_eq!(tape.value(alpha).data(), &[0.5, 0.5, 0.0]);
    assert!(close(tape.value(ctx).data(), &[1.5; D], 1e-15));
}

#[test]
fn fully_masked_source_is_rejected() {
    let (_, _, model) = setup(&toy_examples(1), 1);
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::zeros(&[2, D]));
    let mem = SourceMemory::new(&mut tape, &model.params, &model.decoder, h, vec![false; 2], vec![0; 2], 10)
        .unwrap();
    let s = tape.constant(Tensor::zeros(&[1, D]));
    assert!(matches!(
        attention(&mut tape, &model.params, &model.decoder, s, &mem),
        Err(ModelError::Autodiff(crate::autodiff::AutodiffError::DegenerateMask { .. }))
    ));
}

#[test]
fn attention_gradients() {
    let (_, _, mut model) = setup(&toy_examples(1), 2);
    let dec = model.decoder.clone();
    let report = finite_diff_check_where(
        &mut model.params,
        |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let h = tape.constant(
                Tensor::from_rows(&[
                    vec![0.3, -0.2, 0.9, 0.1],
                    vec![-0.5, 0.4, 0.2, 0.7],
                    vec![0.1, 0.1, -0.6, 0.3],
                ])
                .unwrap(),
            );
            let mem = SourceMemory::new(tape, s, &dec, h, vec![true; 3], vec![4, 5, 6], 20)?;
            let q = tape.constant(Tensor::row(&[0.5, 0.5, -1.0, 0.2]));
            let (_, ctx) = attention(tape, s, &dec, q, &mem)?;
            let w = tape.constant(Tensor::row(&[1.0, -2.0, 0.5, 3.0]));
            let y = tape.mul(ctx, w)?;
            Ok(tape.sum(y))
        },
        1e-5,
        1e-4,
        |name| name.starts_with("dec.attn"),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.params.len(), 3);
}

/// Runs `output_distribution` with a fixed alpha over the given source ids.
fn mixture(model: &QgModel, alpha: &[f64], ext_ids: Vec<usize>, ext_size: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mut tape = Tape::new();
    let rows: Vec<Vec<f64>> = (0..alpha.len()).map(|i| vec![0.1 * i as f64; D]).collect();
    let mem = memory_of(&mut tape, model, rows, ext_ids, ext_size);
    let state = DecoderState {
        hidden: tape.constant(Tensor::row(&[0.2, -0.1, 0.4, 0.3])),
        cell: tape.constant(Tensor::zeros(&[1, D])),
        context: tape.constant(Tensor::row(&[0.05, 0.1, -0.2, 0.0])),
    };
    let a = tape.constant(Tensor::row(alpha));
    let out = output_distribution(&mut tape, &model.params, &model.decoder, &state, a, &mem).unwrap();
    (
        tape.value(out.p_final).data().to_vec(),
        tape.value(out.p_generate).data().to_vec(),
        tape.value(out.g_copy).item(),
    )
}

#[test]
fn copy_switch_saturated_open() {
    let (_, _, mut model) = setup(&toy_examples(1), 3);
    model.params.value_mut(model.decoder.copy_b).data_mut()[0] = 80.0;
    let v = model.config.target_vocab;
    let (p, _, _) = mixture(&model, &[0.2, 0.5, 0.3], vec![5, v, 7], v + 1);
    for (id, &x) in p.iter().enumerate() {
        if ![5, v, 7].contains(&id) {
            assert!(x < 1e-30, "id {id} has mass {x}");
        }
    }
    assert!(close(&[p[5], p[v], p[7]], &[0.2, 0.5, 0.3], 1e-15));
}

#[test]
fn copy_switch_saturated_closed() {
    let (_, _, mut model) = setup(&toy_examples(1), 4);
    model.params.value_mut(model.decoder.copy_b).data_mut()[0] = -80.0;
    let v = model.config.target_vocab;
    let (p, gen, _) = mixture(&model, &[0.6, 0.4], vec![v, v + 1], v + 2);
    assert!(close(&p[..v], &gen, 1e-30));
    assert!(p[v] < 1e-30 && p[v + 1] < 1e-30);
}

#[test]
fn duplicate_source_tokens_sum_their_attention() {
    // source "a b a"
    let (_, _, model) = setup(&toy_examples(1), 5);
    let v = model.config.target_vocab;
    let (p, gen, g) = mixture(&model, &[0.2, 0.5, 0.3], vec![v, v + 1, v], v + 2);
    assert!((p[v] - g * 0.5).abs() < 1e-15);
    assert!((p[v + 1] - g * 0.5).abs() < 1e-15);
    let (p, gen2, g2) = mixture(&model, &[0.2, 0.5, 0.3], vec![6, 7, 6], v);
    assert_eq!(gen, gen2);
    assert!((p[6] - (g2 * 0.5 + (1.0 - g2) * gen[6])).abs() < 1e-15);
}

#[test]
fn certain_gold_gives_zero_loss() {
    let mut ex = toy_examples(1).remove(0);
    ex.question_tokens.clear();
    let (_, batch, mut model) = setup(&[ex], 6);
    model.params.value_mut(model.decoder.copy_b).data_mut()[0] = -80.0;
    model.params.value_mut(model.decoder.gen_b2).data_mut()[Vocab::EOS] = 200.0;
    let mut tape = Tape::new();
    let nll = sequence_nll(&mut tape, &model, &batch).unwrap();
    assert_eq!(nll.tokens, 1);
    assert!(tape.value(nll.loss).item().abs() < 1e-12);
}

#[test]
fn uniform_distribution_over_four_ids() {
    let mut ex = toy_examples(1).remove(0);
    ex.question_tokens.clear();
    let (vocabs, batch, mut model) = setup(&[ex], 7);
    assert_eq!(vocabs.target.len(), 4);
    model.params.value_mut(model.decoder.copy_b).data_mut()[0] = -80.0;
    model.params.value_mut(model.decoder.gen_w2).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let nll = sequence_nll(&mut tape, &model, &batch).unwrap();
    assert!((tape.value(nll.loss).item() - 4f64.ln()).abs() < 1e-12);
    assert!((4f64.ln() - 1.3863).abs() < 1e-4);
}

#[test]
fn unreachable_gold_is_floored_and_counted() {
    let mut ex = toy_examples(1).remove(0);
    ex.question_tokens = vec!["nowhere".into()];
    // an empty target vocabulary forces an unk gold id
    let vocabs = build_vocabs(std::slice::from_ref(&ex), 60, 0, 1);
    let batch = make_batch(&[ex], &vocabs);
    assert_eq!(batch.target_outputs[0][0], Vocab::UNK);
    let mut model = toy_model(&vocabs, D, 8);
    let mut tape = Tape::new();
    assert_eq!(sequence_nll(&mut tape, &model, &batch).unwrap().floored, 0);
    model.params.value_mut(model.decoder.copy_b).data_mut()[0] = -80.0;
    model.params.value_mut(model.decoder.gen_b2).data_mut()[Vocab::UNK] = -200.0;
    let mut tape = Tape::new();
    let nll = sequence_nll(&mut tape, &model, &batch).unwrap();
    assert_eq!(nll.floored, 1);
    assert!(tape.value(nll.loss).item().is_finite());
}

#[test]
fn sequence_nll_decoder_gradients() {
    let (_, batch, mut model) = setup(&toy_examples(2), 9);
    let m = model.clone();
    let report = finite_diff_check_where(
        &mut model.params,
        |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let mut local = m.clone();
            local.params = s.clone();
            Ok(sequence_nll(tape, &local, &batch)?.loss)
        },
        1e-5,
        1e-4,
        |name| name.starts_with("dec."),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.offenders());
}

#[test]
fn loss_is_invariant_to_batch_order() {
    let exs = toy_examples(3);
    let (vocabs, batch, model) = setup(&exs, 10);
    let shuffled = make_batch(&[exs[2].clone(), exs[0].clone(), exs[1].clone()], &vocabs);
    let mut tape = Tape::new();
    let a = sequence_nll(&mut tape, &model, &batch).unwrap().loss;
    let b = sequence_nll(&mut tape, &model, &shuffled).unwrap().loss;
    assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
}

#[test]
fn greedy_decoding_contract() {
    let (vocabs, batch, model) = setup(&toy_examples(2), 11);
    assert!(greedy_decode(&model, &batch, 0, 0).unwrap().is_empty());
    let a = greedy_decode(&model, &batch, 0, 12).unwrap();
    let b = greedy_decode(&model, &batch, 0, 12).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 12);
    assert!(a.iter().all(|&id| id != Vocab::PAD && id != Vocab::SOS && id != Vocab::EOS));
    let toks = ids_to_tokens(&batch, 0, &a, &vocabs.target);
    assert_eq!(toks.len(), a.len());
    assert_eq!(beam_decode(&model, &batch, 0, 1, 12).unwrap(), a);
}

#[test]
fn extended_ids_map_back_to_source_words() {
    let ex = toy_examples(1).remove(0);
    let vocabs = build_vocabs(&[ex.clone()], 60, 4, 1);
    let batch = make_batch(&[ex.clone()], &vocabs);
    let ext = batch.source_ext_ids[0][1];
    assert!(ext >= vocabs.target.len());
    assert_eq!(ids_to_tokens(&batch, 0, &[ext], &vocabs.target), vec![ex.sentence_tokens[1].clone()]);
}

/// Scores sequences from a fixed function of the prefix.
struct TableScorer<F: Fn(&[usize]) -> Vec<f64>> {
    table: F,
    calls: Vec<usize>,
}

impl<F: Fn(&[usize]) -> Vec<f64>> StepScorer for TableScorer<F> {
    type State = Vec<usize>;

    fn start(&mut self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&mut self, prefix: &Vec<usize>, token: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        self.calls.push(token);
        let mut next = prefix.clone();
        if token != Vocab::SOS {
            next.push(token);
        }
        Ok(((self.table)(&next), next))
    }
}

const A: usize = 4;
const B: usize = 5;

fn hand_table(prefix: &[usize]) -> Vec<f64> {
    // ids: pad, unk, sos, eos, a, b
    match prefix {
        [] => vec![0.0, 0.0, 0.0, 0.1, 0.5, 0.4],
        [A] => vec![0.0, 0.0, 0.0, 0.4, 0.3, 0.3],
        [B] => vec![0.0, 0.0, 0.0, 0.95, 0.05, 0.0],
        _ => vec![0.0, 0.0, 0.0, 0.9, 0.05, 0.05],
    }
}

/// Best length-normalised score over every sequence of at most `max_len`
/// emitted ids, ending at eos or truncated at `max_len`.
fn enumerate_best(table: &dyn Fn(&[usize]) -> Vec<f64>, max_len: usize) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(Vec::<usize>::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let probs = table(&prefix);
        for (id, &p) in probs.iter().enumerate() {
            if id == Vocab::PAD || id == Vocab::SOS {
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(id);
            let score = lp + p.ln();
            if id == Vocab::EOS || seq.len() == max_len {
                let norm = score / seq.len() as f64;
                if norm > best.1 {
                    best = (seq, norm);
                }
            } else {
                stack.push((seq, score));
            }
        }
    }
    best
}

#[test]
fn beam_beats_greedy_on_hand_set_toy() {
    let mut s = TableScorer { table: hand_table, calls: Vec::new() };
    assert_eq!(greedy_search(&mut s, 3).unwrap(), vec![A]);
    let best = beam_search(&mut s, 2, 3).unwrap();
    assert_eq!(best.ids, vec![B, Vocab::EOS]);
    assert_eq!(best.tokens(), &[B]);
    let (oracle, score) = enumerate_best(&hand_table, 3);
    assert_eq!(oracle, best.ids);
    assert!((best.normalized() - score).abs() < 1e-12);
    assert!((score - (0.4f64.ln() + 0.95f64.ln()) / 2.0).abs() < 1e-12);
}

#[test]
fn wide_beam_expands_every_first_token() {
    let mut s = TableScorer { table: hand_table, calls: Vec::new() };
    beam_search(&mut s, 6, 2).unwrap();
    // second step is fed every non-eos first token the table can emit
    let mut second: Vec<usize> = s.calls[1..].to_vec();
    second.sort();
    assert_eq!(second, vec![Vocab::UNK, A, B]);
}

#[test]
fn beam_rejects_zero_width() {
    let mut s = TableScorer { table: hand_table, calls: Vec::new() };
    assert!(beam_search(&mut s, 0, 3).is_err());
    assert!(beam_search(&mut s, 3, 0).unwrap().ids.is_empty());
}

fn random_table(seed: u64) -> impl Fn(&[usize]) -> Vec<f64> {
    move |prefix: &[usize]| {
        let mut h = DefaultHasher::new();
        (seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let mut p: Vec<f64> = (0..6)
            .map(|id| if id == Vocab::PAD || id == Vocab::SOS { 0.0 } else { rng.gen_range(0.01..1.0) })
            .collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        p
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_exhaustive_beam_matches_enumeration(seed in any::<u64>()) {
        let table = random_table(seed);
        let (oracle, score) = enumerate_best(&table, 3);
        let mut s = TableScorer { table: &table, calls: Vec::new() };
        let best = beam_search(&mut s, 64, 3).unwrap();
        prop_assert!((best.normalized() - score).abs() < 1e-12);
        prop_assert_eq!(best.ids, oracle);
        let mut s = TableScorer { table: &table, calls: Vec::new() };
        let greedy = greedy_search(&mut s, 3).unwrap();
        let mut s = TableScorer { table: &table, calls: Vec::new() };
        let one = beam_search(&mut s, 1, 3).unwrap();
        prop_assert_eq!(one.tokens(), &greedy[..]);
    }

    #[test]
    fn prop_final_distribution_normalised(seed in 0u64..500, bias in -6.0f64..6.0, raw in prop::collection::vec(0.01f64..1.0, 1..6)) {
        let (_, _, mut model) = setup(&toy_examples(1), seed);
        model.params.value_mut(model.decoder.copy_b).data_mut()[0] = bias;
        let v = model.config.target_vocab;
        let z: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let ids: Vec<usize> = (0..alpha.len()).map(|i| v + i % 2).collect();
        let (p, _, g) = mixture(&model, &alpha, ids.clone(), v + 2);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for e in [v, v + 1] {
            let mass: f64 = alpha.iter().zip(&ids).filter(|(_, &i)| i == e).map(|(a, _)| a).sum();
            prop_assert!((p[e] - g * mass).abs() < 1e-15);
        }
    }
}

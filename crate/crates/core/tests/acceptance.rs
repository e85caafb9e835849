//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and the test fails if any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qgen::answer_position::{batch_distributions, predict_span, Span};
use qgen::autodiff::{Tape, Var};
use qgen::corpus::{build_vocabs, make_batch, sample_sm_pairs, Example, Vocab, Vocabs};
use qgen::decoder::{decode_step, embed_token, DecoderState};
use qgen::encoder::EncoderConfig;
use qgen::metrics::{bleu, copy_precision_recall, modified_precision, rouge_l, rouge_l_pair, tokenize};
use qgen::model::{ModelConfig, QgModel};
use qgen::semantic_match::{resolve_pairs, sm_forward, NegativeMode};
use qgen::trainer::{
    evaluate_tasks, generate, gradient_suite, load_checkpoint, save_checkpoint, synthetic_examples, total_loss, train,
    SuiteConfig, TrainConfig, TrainHooks,
};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn values(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

// ---------------------------------------------------------------- fixtures

const SUBJECTS: [&str; 8] = ["cat", "dog", "fox", "owl", "eel", "bee", "rat", "ant"];
const PLACES: [&str; 8] = ["mat", "barn", "den", "tree", "pond", "hill", "cave", "nest"];
const VERBS: [(&str, &str); 4] = [("sat", "sit"), ("slept", "sleep"), ("hid", "hide"), ("ran", "run")];
const ADJECTIVES: [&str; 4] = ["old", "big", "red", "wet"];

/// 32 distinct examples in 16 two-sentence passages. Even examples ask for
/// the subject ("who ..."), odd ones for the place ("where did ...").
fn toy_corpus() -> Vec<Example> {
    let own = |v: &[&str]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    (0..32)
        .map(|k| {
            let subject = SUBJECTS[k % 8];
            let place = PLACES[(k / 8 + 3 * k) % 8];
            let (past, base) = VERBS[(k / 2) % 4];
            let mut tokens = vec!["the", subject, past, "on", "the"];
            if k % 3 == 0 {
                tokens.push(ADJECTIVES[k % 4]);
            }
            tokens.extend([place, "."]);
            let m = tokens.len();
            let (answer, question) = if k % 2 == 0 {
                (1, vec!["who", past, "on", "the", place, "?"])
            } else {
                (m - 2, vec!["where", "did", "the", subject, base, "?"])
            };
            Example {
                pos_tags: tokens.iter().map(|t| if *t == "the" { "DT" } else { "NN" }.to_string()).collect(),
                ner_tags: vec!["O".into(); m],
                case_tags: vec!["L".into(); m],
                sentence_tokens: own(&tokens),
                answer_start: answer,
                answer_end: answer,
                question_tokens: own(&question),
                passage_id: Some(format!("p{}", k / 2)),
            }
        })
        .collect()
}

fn toy_model(vocabs: &Vocabs, seed: u64) -> QgModel {
    QgModel::new(ModelConfig::for_vocabs(EncoderConfig::small(16, 4, 16), vocabs), seed).unwrap()
}

fn toy_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 0.005,
        batch_size: 2,
        epochs,
        seed: 1,
        max_len: 12,
        ..Default::default()
    }
}

/// Random batch of 2-3 examples of uneven lengths with a capped vocabulary,
/// so that padding and out-of-vocabulary copies both occur.
fn random_fixture(seed: u64) -> (Vec<Example>, Vocabs, QgModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(2..=3);
    let mut examples = Vec::new();
    for _ in 0..b {
        let m = rng.gen_range(2..=7);
        let n = rng.gen_range(1..=5);
        examples.extend(synthetic_examples(1, m, n, 10, &mut rng));
    }
    let vocabs = build_vocabs(&examples, 8, 8, 1);
    let d = [4, 6][rng.gen_range(0..2)];
    let model = QgModel::new(ModelConfig::for_vocabs(EncoderConfig::small(5, 2, d), &vocabs), seed).unwrap();
    (examples, vocabs, model)
}

// ---------------------------------------------------------------- criteria

fn gradient_suite_check() -> Check {
    let start = Instant::now();
    let checks = gradient_suite(&SuiteConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    for c in &checks {
        ensure(c.report.passed(), || {
            format!("{}: max relative error {:.3e} in {:?}", c.loss, c.report.max_rel_error, c.report.offenders())
        })?;
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("4 losses, max relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

fn check_simplex(name: &str, p: &[f64], mask: Option<&[bool]>) -> Result<(), String> {
    let sum: f64 = p.iter().sum();
    ensure((sum - 1.0).abs() <= 1e-6, || format!("{name} sums to {sum}"))?;
    ensure(p.iter().all(|&x| x >= 0.0), || format!("{name} has a negative entry"))?;
    if let Some(mask) = mask {
        for (i, (&x, &real)) in p.iter().zip(mask).enumerate() {
            ensure(real || x == 0.0, || format!("{name}[{i}] = {x} on a masked position"))?;
        }
    }
    Ok(())
}

fn normalization_check() -> Check {
    let mut counted = 0usize;
    for seed in 0..100 {
        let (examples, vocabs, model) = random_fixture(seed);
        let batch = make_batch(&examples, &vocabs);
        let d = model.config.state_dim();
        let mut tape = Tape::new();
        let ctx = |what: &str| format!("fixture {seed}: {what}");
        for row in 0..batch.len() {
            let enc = model.encode_row(&mut tape, &batch, row).map_err(|e| e.to_string())?;
            let memory = model.memory(&mut tape, &batch, row, &enc).map_err(|e| e.to_string())?;
            let mut state = DecoderState::initial(&mut tape, enc.fused, d);
            for t in 0..batch.target_len(row) {
                let emb = embed_token(&mut tape, &model.params, &model.decoder, batch.target_inputs[row][t])
                    .map_err(|e| e.to_string())?;
                let (out, next) = decode_step(&mut tape, &model.params, &model.decoder, &state, emb, &memory)
                    .map_err(|e| e.to_string())?;
                check_simplex(&ctx("alpha"), &values(&tape, out.alpha), Some(&memory.mask))?;
                check_simplex(&ctx("p_generate"), &values(&tape, out.p_generate), None)?;
                check_simplex(&ctx("p_final"), &values(&tape, out.p_final), None)?;
                state = next;
                counted += 3;
            }
        }
        let fwd = model.teacher_forced(&mut tape, &batch).map_err(|e| e.to_string())?;
        let pairs = sample_sm_pairs(&batch, &mut ChaCha8Rng::seed_from_u64(seed), true);
        let inputs = resolve_pairs(&mut tape, &model, &batch, &fwd, &pairs, NegativeMode::Conditioned)
            .map_err(|e| e.to_string())?;
        for input in inputs {
            let p = sm_forward(&mut tape, &model.params, &model.sm, input.z, input.s).map_err(|e| e.to_string())?;
            check_simplex(&ctx("p_sm"), &values(&tape, p), None)?;
            counted += 1;
        }
        let dists = batch_distributions(&mut tape, &model.params, &model.ap, &batch, &fwd).map_err(|e| e.to_string())?;
        for (row, dist) in dists.iter().enumerate() {
            let mask = &batch.source_mask[row];
            check_simplex(&ctx("p1"), &values(&tape, dist.start), Some(mask))?;
            check_simplex(&ctx("p2"), &values(&tape, dist.end), Some(mask))?;
            counted += 2;
        }
    }
    Ok(format!("{counted} distributions over 100 fixtures"))
}

fn copy_mixture_check() -> Check {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..10u64 {
        // "zork" twice and "quux" once, neither in the target vocabulary
        let tokens = ["the", "zork", "met", "zork", "and", "quux"];
        let example = Example {
            sentence_tokens: tokens.iter().map(|t| t.to_string()).collect(),
            pos_tags: vec!["NN".into(); 6],
            ner_tags: vec!["O".into(); 6],
            case_tags: vec!["L".into(); 6],
            answer_start: (seed % 6) as usize,
            answer_end: (seed % 6) as usize,
            question_tokens: vec!["who".into(), "met".into(), "zork".into(), "?".into()],
            passage_id: None,
        };
        let vocabs = Vocabs {
            source: Vocab::from_tokens(tokens),
            target: Vocab::from_tokens(["the", "who", "met", "and", "?"]),
            pos: Vocab::from_tokens(["NN"]),
            ner: Vocab::from_tokens(["O"]),
            case: Vocab::from_tokens(["L"]),
        };
        let batch = make_batch(std::slice::from_ref(&example), &vocabs);
        let model = QgModel::new(ModelConfig::for_vocabs(EncoderConfig::small(5, 2, 6), &vocabs), seed).unwrap();
        let mut tape = Tape::new();
        let enc = model.encode_row(&mut tape, &batch, 0).map_err(|e| e.to_string())?;
        let memory = model.memory(&mut tape, &batch, 0, &enc).map_err(|e| e.to_string())?;
        let ext_ids = memory.ext_ids.clone();
        ensure(memory.ext_size == vocabs.target.len() + 2, || format!("extended size {}", memory.ext_size))?;
        let mut state = DecoderState::initial(&mut tape, enc.fused, 6);
        for t in 0..batch.target_len(0) {
            let emb = embed_token(&mut tape, &model.params, &model.decoder, batch.target_inputs[0][t])
                .map_err(|e| e.to_string())?;
            let (out, next) = decode_step(&mut tape, &model.params, &model.decoder, &state, emb, &memory)
                .map_err(|e| e.to_string())?;
            let alpha = values(&tape, out.alpha);
            let g = tape.value(out.g_copy).item();
            let p_final = values(&tape, out.p_final);
            for ext in vocabs.target.len()..memory.ext_size {
                let matching: f64 = alpha.iter().zip(&ext_ids).filter(|(_, &id)| id == ext).map(|(a, _)| a).sum();
                let err = (p_final[ext] - g * matching).abs();
                worst = worst.max(err);
                ensure(err <= 1e-12, || format!("seed {seed} step {t} id {ext}: error {err:e}"))?;
                cases += 1;
            }
            state = next;
        }
    }
    Ok(format!("{cases} extended-id masses, max error {worst:.1e}"))
}

fn loss_composition_check() -> Check {
    let c = TrainConfig::default();
    ensure((c.alpha, c.beta) == (1.0, 2.0), || format!("defaults alpha {} beta {}", c.alpha, c.beta))?;
    let examples = toy_corpus();
    let vocabs = build_vocabs(&examples, 1000, 1000, 1);
    let model = toy_model(&vocabs, 3);
    for chunk in examples.chunks(4) {
        let batch = make_batch(chunk, &vocabs);
        let pairs = sample_sm_pairs(&batch, &mut ChaCha8Rng::seed_from_u64(0), true);
        let mut tape = Tape::new();
        let l = total_loss(&mut tape, &model, &batch, &pairs, c.alpha, c.beta, c.negative_mode).map_err(|e| e.to_string())?;
        let v = l.values;
        let composed = v.s2s + c.alpha * v.sm + c.beta * v.ap;
        ensure(v.total == composed, || format!("total {} but components give {composed}", v.total))?;
    }
    Ok("total == s2s + 1*sm + 2*ap bit-exactly on 8 batches".into())
}

fn overfit_check() -> Check {
    let start = Instant::now();
    let examples = toy_corpus();
    let vocabs = build_vocabs(&examples, 1000, 1000, 1);
    let mut model = toy_model(&vocabs, 1);
    let config = toy_config(300);
    train(&mut model, &vocabs, &examples, &[], &config, TrainHooks::default()).map_err(|e| e.to_string())?;
    let m = evaluate_tasks(&model, &vocabs, &examples, &config, 0).map_err(|e| e.to_string())?;
    let hyps = generate(&model, &vocabs, &examples, 1, config.max_len).map_err(|e| e.to_string())?;
    let exact = hyps.iter().zip(&examples).filter(|(h, e)| **h == e.question_tokens).count();
    let elapsed = start.elapsed();
    let summary = format!(
        "nll {:.4}, sm {:.1}% of {}, span EM {:.1}%, greedy {exact}/32, {:.1}s",
        m.s2s_nll,
        100.0 * m.sm_accuracy,
        m.sm_pairs,
        100.0 * m.span_exact,
        elapsed.as_secs_f64()
    );
    let ok = m.s2s_nll < 0.1 && m.sm_accuracy >= 0.95 && m.span_exact == 1.0 && exact >= 30 && elapsed < Duration::from_secs(600);
    ensure(ok, || summary.clone())?;
    Ok(summary)
}

fn span_oracle_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dist = |rng: &mut ChaCha8Rng, m: usize| {
        let raw: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    for case in 0..1000 {
        let m = rng.gen_range(1..=12);
        let (p1, p2) = (dist(&mut rng, m), dist(&mut rng, m));
        let mut best = (f64::NEG_INFINITY, Span { start: 0, end: 0 });
        for i in 0..m {
            for j in i..m {
                let score = p1[i] * p2[j];
                if score > best.0 {
                    best = (score, Span { start: i, end: j });
                }
            }
        }
        let got = predict_span(&p1, &p2);
        ensure(got == best.1, || format!("case {case}: {got:?} vs exhaustive {:?}", best.1))?;
    }
    Ok("1000 random distributions agree".into())
}

fn metric_oracle_check() -> Check {
    let toks = |lines: &[&str]| lines.iter().map(|l| tokenize(l)).collect::<Vec<_>>();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let e = |x: qgen::metrics::MetricsError| x.to_string();

    let same = toks(&["what did the cat see ?", "who ?"]);
    ensure(bleu(&same, &same, 4).map_err(e)? == 1.0, || "identical BLEU-4 is not 1".into())?;
    let (m, t) = modified_precision(&toks(&["the the the"]), &toks(&["the cat"]), 1).map_err(e)?;
    ensure((m, t) == (1, 3), || format!("clipped unigram counts {m}/{t}"))?;
    ensure(bleu(&toks(&[""]), &toks(&["a b"]), 4).map_err(e)? == 0.0, || "empty hypothesis BLEU".into())?;
    let b1 = bleu(&toks(&["the cat sat on mat"]), &toks(&["the cat is on the mat"]), 1).map_err(e)?;
    ensure(close(b1, 0.8 * (-0.2f64).exp()), || format!("BLEU-1 {b1}"))?;

    let r = rouge_l_pair(&tokenize("a b c"), &tokenize("a c"));
    ensure(r.lcs == 2 && close(r.recall, 1.0) && close(r.precision, 2.0 / 3.0), || format!("{r:?}"))?;
    let f = 2.2 * (2.0 / 3.0) / (1.0 + 1.2 * 2.0 / 3.0);
    ensure(close(r.f, f), || format!("ROUGE-L F {} vs {f}", r.f))?;
    ensure(rouge_l(&toks(&["x y"]), &toks(&["a b"])).map_err(e)? == 0.0, || "disjoint ROUGE-L".into())?;

    let vocab = Vocab::from_tokens(["what", "is", "the", "?"]);
    let c = copy_precision_recall(&toks(&["what is zork the qux ?"]), &toks(&["zork a b c ?"]), &vocab).map_err(e)?;
    ensure(c.precision == Some(0.5) && c.recall == Some(0.25), || format!("{c:?}"))?;
    let c = copy_precision_recall(&toks(&["zork zork fee", "fie"]), &toks(&["zork fee", "fie foe"]), &vocab).map_err(e)?;
    ensure(c.precision == Some(3.0 / 4.0) && c.recall == Some(3.0 / 4.0), || format!("{c:?}"))?;
    let c = copy_precision_recall(&toks(&["what is ?"]), &toks(&["the ?"]), &vocab).map_err(e)?;
    ensure(c.precision.is_none() && c.recall.is_none(), || format!("{c:?}"))?;
    Ok("BLEU, ROUGE-L and copy precision/recall match hand values".into())
}

fn ablation_check() -> Check {
    let examples = toy_corpus();
    let vocabs = build_vocabs(&examples, 1000, 1000, 1);
    let run = |alpha: f64, beta: f64| -> Result<qgen::trainer::TaskMetrics, String> {
        let mut model = toy_model(&vocabs, 1);
        let config = TrainConfig { alpha, beta, ..toy_config(40) };
        train(&mut model, &vocabs, &examples, &[], &config, TrainHooks::default()).map_err(|e| e.to_string())?;
        evaluate_tasks(&model, &vocabs, &examples, &config, 0).map_err(|e| e.to_string())
    };
    let with_ap = run(1.0, 2.0)?;
    let without_ap = run(1.0, 0.0)?;
    let without_sm = run(0.0, 2.0)?;
    let summary = format!(
        "span EM {:.1}% (beta 2) vs {:.1}% (beta 0); sm {:.1}% (alpha 1) vs {:.1}% (alpha 0)",
        100.0 * with_ap.span_exact,
        100.0 * without_ap.span_exact,
        100.0 * with_ap.sm_accuracy,
        100.0 * without_sm.sm_accuracy
    );
    ensure(
        with_ap.span_exact >= without_ap.span_exact && with_ap.sm_accuracy >= without_sm.sm_accuracy,
        || summary.clone(),
    )?;
    Ok(summary)
}

fn determinism_check() -> Check {
    let examples: Vec<Example> = toy_corpus().into_iter().take(8).collect();
    let vocabs = build_vocabs(&examples, 1000, 1000, 1);
    let run = || {
        let mut model = toy_model(&vocabs, 9);
        let summary = train(&mut model, &vocabs, &examples, &examples[..2], &toy_config(3), TrainHooks::default()).unwrap();
        (summary.log, model)
    };
    let (log_a, model_a) = run();
    let (log_b, _) = run();
    ensure(log_a == log_b, || "loss logs differ between identical runs".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model_a.params).map_err(|e| e.to_string())?;
    let mut fresh = toy_model(&vocabs, 77);
    load_checkpoint(&path, &mut fresh.params).map_err(|e| e.to_string())?;
    for ((_, a), (_, b)) in model_a.params.iter().zip(fresh.params.iter()) {
        let bits = |t: &qgen::autodiff::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(a.name == b.name && bits(&a.value) == bits(&b.value), || format!("{} differs after reload", a.name))?;
    }
    Ok(format!("{} identical log records; {} tensors round-trip bit-exactly", log_a.len(), model_a.params.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient suite", gradient_suite_check),
        ("normalization", normalization_check),
        ("copy mixture", copy_mixture_check),
        ("loss composition", loss_composition_check),
        ("overfit oracle", overfit_check),
        ("span oracle", span_oracle_check),
        ("metric oracles", metric_oracle_check),
        ("ablation monotonicity", ablation_check),
        ("determinism", determinism_check),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let line = match &result {
            Ok(detail) => format!("criterion {} {name}: PASS ({detail})", k + 1),
            Err(detail) => format!("criterion {} {name}: FAIL ({detail})", k + 1),
        };
        writeln!(std::io::stderr(), "{line}").unwrap();
        if result.is_err() {
            failed.push(line);
        }
    }
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use qgen::corpus::{build_vocabs, load_examples, load_examples_with, LoadMode, Vocab, Vocabs};
use qgen::metrics::{tokenize, EvalReport};
use qgen::model::{ModelConfig, QgModel};
use qgen::trainer::{self, gradient_suite, load_checkpoint, load_embeddings, LogRecord, SuiteConfig, TrainHooks};

mod config;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "qgen", version, about = "Answer-aware question generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, vocabularies and logs to --out
    Train(Overrides),
    /// Generate one question per input record
    Generate(GenerateArgs),
    /// Score hypotheses against references, one tokenized question per line
    Evaluate(EvaluateArgs),
    /// Check analytic gradients of every loss on a small random fixture
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    run: Overrides,
    /// Records in the training format; the question field may be absent
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Target vocabulary, enables copy precision and recall
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, hide = true)]
    corrupt_adjoint: bool,
}

/// Exit 2 for bad invocations, 1 for failures while running.
enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(o) => cmd_train(&o),
        Command::Generate(a) => cmd_generate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn existing(path: &Option<PathBuf>, what: &str) -> Result<Option<PathBuf>, Failure> {
    match path {
        Some(p) if !p.is_file() => Err(usage(format!("{what} file {} does not exist", p.display()))),
        other => Ok(other.clone()),
    }
}

fn resolve(o: &Overrides) -> Result<RunConfig, Failure> {
    let c = RunConfig::resolve(o).map_err(usage)?;
    c.validate().map_err(usage)?;
    info!("effective config:\n{}", c.to_toml());
    Ok(c)
}

fn cmd_train(o: &Overrides) -> Outcome {
    let c = resolve(o)?;
    let train_path = existing(&c.train, "training")?.ok_or_else(|| usage("--train is required"))?;
    let dev_path = existing(&c.dev, "dev")?;
    let embeddings = existing(&c.embeddings, "embeddings")?;
    let out = c.out.clone().ok_or_else(|| usage("--out is required"))?;
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    write_file(&out.join("config.toml"), c.to_toml().as_bytes())?;

    let train_set = load_examples(&train_path).map_err(runtime)?;
    let dev_set = match &dev_path {
        Some(p) => load_examples(p).map_err(runtime)?,
        None => Vec::new(),
    };
    info!("{} training and {} dev examples", train_set.len(), dev_set.len());
    let vocabs = build_vocabs(&train_set, c.max_source_vocab, c.max_target_vocab, c.min_count);
    vocabs.save(&out).map_err(runtime)?;
    let model_config = ModelConfig::for_vocabs(c.encoder_config(), &vocabs);
    write_file(
        &out.join("model.json"),
        serde_json::to_string_pretty(&model_config).expect("model config serializes").as_bytes(),
    )?;
    let mut model = QgModel::new(model_config, c.seed).map_err(runtime)?;
    if let Some(path) = embeddings {
        for (table, vocab) in [("enc.word_emb", &vocabs.source), ("dec.word_emb", &vocabs.target)] {
            let id = model.params.id(table).expect("embedding table registered");
            let n = load_embeddings(&path, vocab, &mut model.params, id).map_err(runtime)?;
            info!("{table}: {n} pretrained rows");
        }
    }

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?);
    let mut write_error = None;
    let hooks = TrainHooks {
        checkpoint: Some(out.join("model.ckpt")),
        on_record: Some(Box::new(|r: &LogRecord| {
            if let LogRecord::Epoch { epoch, lr, train_total, dev_bleu4, .. } = r {
                info!("epoch {epoch}: loss {train_total:.4} lr {lr:e} dev BLEU-4 {dev_bleu4:?}");
            }
            let line = serde_json::to_string(r).expect("log records serialize");
            if let Err(e) = writeln!(metrics, "{line}") {
                write_error.get_or_insert(e);
            }
        })),
    };
    let summary = trainer::train(&mut model, &vocabs, &train_set, &dev_set, &c.train_config(), hooks).map_err(runtime)?;
    if let Some(e) = write_error {
        return Err(runtime(format!("{}: {e}", metrics_path.display())));
    }
    metrics.flush().map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?;
    println!(
        "{}",
        serde_json::json!({
            "steps": summary.steps,
            "best_epoch": summary.best_epoch,
            "best_dev_bleu4": summary.best_dev_bleu4,
            "final_lr": summary.final_lr,
        })
    );
    Ok(())
}

/// Loads a trained model from a checkpoint file or from the directory that
/// holds it together with `model.json` and the vocabularies.
fn load_model(checkpoint: &Path, seed: u64) -> Result<(QgModel, Vocabs), Failure> {
    let (dir, ckpt) = if checkpoint.is_dir() {
        (checkpoint.to_path_buf(), checkpoint.join("model.ckpt"))
    } else {
        let dir = checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (dir, checkpoint.to_path_buf())
    };
    let config_path = dir.join("model.json");
    let text = fs::read_to_string(&config_path).map_err(|e| runtime(format!("{}: {e}", config_path.display())))?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", config_path.display())))?;
    let vocabs = Vocabs::load(&dir).map_err(runtime)?;
    let mut model = QgModel::new(config, seed).map_err(runtime)?;
    load_checkpoint(&ckpt, &mut model.params).map_err(runtime)?;
    Ok((model, vocabs))
}

fn cmd_generate(a: &GenerateArgs) -> Outcome {
    let c = resolve(&a.run)?;
    let checkpoint = c.checkpoint.clone().ok_or_else(|| usage("--checkpoint is required"))?;
    if !checkpoint.exists() {
        return Err(usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    existing(&Some(a.input.clone()), "input")?;
    let (model, vocabs) = load_model(&checkpoint, c.seed)?;
    let examples = load_examples_with(&a.input, LoadMode::Inference).map_err(runtime)?;
    let questions = trainer::generate(&model, &vocabs, &examples, c.beam, c.max_len).map_err(runtime)?;
    let mut text = String::new();
    for q in &questions {
        text.push_str(&q.join(" "));
        text.push('\n');
    }
    match &c.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => io::stdout().write_all(text.as_bytes()).map_err(runtime),
    }
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(tokenize).collect())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Outcome {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    if hyps.len() != refs.len() {
        return Err(usage(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    let vocab = match &a.vocab {
        Some(p) => Some(Vocab::load(p).map_err(usage)?),
        None => None,
    };
    let report = EvalReport::compute(&hyps, &refs, vocab.as_ref()).map_err(runtime)?;
    println!("{}", serde_json::to_string_pretty(&report.percent()).expect("report serializes"));
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Outcome {
    let config = SuiteConfig {
        state_dim: a.hidden,
        seed: a.seed,
        corrupt_adjoint: a.corrupt_adjoint.then_some(1.5),
        ..Default::default()
    };
    if config.state_dim == 0 || config.state_dim % 2 != 0 {
        return Err(usage("--hidden must be even and positive"));
    }
    let checks = gradient_suite(&config).map_err(runtime)?;
    let mut offenders = Vec::new();
    for c in &checks {
        let r = &c.report;
        println!(
            "{:<14} max relative error {:.3e} over {} coordinates: {}",
            c.loss,
            r.max_rel_error,
            r.coordinates,
            if r.passed() { "ok" } else { "FAIL" }
        );
        for p in r.offenders() {
            offenders.push(format!(
                "{}: {} [{}] analytic {:.6e} numeric {:.6e}",
                c.loss, p.name, p.worst_index, p.analytic, p.numeric
            ));
        }
    }
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("gradient check failed (tolerance {:e}):\n  {}", config.tolerance, offenders.join("\n  "))))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

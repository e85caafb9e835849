//! Run settings: a flat TOML file whose keys mirror the flag names, with
//! flags taking precedence.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use qgen::encoder::EncoderConfig;
use qgen::semantic_match::NegativeMode;
use qgen::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub negative_mode: NegativeMode,
    pub same_passage: bool,
    pub beam: usize,
    pub max_len: usize,
    /// Encoder and decoder state size.
    pub hidden: usize,
    pub word_dim: usize,
    pub pos_dim: usize,
    pub ner_dim: usize,
    pub case_dim: usize,
    pub answer_dim: usize,
    pub max_source_vocab: usize,
    pub max_target_vocab: usize,
    pub min_count: usize,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let e = EncoderConfig::default();
        RunConfig {
            seed: t.seed,
            alpha: t.alpha,
            beta: t.beta,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            patience: t.patience,
            clip_norm: t.clip_norm,
            negative_mode: t.negative_mode,
            same_passage: t.same_passage,
            beam: 1,
            max_len: t.max_len,
            hidden: e.state_dim,
            word_dim: e.word_dim,
            pos_dim: e.pos_dim,
            ner_dim: e.ner_dim,
            case_dim: e.case_dim,
            answer_dim: e.answer_dim,
            max_source_vocab: 20_000,
            max_target_vocab: 20_000,
            min_count: 1,
            train: None,
            dev: None,
            checkpoint: None,
            out: None,
            embeddings: None,
        }
    }
}

/// Flags shared by `train` and `generate`.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Flat TOML file of settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Semantic-matching loss weight
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Answer-position loss weight
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// State size of encoder and decoder
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Beam width; 1 decodes greedily
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pretrained word vectors, one "token v1 .. vd" per line
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// File values (or defaults) overlaid with the given flags.
    pub fn resolve(o: &Overrides) -> Result<Self, String> {
        let mut c = match &o.config {
            Some(p) => Self::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &o.$f {
                    c.$f = v.clone().into();
                }
            )*};
        }
        set!(seed, alpha, beta, lr, batch_size, epochs, hidden, beam, max_len);
        set!(train, dev, checkpoint, out, embeddings);
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            patience: self.patience,
            clip_norm: self.clip_norm,
            negative_mode: self.negative_mode,
            same_passage: self.same_passage,
            max_len: self.max_len,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            word_dim: self.word_dim,
            pos_dim: self.pos_dim,
            ner_dim: self.ner_dim,
            case_dim: self.case_dim,
            answer_dim: self.answer_dim,
            state_dim: self.hidden,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train_config().validate().map_err(|e| e.to_string())?;
        self.encoder_config().validate()?;
        if self.beam == 0 || self.max_len == 0 {
            return Err("beam and max-len must be positive".into());
        }
        Ok(())
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, Parser)]
#[command(name = "bertv", version, about = "Hotel review classification, training and ranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled corpus to --out (.jsonl or .csv).
    Synth(Overrides),
    /// Validate --data and write train/val/test splits into the --out directory.
    Ingest(Overrides),
    /// Train the encoder with validation-driven learning-rate decay and rollback.
    #[command(name = "train-bertv")]
    TrainBertv(Overrides),
    /// Train the encoder at a constant learning rate for max_epochs.
    #[command(name = "train-fixed")]
    TrainFixed(Overrides),
    /// Train the TF-IDF + softmax-regression baseline.
    #[command(name = "train-tfidf")]
    TrainTfidf(Overrides),
    /// Score a --checkpoint on every review in --data.
    Eval(Overrides),
    /// Label the reviews in --data and optionally add them to the --store.
    Classify(Overrides),
    /// Rank the hotels in --store.
    Recommend(Overrides),
    /// Finite-difference check of the encoder gradients on a small model.
    Gradcheck(Overrides),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::TrainBertv(_) => "train-bertv",
            Command::TrainFixed(_) => "train-fixed",
            Command::TrainTfidf(_) => "train-tfidf",
            Command::Eval(_) => "eval",
            Command::Classify(_) => "classify",
            Command::Recommend(_) => "recommend",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    pub fn overrides(&self) -> &Overrides {
        match self {
            Command::Synth(o)
            | Command::Ingest(o)
            | Command::TrainBertv(o)
            | Command::TrainFixed(o)
            | Command::TrainTfidf(o)
            | Command::Eval(o)
            | Command::Classify(o)
            | Command::Recommend(o)
            | Command::Gradcheck(o) => o,
        }
    }
}

/// Per-key overrides of the JSON config. Each flag sets the config key of
/// the same name (dashes become underscores).
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// JSON config file
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Seed for data generation, splitting, initialisation and shuffling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Labelled reviews (.jsonl or .csv)
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Output file (synth, classify, recommend) or directory (ingest)
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Encoder checkpoint written by training, read by eval and classify
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// TF-IDF baseline model (JSON) written by train-tfidf
    #[arg(long, value_name = "FILE")]
    pub tfidf_model: Option<PathBuf>,
    /// Hotel store (CSV)
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
    /// Metrics JSON output
    #[arg(long, value_name = "FILE")]
    pub metrics_out: Option<PathBuf>,
    /// Training history JSONL output
    #[arg(long, value_name = "FILE")]
    pub history_out: Option<PathBuf>,

    /// Synthetic reviews per class
    #[arg(long)]
    pub n_per_class: Option<usize>,
    /// Hotels the synthetic reviews are spread over
    #[arg(long)]
    pub n_hotels: Option<usize>,

    #[arg(long)]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    pub val_ratio: Option<f64>,
    #[arg(long)]
    pub test_ratio: Option<f64>,

    /// Maximum vocabulary size including the 4 reserved tokens
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Minimum token frequency for the vocabulary
    #[arg(long)]
    pub min_freq: Option<usize>,

    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f32>,
    /// Hidden fully-connected layers in the classifier head
    #[arg(long)]
    pub head_layers: Option<usize>,
    /// cls or mean
    #[arg(long)]
    pub pooling: Option<String>,
    /// Fraction of backbone tensors frozen, in parameter order
    #[arg(long)]
    pub freeze_fraction: Option<f64>,

    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Learning-rate multiplier applied on a plateau
    #[arg(long)]
    pub decay_factor: Option<f64>,
    /// Epochs without improvement that trigger a decay
    #[arg(long)]
    pub patience: Option<usize>,
    /// Decays allowed before training stops
    #[arg(long)]
    pub max_decays: Option<usize>,
    /// Minimum gain in the monitored score that counts as improvement
    #[arg(long)]
    pub improvement_threshold: Option<f64>,
    /// Epochs after a decay during which patience is not counted
    #[arg(long)]
    pub cooldown: Option<usize>,
    /// Restore the optimizer moments together with the weights
    #[arg(long)]
    pub rollback_moments: Option<bool>,
    /// accuracy or macro_f1
    #[arg(long)]
    pub monitor: Option<String>,

    #[arg(long)]
    pub tfidf_min_df: Option<usize>,
    /// Drop English stop words before TF-IDF
    #[arg(long)]
    pub tfidf_stopwords: Option<bool>,
    #[arg(long)]
    pub tfidf_l2_normalize: Option<bool>,
    #[arg(long)]
    pub tfidf_smooth_idf: Option<bool>,
    #[arg(long)]
    pub tfidf_lr: Option<f64>,
    #[arg(long)]
    pub tfidf_epochs: Option<usize>,

    /// Hotels with fewer reviews are left out of the ranking
    #[arg(long)]
    pub min_reviews: Option<u64>,
    #[arg(long)]
    pub weight_bad: Option<f64>,
    #[arg(long)]
    pub weight_good: Option<f64>,
    #[arg(long)]
    pub weight_excellent: Option<f64>,

    /// Finite-difference step for gradcheck
    #[arg(long)]
    pub gradcheck_eps: Option<f64>,
}

impl Overrides {
    /// The flags that were given, as config key/value pairs.
    pub fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("overrides serialize") {
            Value::Object(m) => m.into_iter().filter(|(_, v)| !v.is_null()).collect(),
            _ => unreachable!("struct serializes to an object"),
        }
    }
}

//! One function per subcommand. Each takes the resolved config and returns
//! a `CliError` classified by exit code.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use bertv::corpus::{self, Format, LabeledReview, SynthOptions};
use bertv::encoder::{self, EncoderWeights, SELFCHECK_TOLERANCE};
use bertv::recommender::{self, HotelStore};
use bertv::tfidf::{self, LinearModel, TfidfModel};
use bertv::tokenizer::{self, build_vocab};
use bertv::vtrain::{self, write_history_jsonl, Metrics, TrainResult};
use bertv::{DatasetSplit, Label};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn require<'a>(path: &'a Option<PathBuf>, key: &str, command: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| {
        CliError::Usage(format!(
            "{command} needs `{key}` (flag --{} or config key \"{key}\")",
            key.replace('_', "-")
        ))
    })
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Write `text` to `path`, or to stdout when no path is configured.
fn emit(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn metrics_json(m: &Metrics) -> String {
    with_newline(serde_json::to_string_pretty(m).expect("metrics serialize"))
}

fn load_labeled(path: &Path) -> anyhow::Result<Vec<LabeledReview>> {
    let format = Format::from_path(path)?;
    corpus::load_reviews(path, format).with_context(|| format!("reading {}", path.display()))
}

fn load_split(config: &RunConfig, command: &str) -> Result<DatasetSplit> {
    let data = require(&config.data, "data", command)?;
    let reviews = load_labeled(data)?;
    let split = corpus::stratified_split(&reviews, config.ratios(), config.seed)
        .map_err(anyhow::Error::from)?;
    eprintln!(
        "split {} reviews into train {} / val {} / test {}",
        reviews.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(split)
}

pub fn synth(config: &RunConfig) -> Result<()> {
    let out = require(&config.out, "out", "synth")?;
    let format = Format::from_path(out).map_err(|e| CliError::Usage(e.to_string()))?;
    let reviews = corpus::synth_corpus_with(SynthOptions {
        n_per_class: config.n_per_class,
        seed: config.seed,
        n_hotels: config.n_hotels,
    });
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
    }
    corpus::write_reviews(out, format, &reviews).map_err(anyhow::Error::from)?;
    eprintln!("wrote {} reviews to {}", reviews.len(), out.display());
    Ok(())
}

pub fn ingest(config: &RunConfig) -> Result<()> {
    let out = require(&config.out, "out", "ingest")?.to_path_buf();
    let split = load_split(config, "ingest")?;
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let path = out.join(format!("{name}.jsonl"));
        corpus::write_reviews(&path, Format::Jsonl, part).map_err(anyhow::Error::from)?;
    }
    eprintln!("wrote train.jsonl, val.jsonl, test.jsonl to {}", out.display());
    Ok(())
}

/// Which encoder schedule `train_encoder` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderSchedule {
    Validation,
    Fixed,
}

pub fn train_encoder(config: &RunConfig, schedule: EncoderSchedule) -> Result<()> {
    let command = match schedule {
        EncoderSchedule::Validation => "train-bertv",
        EncoderSchedule::Fixed => "train-fixed",
    };
    let split = load_split(config, command)?;
    let texts: Vec<&str> = split.train.iter().map(|r| r.text.as_str()).collect();
    let vocab = build_vocab(&texts, config.vocab_size, config.min_freq).map_err(anyhow::Error::from)?;
    let enc = config.encoder(vocab.len());
    enc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let train = config.train();
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    eprintln!(
        "vocabulary {} entries, {} layers, d_model {}",
        vocab.len(),
        enc.n_layers,
        enc.d_model
    );
    let weights = EncoderWeights::<f32>::init(enc, config.seed).map_err(anyhow::Error::from)?;
    let policy = config.freeze();
    let result: TrainResult<f32> = match schedule {
        EncoderSchedule::Validation => vtrain::train_v(weights, &vocab, &split, &train, &policy),
        EncoderSchedule::Fixed => vtrain::train_fixed(weights, &vocab, &split, &train, &policy),
    }
    .map_err(anyhow::Error::from)?;
    for r in &result.history {
        eprintln!(
            "epoch {:>3}  lr {:<10}  loss {:.5}  train {:.4}  val {:.4}{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc,
            r.val_acc,
            if r.rolled_back { "  rollback" } else { "" }
        );
    }
    if let Some(path) = &config.history_out {
        let mut buf = Vec::new();
        write_history_jsonl(&result.history, &mut buf).map_err(anyhow::Error::from)?;
        write_text(path, std::str::from_utf8(&buf).expect("JSON is UTF-8"))?;
    }
    if let Some(path) = &config.checkpoint {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
        }
        encoder::save_checkpoint(&result.weights, &vocab, path).map_err(anyhow::Error::from)?;
        eprintln!("checkpoint written to {}", path.display());
    }
    let metrics = vtrain::evaluate(&result.weights, &split.test, &vocab).map_err(anyhow::Error::from)?;
    eprintln!(
        "test accuracy {:.4}  macro F1 {:.4}",
        metrics.accuracy, metrics.macro_f1
    );
    emit(config.metrics_out.as_deref(), &metrics_json(&metrics))?;
    Ok(())
}

/// The TF-IDF baseline as written by `train-tfidf`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TfidfArtifact {
    pub tfidf: Value,
    pub linear: LinearModel,
}

pub fn train_tfidf(config: &RunConfig) -> Result<()> {
    let split = load_split(config, "train-tfidf")?;
    let texts: Vec<&str> = split.train.iter().map(|r| r.text.as_str()).collect();
    let model = tfidf::fit_tfidf(&texts, config.tfidf()).map_err(anyhow::Error::from)?;
    let features: Vec<_> = texts.iter().map(|t| tfidf::transform(&model, t)).collect();
    let labels: Vec<Label> = split.train.iter().map(|r| r.label).collect();
    let linear = tfidf::train_linear(&features, &labels, &config.linear()).map_err(anyhow::Error::from)?;
    let metrics = tfidf_metrics(&model, &linear, &split.test)?;
    eprintln!(
        "{} terms; test accuracy {:.4}  macro F1 {:.4}",
        model.n_terms(),
        metrics.accuracy,
        metrics.macro_f1
    );
    if let Some(path) = &config.tfidf_model {
        let artifact = TfidfArtifact {
            tfidf: serde_json::from_str(&model.to_json()).expect("model JSON parses"),
            linear,
        };
        write_text(path, &with_newline(serde_json::to_string(&artifact).expect("serializes")))?;
    }
    emit(config.metrics_out.as_deref(), &metrics_json(&metrics))?;
    Ok(())
}

pub fn tfidf_metrics(
    model: &TfidfModel,
    linear: &LinearModel,
    reviews: &[LabeledReview],
) -> anyhow::Result<Metrics> {
    if reviews.is_empty() {
        return Err(anyhow!("no reviews to evaluate"));
    }
    let predicted = reviews
        .iter()
        .map(|r| tfidf::predict_linear(linear, &tfidf::transform(model, &r.text)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let truth: Vec<Label> = reviews.iter().map(|r| r.label).collect();
    Ok(Metrics::from_predictions(&truth, &predicted))
}

fn load_encoder(config: &RunConfig, command: &str) -> Result<(EncoderWeights<f32>, tokenizer::Vocabulary)> {
    let path = require(&config.checkpoint, "checkpoint", command)?;
    let (mut weights, _, vocab) = encoder::load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    weights.config.pooling = config.pooling;
    Ok((weights, vocab))
}

pub fn eval(config: &RunConfig) -> Result<()> {
    let data = require(&config.data, "data", "eval")?;
    let (weights, vocab) = load_encoder(config, "eval")?;
    let reviews = load_labeled(data)?;
    let metrics = vtrain::evaluate(&weights, &reviews, &vocab).map_err(anyhow::Error::from)?;
    eprintln!("accuracy {:.4}  macro F1 {:.4}", metrics.accuracy, metrics.macro_f1);
    emit(config.metrics_out.as_deref(), &metrics_json(&metrics))?;
    Ok(())
}

/// A review to classify. The label, when present, is ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledReview {
    pub id: String,
    pub hotel_id: Option<String>,
    pub text: String,
}

#[derive(Deserialize)]
struct JsonRow {
    id: Option<Value>,
    hotel_id: Option<String>,
    text: String,
}

/// Read reviews without requiring a label. JSONL rows need `text` and may
/// carry `id` and `hotel_id`; CSV files need a `text` column. Missing ids
/// become the 1-based row number.
pub fn load_unlabeled(path: &Path) -> anyhow::Result<Vec<UnlabeledReview>> {
    let format = Format::from_path(path)?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    match format {
        Format::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: JsonRow = serde_json::from_str(&line)
                    .with_context(|| format!("{} line {}", path.display(), i + 1))?;
                let id = match row.id {
                    Some(Value::String(s)) => s,
                    Some(Value::Null) | None => (out.len() + 1).to_string(),
                    Some(other) => other.to_string(),
                };
                out.push(UnlabeledReview {
                    id,
                    hotel_id: row.hotel_id.filter(|h| !h.is_empty()),
                    text: row.text,
                });
            }
        }
        Format::Csv => {
            let mut reader = csv::Reader::from_reader(file);
            let header = reader.headers()?.clone();
            let col = |name: &str| header.iter().position(|h| h.trim() == name);
            let text_col = col("text").ok_or_else(|| anyhow!("{}: no `text` column", path.display()))?;
            let (id_col, hotel_col) = (col("id"), col("hotel_id"));
            for (i, record) in reader.records().enumerate() {
                let record = record.with_context(|| format!("{} row {}", path.display(), i + 1))?;
                let get = |c: Option<usize>| c.and_then(|c| record.get(c)).map(str::to_string);
                out.push(UnlabeledReview {
                    id: get(id_col).filter(|s| !s.is_empty()).unwrap_or_else(|| (i + 1).to_string()),
                    hotel_id: get(hotel_col).filter(|s| !s.is_empty()),
                    text: get(Some(text_col)).unwrap_or_default(),
                });
            }
        }
    }
    let mut seen = HashSet::new();
    if let Some(dup) = out.iter().find(|r| !seen.insert(r.id.as_str())) {
        return Err(anyhow!("{}: duplicate review id {:?}", path.display(), dup.id));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    hotel_id: Option<&'a str>,
    label: Label,
}

pub fn classify(config: &RunConfig) -> Result<()> {
    let data = require(&config.data, "data", "classify")?;
    let (weights, vocab) = load_encoder(config, "classify")?;
    let reviews = load_unlabeled(data)?;
    let texts: Vec<&str> = reviews.iter().map(|r| r.text.as_str()).collect();
    let labels = vtrain::classify(&weights, &texts, &vocab).map_err(anyhow::Error::from)?;

    let mut buf = Vec::new();
    for (r, &label) in reviews.iter().zip(&labels) {
        let p = Prediction {
            id: &r.id,
            hotel_id: r.hotel_id.as_deref(),
            label,
        };
        serde_json::to_writer(&mut buf, &p).expect("prediction serializes");
        buf.push(b'\n');
    }
    emit(config.out.as_deref(), std::str::from_utf8(&buf).expect("JSON is UTF-8"))?;

    if let Some(store) = &config.store {
        let with_hotel: Vec<(&str, Label)> = reviews
            .iter()
            .zip(&labels)
            .filter_map(|(r, &l)| r.hotel_id.as_deref().map(|h| (h, l)))
            .collect();
        let skipped = reviews.len() - with_hotel.len();
        if skipped > 0 {
            eprintln!("{skipped} reviews without hotel_id not added to the store");
        }
        let updated = recommender::update_feature_matrix(store, &with_hotel).map_err(anyhow::Error::from)?;
        eprintln!(
            "store {} now holds {} hotels",
            store.display(),
            updated.hotels.len()
        );
    }
    Ok(())
}

pub fn recommend(config: &RunConfig) -> Result<()> {
    let store_path = require(&config.store, "store", "recommend")?;
    let weights = config.class_weights();
    weights.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let store = HotelStore::load(store_path).map_err(anyhow::Error::from)?;
    let ranked = recommender::rank_hotels(&store, config.min_reviews, &weights);
    eprintln!("{} of {} hotels ranked", ranked.len(), store.hotels.len());
    emit(config.out.as_deref(), &with_newline(recommender::ranking_json(&ranked)))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    pub worst_tensor: Option<String>,
    pub worst_index: Option<usize>,
    pub coords_checked: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn run_gradcheck(seed: u64, eps: f64) -> anyhow::Result<GradcheckOutcome> {
    let report = encoder::run_selfcheck(seed, eps)?;
    let (worst_tensor, worst_index) = match report.worst {
        Some((name, i)) => (Some(name), Some(i)),
        None => (None, None),
    };
    Ok(GradcheckOutcome {
        max_rel_error: report.max_rel_error,
        worst_tensor,
        worst_index,
        coords_checked: report.coords_checked,
        eps,
        tolerance: SELFCHECK_TOLERANCE,
        passed: report.max_rel_error < SELFCHECK_TOLERANCE,
    })
}

pub fn gradcheck(config: &RunConfig) -> Result<()> {
    if !(config.gradcheck_eps > 0.0 && config.gradcheck_eps.is_finite()) {
        return Err(CliError::Usage(format!(
            "gradcheck_eps must be positive, got {}",
            config.gradcheck_eps
        )));
    }
    let outcome = run_gradcheck(config.seed, config.gradcheck_eps)?;
    eprintln!(
        "max relative error {:e} over {} coordinates",
        outcome.max_rel_error, outcome.coords_checked
    );
    emit(
        config.out.as_deref(),
        &with_newline(serde_json::to_string_pretty(&outcome).expect("serializes")),
    )?;
    if outcome.passed {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!(
            "max relative error {:e} is not below {:e}",
            outcome.max_rel_error,
            SELFCHECK_TOLERANCE
        )))
    }
}

//! Run configuration: a flat JSON object whose keys are the fields of
//! [`RunConfig`]. Resolution order is defaults, then the config file, then
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use bertv::encoder::{EncoderConfig, FreezePolicy, Pooling};
use bertv::recommender::ClassWeights;
use bertv::tfidf::{LinearHyperParams, TfidfOptions};
use bertv::vtrain::{Monitor, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?} has the wrong type: {reason}")]
    TypeError { key: String, reason: String },
    #[error("cannot read config file {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("config file {path} is not a JSON object: {reason}")]
    NotAnObject { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // paths
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub tfidf_model: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    pub history_out: Option<PathBuf>,

    // synthetic corpus
    pub n_per_class: usize,
    pub n_hotels: usize,

    // split
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,

    // tokenizer
    pub vocab_size: usize,
    pub min_freq: usize,

    // encoder
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_rate: f32,
    pub head_layers: usize,
    pub pooling: Pooling,
    pub freeze_fraction: f64,

    // training
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub max_decays: usize,
    pub improvement_threshold: f64,
    pub cooldown: usize,
    pub rollback_moments: bool,
    pub monitor: Monitor,

    // tf-idf baseline
    pub tfidf_min_df: usize,
    pub tfidf_stopwords: bool,
    pub tfidf_l2_normalize: bool,
    pub tfidf_smooth_idf: bool,
    pub tfidf_lr: f64,
    pub tfidf_epochs: usize,

    // recommender
    pub min_reviews: u64,
    pub weight_bad: f64,
    pub weight_good: f64,
    pub weight_excellent: f64,

    pub gradcheck_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let tr = TrainConfig::default();
        let tf = TfidfOptions::default();
        let lin = LinearHyperParams::default();
        let w = ClassWeights::default();
        RunConfig {
            seed: 0,
            data: None,
            out: None,
            checkpoint: None,
            tfidf_model: None,
            store: None,
            metrics_out: None,
            history_out: None,
            n_per_class: 100,
            n_hotels: 5,
            train_ratio: 0.6,
            val_ratio: 0.2,
            test_ratio: 0.2,
            vocab_size: enc.vocab_size,
            min_freq: 1,
            max_len: enc.max_len,
            d_model: enc.d_model,
            n_heads: enc.n_heads,
            n_layers: enc.n_layers,
            d_ff: enc.d_ff,
            dropout_rate: enc.dropout_rate,
            head_layers: enc.head_layers,
            pooling: enc.pooling,
            freeze_fraction: FreezePolicy::default().freeze_fraction,
            max_epochs: tr.max_epochs,
            batch_size: tr.batch_size,
            lr0: tr.lr0,
            decay_factor: tr.decay_factor,
            patience: tr.patience,
            max_decays: tr.max_decays,
            improvement_threshold: tr.improvement_threshold,
            cooldown: tr.cooldown,
            rollback_moments: tr.rollback_moments,
            monitor: tr.monitor,
            tfidf_min_df: tf.min_df,
            tfidf_stopwords: tf.stopwords,
            tfidf_l2_normalize: tf.l2_normalize,
            tfidf_smooth_idf: tf.smooth_idf,
            tfidf_lr: lin.lr,
            tfidf_epochs: lin.epochs,
            min_reviews: 1,
            weight_bad: w.bad,
            weight_good: w.good,
            weight_excellent: w.excellent,
            gradcheck_eps: 1e-5,
        }
    }
}

impl RunConfig {
    /// Encoder shape for a vocabulary of `vocab_len` entries.
    pub fn encoder(&self, vocab_len: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab_len,
            max_len: self.max_len,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            dropout_rate: self.dropout_rate,
            head_layers: self.head_layers,
            pooling: self.pooling,
            ..EncoderConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            decay_factor: self.decay_factor,
            patience: self.patience,
            max_decays: self.max_decays,
            improvement_threshold: self.improvement_threshold,
            cooldown: self.cooldown,
            rollback_moments: self.rollback_moments,
            monitor: self.monitor,
            seed: self.seed,
        }
    }

    pub fn freeze(&self) -> FreezePolicy {
        FreezePolicy::new(self.freeze_fraction)
    }

    pub fn tfidf(&self) -> TfidfOptions {
        TfidfOptions {
            min_df: self.tfidf_min_df,
            stopwords: self.tfidf_stopwords,
            l2_normalize: self.tfidf_l2_normalize,
            smooth_idf: self.tfidf_smooth_idf,
        }
    }

    pub fn linear(&self) -> LinearHyperParams {
        LinearHyperParams {
            lr: self.tfidf_lr,
            epochs: self.tfidf_epochs,
            seed: self.seed,
        }
    }

    pub fn class_weights(&self) -> ClassWeights {
        ClassWeights {
            bad: self.weight_bad,
            good: self.weight_good,
            excellent: self.weight_excellent,
        }
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train_ratio, self.val_ratio, self.test_ratio)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every accepted key, in declaration order.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("RunConfig serializes to an object"),
        }
    }
}

/// Read a config file into a key/value map. An empty or whitespace-only
/// file is an empty object.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(other) => Err(ConfigError::NotAnObject {
            path: path.to_path_buf(),
            reason: format!("found {}", kind(&other)),
        }),
        Err(e) => Err(ConfigError::NotAnObject {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Apply `layers` in order over the defaults. Each key is checked on its
/// own so errors name the offending key.
pub fn resolve(layers: &[Map<String, Value>]) -> Result<RunConfig, ConfigError> {
    let Value::Object(mut merged) = serde_json::to_value(RunConfig::default()).expect("serializes") else {
        unreachable!("RunConfig serializes to an object")
    };
    for layer in layers {
        for (key, value) in layer {
            if !merged.contains_key(key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
            let Value::Object(mut probe) = serde_json::to_value(RunConfig::default()).expect("serializes") else {
                unreachable!()
            };
            probe.insert(key.clone(), value.clone());
            if let Err(e) = serde_json::from_value::<RunConfig>(Value::Object(probe)) {
                return Err(ConfigError::TypeError {
                    key: key.clone(),
                    reason: e.to_string(),
                });
            }
            merged.insert(key.clone(), value.clone());
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| ConfigError::TypeError {
        key: String::new(),
        reason: e.to_string(),
    })
}

/// Defaults, then the optional file, then `overrides`.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &Map<String, Value>,
) -> Result<RunConfig, ConfigError> {
    let mut layers = Vec::new();
    if let Some(path) = file {
        layers.push(read_config_file(path)?);
    }
    layers.push(overrides.clone());
    resolve(&layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        match v {
            Value::Object(m) => m,
            _ => panic!("not an object"),
        }
    }

    #[test]
    fn empty_layers_give_defaults() {
        assert_eq!(resolve(&[]).unwrap(), RunConfig::default());
        assert_eq!(resolve(&[Map::new()]).unwrap(), RunConfig::default());
    }

    #[test]
    fn later_layers_win() {
        let c = resolve(&[obj(json!({"d_model": 32, "seed": 4})), obj(json!({"d_model": 48}))]).unwrap();
        assert_eq!(c.d_model, 48);
        assert_eq!(c.seed, 4);
    }

    #[test]
    fn unknown_key_is_named() {
        match resolve(&[obj(json!({"d_modle": 32}))]) {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "d_modle"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_errors_are_named() {
        for (key, bad) in [
            ("d_model", json!("wide")),
            ("pooling", json!("max")),
            ("rollback_moments", json!(1)),
            ("lr0", json!([0.1])),
            ("n_layers", json!(-2)),
        ] {
            let mut m = Map::new();
            m.insert(key.to_string(), bad);
            match resolve(&[m]) {
                Err(ConfigError::TypeError { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{key}: {other:?}"),
            }
        }
    }

    #[test]
    fn enum_values_parse() {
        let c = resolve(&[obj(json!({"pooling": "mean", "monitor": "macro_f1", "data": "x.jsonl"}))]).unwrap();
        assert_eq!(c.pooling, Pooling::Mean);
        assert_eq!(c.monitor, Monitor::MacroF1);
        assert_eq!(c.data, Some(PathBuf::from("x.jsonl")));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig {
            d_model: 48,
            ..Default::default()
        };
        let back: RunConfig = serde_json::from_str(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::keys().contains(&"freeze_fraction".to_string()));
    }

    #[test]
    fn file_reading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, "").unwrap();
        assert!(read_config_file(&p).unwrap().is_empty());
        fs::write(&p, "[1]").unwrap();
        assert!(matches!(read_config_file(&p), Err(ConfigError::NotAnObject { .. })));
        assert!(matches!(
            read_config_file(&dir.path().join("missing.json")),
            Err(ConfigError::Unreadable { .. })
        ));
    }
}

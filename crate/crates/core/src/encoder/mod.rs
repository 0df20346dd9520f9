//! Transformer encoder classifier.
//!
//! Token and learned position embeddings feed a stack of post-norm encoder
//! layers (multi-head self-attention with PAD keys masked out, residual add,
//! layer norm, GELU feed-forward, residual add, layer norm). The `[CLS]`
//! hidden state (or the masked mean, see [`Pooling`]) goes through a small
//! fully-connected head that produces three class logits.
//!
//! Parameters live in a flat list in a fixed order: embeddings, then layers
//! in depth order, then the head. Freezing operates on a prefix of that
//! order.

mod checkpoint;
mod model;
mod selfcheck;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::numerics::{Matrix, NumericsError, Parameter, Real};
use crate::rng;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, MAGIC, VERSION};
pub use model::{grad_check_model, BackwardOutput, Mode};
pub use selfcheck::{
    run_selfcheck, selfcheck_batch, selfcheck_config, SELFCHECK_PERTURB_STD, SELFCHECK_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {got} does not match max_len {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{sequences} sequences but {labels} labels")]
    LabelCountMismatch { sequences: usize, labels: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("bad checkpoint magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint is missing tensor {0}")]
    TensorMissing(String),
    #[error("tensor {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("checkpoint contains unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("checkpoint is truncated or malformed: {0}")]
    Malformed(String),
    #[error("vocabulary of {vocab} tokens does not fit vocab_size {vocab_size}")]
    VocabTooLarge { vocab: usize, vocab_size: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Hidden state at position 0.
    #[default]
    Cls,
    /// Mean over non-PAD positions.
    Mean,
}

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Standard deviation of the initial weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_rate: f32,
    pub n_classes: usize,
    /// Hidden fully-connected layers in the head before the output layer.
    pub head_layers: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 8000,
            max_len: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 128,
            dropout_rate: 0.1,
            n_classes: Label::COUNT,
            head_layers: 1,
            pooling: Pooling::Cls,
        }
    }
}

/// Tensors per encoder layer.
pub const TENSORS_PER_LAYER: usize = 16;

const LAYER_TENSORS: [&str; TENSORS_PER_LAYER] = [
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln1.gain",
    "ln1.bias",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
    "ln2.gain",
    "ln2.bias",
];

/// How a tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: InitKind,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes != Label::COUNT {
            return Err(EncoderError::InvalidConfig(format!(
                "n_classes must be {}, got {}",
                Label::COUNT,
                self.n_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::InvalidConfig(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of embedding and encoder-layer tensors.
    pub fn backbone_len(&self) -> usize {
        2 + TENSORS_PER_LAYER * self.n_layers
    }

    /// Every tensor in parameter order.
    pub fn tensor_schema(&self) -> Vec<TensorSpec> {
        let spec = |name: String, rows, cols, init| TensorSpec {
            name,
            rows,
            cols,
            init,
        };
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            spec("embeddings.token".into(), self.vocab_size, d, InitKind::Normal),
            spec("embeddings.position".into(), self.max_len, d, InitKind::Normal),
        ];
        for l in 1..=self.n_layers {
            for (i, suffix) in LAYER_TENSORS.iter().enumerate() {
                let (rows, cols, init) = match i {
                    0 | 2 | 4 | 6 => (d, d, InitKind::Normal),
                    1 | 3 | 5 | 7 | 9 | 15 => (1, d, InitKind::Zeros),
                    8 | 14 => (1, d, InitKind::Ones),
                    10 => (d, f, InitKind::Normal),
                    11 => (1, f, InitKind::Zeros),
                    12 => (f, d, InitKind::Normal),
                    _ => (1, d, InitKind::Zeros),
                };
                out.push(spec(format!("layer{l}.{suffix}"), rows, cols, init));
            }
        }
        for k in 1..=self.head_layers {
            out.push(spec(format!("head.hidden{k}.weight"), d, d, InitKind::Normal));
            out.push(spec(format!("head.hidden{k}.bias"), 1, d, InitKind::Zeros));
        }
        out.push(spec("head.output.weight".into(), d, self.n_classes, InitKind::Normal));
        out.push(spec("head.output.bias".into(), 1, self.n_classes, InitKind::Zeros));
        out
    }
}

/// Offsets of each tensor within a layer block.
pub(crate) mod slot {
    pub const Q_W: usize = 0;
    pub const Q_B: usize = 1;
    pub const K_W: usize = 2;
    #[allow(dead_code)]
    pub const K_B: usize = 3;
    pub const V_W: usize = 4;
    pub const V_B: usize = 5;
    pub const O_W: usize = 6;
    pub const O_B: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const FF1_W: usize = 10;
    pub const FF1_B: usize = 11;
    pub const FF2_W: usize = 12;
    pub const FF2_B: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T: Real> {
    pub config: EncoderConfig,
    pub params: Vec<Parameter<T>>,
}

impl<T: Real> EncoderWeights<T> {
    /// Weight matrices drawn from `Normal(0, 0.02^2)`, biases zero,
    /// layer-norm gains one.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = rng::seeded(seed, rng::STREAM_INIT);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .tensor_schema()
            .into_iter()
            .map(|s| {
                let value = match s.init {
                    InitKind::Zeros => Matrix::zeros(s.rows, s.cols),
                    InitKind::Ones => Matrix::filled(s.rows, s.cols, T::one()),
                    InitKind::Normal => {
                        let data = (0..s.rows * s.cols)
                            .map(|_| T::from_f64(normal.sample(&mut rng)))
                            .collect();
                        Matrix::from_vec(s.rows, s.cols, data).expect("schema shape")
                    }
                };
                Parameter::new(s.name, value)
            })
            .collect();
        Ok(EncoderWeights { config, params })
    }

    /// Assemble from parameters that must match the config's schema exactly.
    pub fn from_parts(config: EncoderConfig, params: Vec<Parameter<T>>) -> Result<Self, EncoderError> {
        config.validate()?;
        let schema = config.tensor_schema();
        for (i, s) in schema.iter().enumerate() {
            let p = params
                .get(i)
                .ok_or_else(|| EncoderError::TensorMissing(s.name.clone()))?;
            if p.name != s.name {
                return Err(EncoderError::TensorMissing(s.name.clone()));
            }
            if p.shape() != (s.rows, s.cols) {
                return Err(EncoderError::ShapeMismatch {
                    name: s.name.clone(),
                    expected: (s.rows, s.cols),
                    got: p.shape(),
                });
            }
        }
        if let Some(extra) = params.get(schema.len()) {
            return Err(EncoderError::UnexpectedTensor(extra.name.clone()));
        }
        Ok(EncoderWeights { config, params })
    }

    /// Add `Normal(0, std^2)` noise to every entry of every tensor. Used to
    /// move away from the near-linear regime of a fresh init, e.g. before a
    /// gradient check.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = rng::seeded(seed, rng::STREAM_PERTURB);
        let normal = Normal::new(0.0, std).expect("valid std");
        for p in &mut self.params {
            for x in p.value.as_mut_slice() {
                *x += T::from_f64(normal.sample(&mut rng));
            }
        }
    }

    pub fn backbone_len(&self) -> usize {
        self.config.backbone_len()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            config: self.config,
            params: self.params.iter().map(Parameter::cast).collect(),
        }
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.frozen)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub(crate) fn layer_base(l: usize) -> usize {
        2 + TENSORS_PER_LAYER * l
    }

    pub(crate) fn head_base(&self) -> usize {
        self.backbone_len()
    }
}

/// Fraction of backbone tensors (in parameter order) to freeze. Head
/// tensors always stay trainable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub freeze_fraction: f64,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        FreezePolicy {
            freeze_fraction: 0.75,
        }
    }
}

impl FreezePolicy {
    pub fn new(freeze_fraction: f64) -> Self {
        FreezePolicy { freeze_fraction }
    }

    /// `floor(fraction * n_backbone)`, fraction clamped to `[0, 1]`. A tiny
    /// tolerance keeps products such as `0.29 * 100` from rounding down.
    pub fn frozen_count(&self, n_backbone: usize) -> usize {
        let f = self.freeze_fraction.clamp(0.0, 1.0);
        ((f * n_backbone as f64 + 1e-9).floor() as usize).min(n_backbone)
    }
}

/// Freeze the first `policy.frozen_count(n_backbone)` tensors of `params`
/// and unfreeze the rest, including everything after the backbone.
pub fn freeze_prefix<T: Real>(params: &mut [Parameter<T>], n_backbone: usize, policy: &FreezePolicy) {
    let k = policy.frozen_count(n_backbone.min(params.len()));
    for (i, p) in params.iter_mut().enumerate() {
        p.frozen = i < k;
    }
}

pub fn apply_freeze_policy<T: Real>(weights: &mut EncoderWeights<T>, policy: &FreezePolicy) {
    let n = weights.backbone_len();
    freeze_prefix(&mut weights.params, n, policy);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 100,
            max_len: 16,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            ..Default::default()
        }
    }

    #[test]
    fn schema_inventory() {
        let w = EncoderWeights::<f32>::init(small(), 1).unwrap();
        let shapes: Vec<(String, (usize, usize))> =
            w.params.iter().map(|p| (p.name.clone(), p.shape())).collect();
        let mut expected = vec![
            ("embeddings.token".to_string(), (100, 32)),
            ("embeddings.position".to_string(), (16, 32)),
        ];
        for l in 1..=2 {
            for (suffix, shape) in [
                ("attn.q.weight", (32, 32)),
                ("attn.q.bias", (1, 32)),
                ("attn.k.weight", (32, 32)),
                ("attn.k.bias", (1, 32)),
                ("attn.v.weight", (32, 32)),
                ("attn.v.bias", (1, 32)),
                ("attn.out.weight", (32, 32)),
                ("attn.out.bias", (1, 32)),
                ("ln1.gain", (1, 32)),
                ("ln1.bias", (1, 32)),
                ("ffn.in.weight", (32, 64)),
                ("ffn.in.bias", (1, 64)),
                ("ffn.out.weight", (64, 32)),
                ("ffn.out.bias", (1, 32)),
                ("ln2.gain", (1, 32)),
                ("ln2.bias", (1, 32)),
            ] {
                expected.push((format!("layer{l}.{suffix}"), shape));
            }
        }
        expected.push(("head.hidden1.weight".into(), (32, 32)));
        expected.push(("head.hidden1.bias".into(), (1, 32)));
        expected.push(("head.output.weight".into(), (32, 3)));
        expected.push(("head.output.bias".into(), (1, 3)));
        assert_eq!(shapes, expected);
        assert_eq!(w.backbone_len(), 34);
    }

    #[test]
    fn init_is_deterministic_and_follows_kinds() {
        let a = EncoderWeights::<f32>::init(small(), 9).unwrap();
        assert_eq!(a, EncoderWeights::<f32>::init(small(), 9).unwrap());
        assert_ne!(a, EncoderWeights::<f32>::init(small(), 10).unwrap());
        for p in &a.params {
            if p.name.ends_with(".gain") {
                assert!(p.value.as_slice().iter().all(|&x| x == 1.0));
            } else if p.name.ends_with(".bias") {
                assert!(p.value.as_slice().iter().all(|&x| x == 0.0));
            }
        }
        let tok = &a.params[0].value;
        let n = tok.len() as f64;
        let mean = tok.as_slice().iter().map(|&x| x as f64).sum::<f64>() / n;
        let std = (tok.as_slice().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.002 && (std - 0.02).abs() < 0.002, "{mean} {std}");
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = small();
        c.n_classes = 2;
        assert!(c.validate().is_err());
        let mut c = small();
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn freeze_policy_counts() {
        let mut w = EncoderWeights::<f32>::init(small(), 1).unwrap();
        apply_freeze_policy(&mut w, &FreezePolicy::new(0.0));
        assert!(w.frozen_names().is_empty());
        apply_freeze_policy(&mut w, &FreezePolicy::new(1.0));
        assert_eq!(w.frozen_names().len(), 34);
        assert!(w.params[34..].iter().all(|p| !p.frozen));
        apply_freeze_policy(&mut w, &FreezePolicy::new(0.75));
        assert_eq!(w.frozen_names().len(), 25);
        assert!(w.params[..25].iter().all(|p| p.frozen));
    }

    #[test]
    fn three_quarters_of_two_hundred() {
        let mut params: Vec<Parameter<f32>> = (0..204)
            .map(|i| Parameter::new(format!("t{i}"), Matrix::zeros(1, 1)))
            .collect();
        freeze_prefix(&mut params, 200, &FreezePolicy::new(0.75));
        assert_eq!(params.iter().filter(|p| p.frozen).count(), 150);
        assert!(params[..150].iter().all(|p| p.frozen));
        assert!(params[150..].iter().all(|p| !p.frozen));
        assert_eq!(FreezePolicy::new(0.29).frozen_count(100), 29);
    }
}

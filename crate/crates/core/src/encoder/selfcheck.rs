//! A fixed small model and batch for checking the encoder's backward pass
//! against finite differences.

use super::{grad_check_model, EncoderConfig, EncoderError, EncoderWeights, Pooling};
use crate::corpus::Label;
use crate::numerics::GradCheckReport;
use crate::tokenizer::{TokenSequence, CLS, PAD};

/// Acceptance threshold on the worst relative error.
pub const SELFCHECK_TOLERANCE: f64 = 1e-4;

/// Std of the Gaussian noise added to the initial weights. At the init
/// scale (0.02) many gradients sit near finite-difference resolution.
pub const SELFCHECK_PERTURB_STD: f64 = 0.3;

/// 2 layers, width 16, 2 heads, sequences of 8, no dropout.
pub fn selfcheck_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 30,
        max_len: 8,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        dropout_rate: 0.0,
        head_layers: 1,
        pooling: Pooling::Cls,
        ..EncoderConfig::default()
    }
}

/// One padded and one full sequence with different labels.
pub fn selfcheck_batch() -> (Vec<TokenSequence>, Vec<Label>) {
    let max_len = selfcheck_config().max_len;
    let seq = |ids: &[u32]| {
        let true_length = ids.len();
        let mut ids = ids.to_vec();
        ids.resize(max_len, PAD);
        TokenSequence {
            mask: (0..max_len).map(|i| u8::from(i < true_length)).collect(),
            ids,
            true_length,
        }
    };
    (
        vec![seq(&[CLS, 5, 9, 1, 12]), seq(&[CLS, 20, 3, 7, 7, 29, 4, 11])],
        vec![Label::Excellent, Label::Bad],
    )
}

/// Gradient check of the full 64-bit model on the fixed batch.
pub fn run_selfcheck(seed: u64, eps: f64) -> Result<GradCheckReport, EncoderError> {
    let mut weights = EncoderWeights::<f64>::init(selfcheck_config(), seed)?;
    weights.perturb(SELFCHECK_PERTURB_STD, seed);
    let (batch, labels) = selfcheck_batch();
    grad_check_model(&mut weights, &batch, &labels, None, eps)
}

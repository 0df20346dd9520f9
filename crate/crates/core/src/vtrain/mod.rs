//! Validation-driven training.
//!
//! After every epoch the model is scored on the validation split. A score
//! that beats the best so far by more than `improvement_threshold` is
//! snapshotted. After `patience` epochs without such an improvement the best
//! snapshot is restored and the learning rate is multiplied by
//! `decay_factor`. Training ends once more than `max_decays` decays have
//! happened or `max_epochs` is reached, and the best snapshot is returned.
//!
//! The loop is written against [`TrainableModel`] so it can be driven by
//! anything that trains an epoch and reports a validation score.

mod metrics;
mod trainer;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::numerics::NumericsError;
use crate::tokenizer::TokenizerError;

pub use metrics::Metrics;
pub use trainer::{
    classify, encode_reviews, evaluate, train_fixed, train_v, EncoderTrainer, TrainResult,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Validation quantity compared against the best score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    Accuracy,
    MacroF1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub max_decays: usize,
    pub improvement_threshold: f64,
    /// Epochs after a decay during which the patience counter is held.
    pub cooldown: usize,
    /// Also restore the Adam moments when rolling back.
    pub rollback_moments: bool,
    pub monitor: Monitor,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 50,
            batch_size: 16,
            lr0: 1e-3,
            decay_factor: 0.5,
            patience: 2,
            max_decays: 3,
            improvement_threshold: 1e-4,
            cooldown: 1,
            rollback_moments: false,
            monitor: Monitor::Accuracy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay_factor must lie in (0, 1)");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.improvement_threshold >= 0.0 && self.improvement_threshold.is_finite()) {
            return bad("improvement_threshold must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub improved: bool,
    /// The best snapshot was restored at the end of this epoch.
    pub rolled_back: bool,
    /// Decays applied so far, including one made at the end of this epoch.
    pub decays_used: usize,
}

/// One JSON object per line.
pub fn write_history_jsonl<W: Write>(history: &[EpochReport], mut out: W) -> std::io::Result<()> {
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValScore {
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl ValScore {
    pub fn monitored(&self, monitor: Monitor) -> f64 {
        match monitor {
            Monitor::Accuracy => self.accuracy,
            Monitor::MacroF1 => self.macro_f1,
        }
    }
}

pub trait TrainableModel {
    type Snapshot;

    /// Train one epoch (1-based) at learning rate `lr`.
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<EpochStats, TrainError>;
    fn validate(&mut self) -> Result<ValScore, TrainError>;
    /// Deep copy of the weights, plus optimizer state when `with_optimizer`.
    fn snapshot(&self, with_optimizer: bool) -> Self::Snapshot;
    fn restore(&mut self, snapshot: &Self::Snapshot);
}

/// Validation score right after a rollback next to the recorded best.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RollbackCheck {
    pub epoch: usize,
    pub best: f64,
    pub reevaluated: f64,
}

#[derive(Debug)]
pub struct TrainState<S> {
    pub epoch: usize,
    pub current_lr: f64,
    pub best_val: f64,
    pub best_snapshot: Option<S>,
    pub epochs_since_improve: usize,
    pub decays_used: usize,
    pub history: Vec<EpochReport>,
    pub rollbacks: Vec<RollbackCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Decay with rollback on plateaus; the best snapshot is restored at the end.
    Validation,
    /// Constant learning rate for exactly `max_epochs`; final weights kept.
    Fixed,
}

/// Run the epoch loop on `model`. On return under [`Schedule::Validation`]
/// the model holds the best snapshot.
pub fn run_schedule<M: TrainableModel>(
    model: &mut M,
    config: &TrainConfig,
    schedule: Schedule,
) -> Result<TrainState<M::Snapshot>, TrainError> {
    config.validate()?;
    let mut st = TrainState {
        epoch: 0,
        current_lr: config.lr0,
        best_val: f64::NEG_INFINITY,
        best_snapshot: None,
        epochs_since_improve: 0,
        decays_used: 0,
        history: Vec::new(),
        rollbacks: Vec::new(),
    };
    let mut cooldown_left: usize = 0;
    for epoch in 1..=config.max_epochs {
        st.epoch = epoch;
        let lr = st.current_lr;
        let stats = model.train_epoch(epoch, lr)?;
        let val = model.validate()?;
        let score = val.monitored(config.monitor);
        let improved = score > st.best_val + config.improvement_threshold;
        if improved {
            st.best_val = score;
            st.epochs_since_improve = 0;
            if schedule == Schedule::Validation {
                st.best_snapshot = Some(model.snapshot(config.rollback_moments));
            }
        } else if cooldown_left == 0 {
            st.epochs_since_improve += 1;
        }
        cooldown_left = cooldown_left.saturating_sub(1);

        let mut rolled_back = false;
        if schedule == Schedule::Validation && st.epochs_since_improve >= config.patience {
            if let Some(snap) = &st.best_snapshot {
                model.restore(snap);
                let again = model.validate()?.monitored(config.monitor);
                st.rollbacks.push(RollbackCheck {
                    epoch,
                    best: st.best_val,
                    reevaluated: again,
                });
            }
            rolled_back = true;
            st.decays_used += 1;
            st.current_lr = config.lr0 * config.decay_factor.powi(st.decays_used as i32);
            st.epochs_since_improve = 0;
            cooldown_left = config.cooldown;
        }
        st.history.push(EpochReport {
            epoch,
            lr,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_acc: val.accuracy,
            improved,
            rolled_back,
            decays_used: st.decays_used,
        });
        if st.decays_used > config.max_decays {
            break;
        }
    }
    if schedule == Schedule::Validation {
        if let Some(snap) = &st.best_snapshot {
            model.restore(snap);
        }
    }
    Ok(st)
}

use rand::seq::SliceRandom;

use super::{
    run_schedule, EpochReport, EpochStats, Metrics, RollbackCheck, Schedule, TrainConfig,
    TrainError, TrainableModel, ValScore,
};
use crate::corpus::{DatasetSplit, Label, LabeledReview};
use crate::encoder::{apply_freeze_policy, EncoderError, EncoderWeights, FreezePolicy, Mode};
use crate::numerics::{adam_step, AdamConfig, AdamState, Matrix, NumericsError, Real};
use crate::rng::{self, Rng};
use crate::tokenizer::{encode, TokenSequence, Vocabulary};

/// Sequences per forward pass when only predicting.
const EVAL_CHUNK: usize = 64;

pub fn encode_reviews<S: AsRef<str>>(
    texts: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenSequence>, TrainError> {
    texts
        .iter()
        .map(|t| encode(t.as_ref(), vocab, max_len).map_err(TrainError::from))
        .collect()
}

fn predict_all<T: Real>(
    weights: &EncoderWeights<T>,
    seqs: &[TokenSequence],
) -> Result<Vec<Label>, EncoderError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        out.extend(weights.predict(chunk)?);
    }
    Ok(out)
}

/// Eval-mode labels for `texts`, in input order.
pub fn classify<T: Real, S: AsRef<str>>(
    weights: &EncoderWeights<T>,
    texts: &[S],
    vocab: &Vocabulary,
) -> Result<Vec<Label>, TrainError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let seqs = encode_reviews(texts, vocab, weights.config.max_len)?;
    Ok(predict_all(weights, &seqs)?)
}

pub fn evaluate<T: Real>(
    weights: &EncoderWeights<T>,
    dataset: &[LabeledReview],
    vocab: &Vocabulary,
) -> Result<Metrics, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let texts: Vec<&str> = dataset.iter().map(|r| r.text.as_str()).collect();
    let predicted = classify(weights, &texts, vocab)?;
    let truth: Vec<Label> = dataset.iter().map(|r| r.label).collect();
    Ok(Metrics::from_predictions(&truth, &predicted))
}

/// Minibatch Adam training of an [`EncoderWeights`] on pre-encoded splits.
pub struct EncoderTrainer<T: Real> {
    pub weights: EncoderWeights<T>,
    adam: AdamState<T>,
    train: Vec<TokenSequence>,
    train_labels: Vec<Label>,
    val: Vec<TokenSequence>,
    val_labels: Vec<Label>,
    batch_size: usize,
    rng: Rng,
}

pub struct EncoderSnapshot<T: Real> {
    values: Vec<Matrix<T>>,
    adam: Option<AdamState<T>>,
}

impl<T: Real> EncoderTrainer<T> {
    pub fn new(
        weights: EncoderWeights<T>,
        vocab: &Vocabulary,
        splits: &DatasetSplit,
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        if splits.train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        if splits.val.is_empty() {
            return Err(TrainError::EmptySplit("validation"));
        }
        let max_len = weights.config.max_len;
        let texts = |rs: &[LabeledReview]| rs.iter().map(|r| r.text.clone()).collect::<Vec<_>>();
        let labels = |rs: &[LabeledReview]| rs.iter().map(|r| r.label).collect::<Vec<_>>();
        Ok(EncoderTrainer {
            adam: AdamState::new(&weights.params),
            train: encode_reviews(&texts(&splits.train), vocab, max_len)?,
            train_labels: labels(&splits.train),
            val: encode_reviews(&texts(&splits.val), vocab, max_len)?,
            val_labels: labels(&splits.val),
            batch_size: config.batch_size,
            rng: rng::seeded(config.seed, rng::STREAM_TRAIN),
            weights,
        })
    }
}

impl<T: Real> TrainableModel for EncoderTrainer<T> {
    type Snapshot = EncoderSnapshot<T>;

    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<EpochStats, TrainError> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let hp = AdamConfig::with_lr(lr);
        let mut loss_sum = 0.0;
        for (batch_no, idx) in order.chunks(self.batch_size).enumerate() {
            let batch: Vec<TokenSequence> = idx.iter().map(|&i| self.train[i].clone()).collect();
            let labels: Vec<Label> = idx.iter().map(|&i| self.train_labels[i]).collect();
            let non_finite = TrainError::NonFiniteLoss {
                epoch,
                batch: batch_no + 1,
            };
            let out = match self.weights.backward(&batch, &labels, Mode::Train(&mut self.rng)) {
                Err(EncoderError::Numerics(NumericsError::NonFiniteLoss)) => return Err(non_finite),
                r => r?,
            };
            if !out.loss.is_finite() {
                return Err(non_finite);
            }
            loss_sum += out.loss * idx.len() as f64;
            adam_step(&mut self.weights.params, &mut self.adam, &hp)?;
        }
        let predicted = predict_all(&self.weights, &self.train)?;
        let accuracy = Metrics::from_predictions(&self.train_labels, &predicted).accuracy;
        Ok(EpochStats {
            loss: loss_sum / self.train.len() as f64,
            accuracy,
        })
    }

    fn validate(&mut self) -> Result<ValScore, TrainError> {
        let predicted = predict_all(&self.weights, &self.val)?;
        let m = Metrics::from_predictions(&self.val_labels, &predicted);
        Ok(ValScore {
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
        })
    }

    fn snapshot(&self, with_optimizer: bool) -> EncoderSnapshot<T> {
        EncoderSnapshot {
            values: self.weights.params.iter().map(|p| p.value.clone()).collect(),
            adam: with_optimizer.then(|| self.adam.clone()),
        }
    }

    fn restore(&mut self, snapshot: &EncoderSnapshot<T>) {
        for (p, v) in self.weights.params.iter_mut().zip(&snapshot.values) {
            p.value.clone_from(v);
        }
        if let Some(a) = &snapshot.adam {
            self.adam.clone_from(a);
        }
    }
}

#[derive(Debug)]
pub struct TrainResult<T: Real> {
    pub weights: EncoderWeights<T>,
    pub history: Vec<EpochReport>,
    /// Best monitored validation score (the returned weights' score under
    /// the validation schedule).
    pub best_val: f64,
    pub rollbacks: Vec<RollbackCheck>,
}

fn run<T: Real>(
    mut weights: EncoderWeights<T>,
    vocab: &Vocabulary,
    splits: &DatasetSplit,
    config: &TrainConfig,
    policy: &FreezePolicy,
    schedule: Schedule,
) -> Result<TrainResult<T>, TrainError> {
    config.validate()?;
    apply_freeze_policy(&mut weights, policy);
    let mut trainer = EncoderTrainer::new(weights, vocab, splits, config)?;
    let st = run_schedule(&mut trainer, config, schedule)?;
    let mut weights = trainer.weights;
    weights.zero_grad();
    Ok(TrainResult {
        weights,
        history: st.history,
        best_val: st.best_val,
        rollbacks: st.rollbacks,
    })
}

/// Validation-driven training; returns the best-scoring weights.
pub fn train_v<T: Real>(
    weights: EncoderWeights<T>,
    vocab: &Vocabulary,
    splits: &DatasetSplit,
    config: &TrainConfig,
    policy: &FreezePolicy,
) -> Result<TrainResult<T>, TrainError> {
    run(weights, vocab, splits, config, policy, Schedule::Validation)
}

/// Constant learning rate for `max_epochs`; returns the final weights.
pub fn train_fixed<T: Real>(
    weights: EncoderWeights<T>,
    vocab: &Vocabulary,
    splits: &DatasetSplit,
    config: &TrainConfig,
    policy: &FreezePolicy,
) -> Result<TrainResult<T>, TrainError> {
    run(weights, vocab, splits, config, policy, Schedule::Fixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{stratified_split, synth_corpus};
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::build_vocab;

    fn setup(n_per_class: usize) -> (Vocabulary, DatasetSplit, EncoderConfig) {
        let corpus = synth_corpus(n_per_class, 11);
        let splits = stratified_split(&corpus, (0.6, 0.2, 0.2), 11).unwrap();
        let texts: Vec<&str> = splits.train.iter().map(|r| r.text.as_str()).collect();
        let vocab = build_vocab(&texts, 500, 1).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            max_len: 24,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            ..Default::default()
        };
        (vocab, splits, cfg)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            max_epochs: 6,
            batch_size: 8,
            lr0: 3e-3,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn empty_splits_rejected() {
        let (vocab, mut splits, cfg) = setup(10);
        let w = EncoderWeights::<f32>::init(cfg, 1).unwrap();
        splits.val.clear();
        let err = train_v(w, &vocab, &splits, &quick(), &FreezePolicy::new(0.0)).unwrap_err();
        assert!(matches!(err, TrainError::EmptySplit("validation")));
    }

    #[test]
    fn evaluate_rejects_empty() {
        let (vocab, _, cfg) = setup(5);
        let w = EncoderWeights::<f32>::init(cfg, 1).unwrap();
        assert!(matches!(evaluate(&w, &[], &vocab), Err(TrainError::EmptyDataset)));
        assert!(classify(&w, &[] as &[&str], &vocab).unwrap().is_empty());
    }

    #[test]
    fn fixed_and_v_agree_on_first_epoch() {
        let (vocab, splits, cfg) = setup(10);
        let w = EncoderWeights::<f32>::init(cfg, 1).unwrap();
        let p = FreezePolicy::new(0.5);
        let a = train_v(w.clone(), &vocab, &splits, &quick(), &p).unwrap();
        let b = train_fixed(w, &vocab, &splits, &quick(), &p).unwrap();
        let bits = |r: &EpochReport| (r.train_loss.to_bits(), r.train_acc.to_bits(), r.val_acc.to_bits());
        assert_eq!(bits(&a.history[0]), bits(&b.history[0]));
        assert_eq!(b.history.len(), quick().max_epochs);
    }

    #[test]
    fn returned_weights_score_best_and_frozen_untouched() {
        let (vocab, splits, cfg) = setup(10);
        let w = EncoderWeights::<f32>::init(cfg, 2).unwrap();
        let res = train_v(w.clone(), &vocab, &splits, &quick(), &FreezePolicy::new(0.75)).unwrap();
        let best = res.history.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max);
        let got = evaluate(&res.weights, &splits.val, &vocab).unwrap().accuracy;
        assert_eq!(got, best);
        for (p, q) in res.weights.params.iter().zip(&w.params) {
            if p.frozen {
                assert_eq!(p.value, q.value, "{}", p.name);
            }
        }
        assert!(res.weights.params.iter().filter(|p| p.frozen).count() > 0);
        for rc in &res.rollbacks {
            assert_eq!(rc.best.to_bits(), rc.reevaluated.to_bits());
        }
    }

    #[test]
    fn deterministic_history() {
        let (vocab, splits, cfg) = setup(8);
        let w = EncoderWeights::<f32>::init(cfg, 3).unwrap();
        let p = FreezePolicy::new(0.0);
        let a = train_v(w.clone(), &vocab, &splits, &quick(), &p).unwrap();
        let b = train_v(w, &vocab, &splits, &quick(), &p).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.weights, b.weights);
    }
}

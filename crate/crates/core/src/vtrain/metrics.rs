use serde::{Deserialize, Serialize};

use crate::corpus::Label;

/// Classification metrics. `confusion[true][predicted]`; per-class vectors
/// are indexed by [`Label::index`]. Ratios with a zero denominator are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: u64,
    pub accuracy: f64,
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub macro_f1: f64,
    pub confusion: [[u64; 3]; 3],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: [[u64; 3]; 3]) -> Metrics {
        let n: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..3).map(|k| confusion[k][k]).sum();
        let mut precision = [0.0; 3];
        let mut recall = [0.0; 3];
        let mut f1 = [0.0; 3];
        for k in 0..3 {
            let tp = confusion[k][k];
            let predicted: u64 = (0..3).map(|t| confusion[t][k]).sum();
            let actual: u64 = confusion[k].iter().sum();
            precision[k] = ratio(tp, predicted);
            recall[k] = ratio(tp, actual);
            let s = precision[k] + recall[k];
            f1[k] = if s == 0.0 {
                0.0
            } else {
                2.0 * precision[k] * recall[k] / s
            };
        }
        Metrics {
            n,
            accuracy: ratio(trace, n),
            precision,
            recall,
            f1,
            macro_f1: f1.iter().sum::<f64>() / 3.0,
            confusion,
        }
    }

    pub fn from_predictions(truth: &[Label], predicted: &[Label]) -> Metrics {
        let mut confusion = [[0u64; 3]; 3];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.index()][p.index()] += 1;
        }
        Metrics::from_confusion(confusion)
    }
}

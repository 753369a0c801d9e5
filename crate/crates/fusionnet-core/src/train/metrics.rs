//! Accuracy, per-class recall/precision and the 2x2 confusion matrix.

use serde::{Deserialize, Serialize};

/// Rows are true classes (cement first), columns predicted classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: [f64; 2],
    pub precision: [f64; 2],
    pub confusion: [[usize; 2]; 2],
    pub n: usize,
}

impl Metrics {
    pub fn from_confusion(confusion: [[usize; 2]; 2]) -> Metrics {
        let n: usize = confusion.iter().flatten().sum();
        let diag = confusion[0][0] + confusion[1][1];
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Metrics {
            accuracy: ratio(diag, n),
            recall: [
                ratio(confusion[0][0], confusion[0][0] + confusion[0][1]),
                ratio(confusion[1][1], confusion[1][0] + confusion[1][1]),
            ],
            precision: [
                ratio(confusion[0][0], confusion[0][0] + confusion[1][0]),
                ratio(confusion[1][1], confusion[0][1] + confusion[1][1]),
            ],
            confusion,
            n,
        }
    }
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

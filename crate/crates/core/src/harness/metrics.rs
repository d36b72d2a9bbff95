use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Classification metrics; weighted averages use class support as weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Contract("cannot evaluate an empty split".into()));
        }
        if truth.len() != predicted.len() {
            return Err(Error::Contract(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Domain(format!("class index out of range: {t} / {p}")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    /// Precision or recall of a class with no predictions or no support is 0.
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|row| row.len() != k) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Contract("cannot evaluate an empty split".into()));
        }
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let weighted = |f: fn(&ClassMetrics) -> f64| {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
        };
        Ok(Metrics {
            accuracy: ratio(correct, total),
            precision: weighted(|m| m.precision),
            // Support-weighted recall telescopes to correct / total; computing
            // it that way makes it equal to accuracy bit for bit.
            recall: ratio(correct, total),
            f1: weighted(|m| m.f1),
            per_class,
            confusion,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = Metrics::from_predictions(3, &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn two_class_hand_computed() {
        // Class 0: tp 3, support 4, predicted 5. Class 1: tp 4, support 6, predicted 5.
        let m = Metrics::from_confusion(vec![vec![3, 1], vec![2, 4]]).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-15);
        let (p0, r0, p1, r1) = (3.0 / 5.0, 3.0 / 4.0, 4.0 / 5.0, 4.0 / 6.0);
        let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
        assert!((m.precision - (0.4 * p0 + 0.6 * p1)).abs() < 1e-15);
        assert!((m.recall - (0.4 * r0 + 0.6 * r1)).abs() < 1e-15);
        assert!((m.recall - m.accuracy).abs() < 1e-15);
        assert!((m.f1 - (0.4 * f(p0, r0) + 0.6 * f(p1, r1))).abs() < 1e-15);
        assert!((m.precision - 0.72).abs() < 1e-12);
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(Metrics::from_predictions(2, &[], &[]).is_err());
    }

    #[test]
    fn mean_sd_basics() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}

//! Accuracy and macro-averaged precision, recall and F1, plus aggregation
//! across repeated runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimMismatch {
                expected: truth.len(),
                found: predicted.len(),
            });
        }
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for c in [truth, predicted] {
            if c >= self.num_classes {
                return Err(Error::UnknownClass(c));
            }
        }
        self.counts[truth * self.num_classes + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Zero-division yields 0; macro means run over every class of the matrix.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if cm.num_classes == 0 || total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let k = cm.num_classes;
    let mut trace = 0u64;
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = cm.get(c, c) as f64;
        trace += cm.get(c, c);
        let predicted: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let actual: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let p = ratio(tp, predicted as f64);
        let r = ratio(tp, actual as f64);
        p_sum += p;
        r_sum += r;
        f_sum += ratio(2.0 * p * r, p + r);
    }
    let k = k as f64;
    Ok(Metrics {
        accuracy: trace as f64 / total as f64,
        macro_precision: p_sum / k,
        macro_recall: r_sum / k,
        macro_f1: f_sum / k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and sample (n − 1) standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        // Second pass removes the rounding of the naive sum, so identical
        // values give exactly their value back and a std of 0.
        let rough = values.iter().sum::<f64>() / n;
        let mean = rough + values.iter().map(|v| v - rough).sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

type Field = (&'static str, fn(&Metrics) -> f64);

pub fn aggregate_runs(runs: &[Metrics]) -> BTreeMap<String, MeanStd> {
    let pick: [Field; 4] = [
        ("accuracy", |m| m.accuracy),
        ("macro_precision", |m| m.macro_precision),
        ("macro_recall", |m| m.macro_recall),
        ("macro_f1", |m| m.macro_f1),
    ];
    pick.iter()
        .filter_map(|(name, f)| {
            let values: Vec<f64> = runs.iter().map(f).collect();
            MeanStd::of(&values).map(|ms| (name.to_string(), ms))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1];
        let m = compute_metrics(&ConfusionMatrix::from_predictions(3, &y, &y).unwrap()).unwrap();
        assert_eq!(
            m,
            Metrics {
                accuracy: 1.0,
                macro_precision: 1.0,
                macro_recall: 1.0,
                macro_f1: 1.0
            }
        );
    }

    #[test]
    fn three_sample_example() {
        let cm = ConfusionMatrix::from_predictions(2, &[0, 0, 1], &[0, 1, 1]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 2.0 / 3.0);
        assert_eq!(m.macro_precision, 0.75);
        assert_eq!(m.macro_recall, 0.75);
        assert_eq!(m.macro_f1, 2.0 / 3.0);
    }

    #[test]
    fn never_predicted_class_scores_zero() {
        let cm = ConfusionMatrix::from_predictions(3, &[0, 1, 2], &[0, 1, 1]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        // Class 2: P = R = F1 = 0.
        assert!((m.macro_recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.macro_precision - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_errors() {
        assert!(compute_metrics(&ConfusionMatrix::new(3)).is_err());
        assert!(ConfusionMatrix::from_predictions(2, &[0], &[2]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let m = |a| Metrics {
            accuracy: a,
            macro_precision: a,
            macro_recall: a,
            macro_f1: a,
        };
        let agg = aggregate_runs(&[m(0.9), m(1.0)]);
        assert!((agg["accuracy"].mean - 0.95).abs() < 1e-15);
        assert!((agg["accuracy"].std - 0.5f64.sqrt() * 0.1).abs() < 1e-12);
        assert!((agg["accuracy"].std - 0.0707).abs() < 1e-4);
        let single = aggregate_runs(&[m(0.3)]);
        assert_eq!(single["macro_f1"], MeanStd { mean: 0.3, std: 0.0 });
        let same = aggregate_runs(&[m(0.4), m(0.4), m(0.4)]);
        assert_eq!(same["accuracy"].std, 0.0);
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_permutation_invariant(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            perm_seed in 0u64..1000,
        ) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let m = compute_metrics(&ConfusionMatrix::from_predictions(4, &truth, &pred).unwrap()).unwrap();
            for v in [m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let mut perm: Vec<usize> = (0..4).collect();
            crate::numerics::RngStream::new(perm_seed, 0).shuffle(&mut perm);
            let t2: Vec<usize> = truth.iter().map(|c| perm[*c]).collect();
            let p2: Vec<usize> = pred.iter().map(|c| perm[*c]).collect();
            let m2 = compute_metrics(&ConfusionMatrix::from_predictions(4, &t2, &p2).unwrap()).unwrap();
            prop_assert!((m.accuracy - m2.accuracy).abs() < 1e-12);
            prop_assert!((m.macro_precision - m2.macro_precision).abs() < 1e-12);
            prop_assert!((m.macro_recall - m2.macro_recall).abs() < 1e-12);
            prop_assert!((m.macro_f1 - m2.macro_f1).abs() < 1e-12);
        }
    }
}

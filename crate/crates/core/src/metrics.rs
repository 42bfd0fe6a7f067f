//! Classification metrics from a multiclass confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entry `(i, j)` counts samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::config("confusion matrix must be square"));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::config("truth and prediction lengths differ"));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::config(format!("class index out of range 0..{classes}")));
            }
            cm.record(t, p);
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|j| self.get(class, j)).sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, class)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }
}

/// Fraction of correct predictions; 0 for an empty matrix.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        0.0
    } else {
        cm.trace() as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    /// Set when the class was never predicted (precision forced to 0).
    pub precision_undefined: bool,
    /// Set when the class never occurs (recall forced to 0).
    pub recall_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn precision_recall_per_class(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let (precision, precision_undefined) = ratio(tp, cm.col_sum(c));
            let (recall, recall_undefined) = ratio(tp, cm.row_sum(c));
            ClassScores {
                precision,
                recall,
                precision_undefined,
                recall_undefined,
            }
        })
        .collect()
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class F1 averaged with true-class frequency weights.
pub fn f1_weighted(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    precision_recall_per_class(cm)
        .iter()
        .enumerate()
        .map(|(c, s)| cm.row_sum(c) as f64 / total as f64 * f1(s.precision, s.recall))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap()
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 7]]).unwrap();
        assert_eq!(accuracy(&cm), 1.0);
        assert_eq!(f1_weighted(&cm), 1.0);
        for s in precision_recall_per_class(&cm) {
            assert_eq!((s.precision, s.recall), (1.0, 1.0));
        }
    }

    #[test]
    fn zero_diagonal() {
        let cm = ConfusionMatrix::from_rows(&[vec![0, 3], vec![5, 0]]).unwrap();
        assert_eq!(accuracy(&cm), 0.0);
        assert_eq!(f1_weighted(&cm), 0.0);
    }

    #[test]
    fn hand_counted_two_class() {
        let cm = sample();
        assert_eq!(accuracy(&cm), 0.7);
        let s = precision_recall_per_class(&cm);
        assert_eq!((s[0].precision, s[0].recall), (0.6, 0.75));
        assert_eq!(s[1].precision, 0.8);
        assert!((s[1].recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_weighted_f1() {
        // Independent route: explicit one-vs-rest counts.
        let (tp0, fp0, fn0) = (3.0, 2.0, 1.0);
        let (tp1, fp1, fn1) = (4.0, 1.0, 2.0);
        let f = |tp: f64, fp: f64, fneg: f64| 2.0 * tp / (2.0 * tp + fp + fneg);
        let expected = 0.4 * f(tp0, fp0, fn0) + 0.6 * f(tp1, fp1, fn1);
        assert!((f1_weighted(&sample()) - expected).abs() < 1e-12);
        assert!((expected - 0.703_030_303_030_303).abs() < 1e-12);
    }

    #[test]
    fn never_predicted_class_is_flagged() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0], vec![3, 0]]).unwrap();
        let s = precision_recall_per_class(&cm);
        assert_eq!(s[1].precision, 0.0);
        assert!(s[1].precision_undefined);
        assert!(!s[0].precision_undefined);
    }

    #[test]
    fn single_present_class_always_predicted() {
        let cm = ConfusionMatrix::from_rows(&[vec![9, 0, 0], vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
        assert_eq!(f1_weighted(&cm), 1.0);
        assert_eq!(accuracy(&cm), 1.0);
    }

    #[test]
    fn binary_formula_matches_trace_ratio() {
        // Two classes, class 1 as positive: (TP+TN)/(TP+TN+FP+FN).
        let cm = sample();
        let (tn, fp, fneg, tp) = (3.0, 1.0, 2.0, 4.0);
        assert_eq!(accuracy(&cm), (tp + tn) / (tp + tn + fp + fneg));

        // Multiclass: one-vs-rest counts summed over classes (micro average).
        let cm = ConfusionMatrix::from_rows(&[vec![5, 1, 2], vec![0, 7, 3], vec![4, 1, 6]]).unwrap();
        let total = cm.total() as f64;
        let (mut tp_sum, mut fn_sum) = (0.0, 0.0);
        for c in 0..3 {
            let tp = cm.get(c, c) as f64;
            let fp = cm.col_sum(c) as f64 - tp;
            let fneg = cm.row_sum(c) as f64 - tp;
            let tn = total - tp - fp - fneg;
            tp_sum += tp;
            fn_sum += fneg;
            // A class's binary error counts each misprediction at most once.
            assert!((tp + tn) / total >= accuracy(&cm));
        }
        assert_eq!(accuracy(&cm), tp_sum / (tp_sum + fn_sum));
    }

    #[test]
    fn from_predictions_counts() {
        let cm = ConfusionMatrix::from_predictions(2, &[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0]).unwrap();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.get(1, 1), 2);
        assert!(ConfusionMatrix::from_predictions(2, &[2], &[0]).is_err());
    }
}

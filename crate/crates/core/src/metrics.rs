//! Accuracy and frequency-weighted F1 from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `confusion[true][pred]`
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub freq: Vec<f64>,
    pub weighted_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<MetricsReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Training(format!("metrics need equal non-empty label lists (got {} and {})", pred.len(), truth.len())));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Training(format!("label {bad} outside {classes} classes")));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let total = pred.len() as u64;
    let correct: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    let mut per_class_f1 = Vec::with_capacity(classes);
    let mut freq = Vec::with_capacity(classes);
    for k in 0..classes {
        let tp = confusion[k][k];
        let support: u64 = confusion[k].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
        let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
        per_class_f1.push(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) });
        freq.push(ratio(support, total));
    }
    let weighted_f1 = freq.iter().zip(&per_class_f1).map(|(f, s)| f * s).sum();
    Ok(MetricsReport { confusion, accuracy: ratio(correct, total), per_class_f1, freq, weighted_f1 })
}

/// Index of the largest value; ties keep the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fixture() {
        let m = metrics(&[0, 0, 1, 1], &[0, 0, 0, 1], 2).unwrap();
        assert_eq!(m.confusion, vec![vec![2, 1], vec![0, 1]]);
        assert!((m.per_class_f1[0] - 0.8).abs() < 1e-12);
        assert!((m.per_class_f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.freq, vec![0.75, 0.25]);
        assert!((m.weighted_f1 - 0.766_666_666_666_666_7).abs() < 1e-12);
        assert_eq!(m.accuracy, 0.75);
    }

    #[test]
    fn perfect_and_hopeless() {
        let m = metrics(&[2, 0, 1], &[2, 0, 1], 3).unwrap();
        assert_eq!((m.accuracy, m.weighted_f1), (1.0, 1.0));
        let m = metrics(&[1, 1, 1], &[0, 0, 0], 2).unwrap();
        assert_eq!((m.accuracy, m.weighted_f1), (0.0, 0.0));
        assert_eq!(m.freq, vec![1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(metrics(&[], &[], 2).is_err());
        assert!(metrics(&[0], &[0, 1], 2).is_err());
        assert!(metrics(&[2], &[0], 2).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[f64::NEG_INFINITY, -1.0]), 1);
    }
}

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub support: usize,
    pub precision: f64,
    /// Per-class accuracy, i.e. recall.
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub waa: f64,
    pub waf1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub minority_classes: Vec<usize>,
    /// Mean F1 over `minority_classes`.
    pub minority_f1: f64,
    pub metadata: RunMetadata,
}

pub fn compute_metrics(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: pred.len(),
        });
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        let bad = if t >= num_classes { t } else { p };
        if bad >= num_classes {
            return Err(Error::UnknownLabel {
                label: bad,
                num_classes,
            });
        }
        confusion[t][p] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                name: format!("class{c}"),
                support,
                precision,
                accuracy: recall,
                f1,
            }
        })
        .collect();
    let n = truth.len();
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if n == 0 {
            return 0.0;
        }
        per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / n as f64
    };
    let waa = weighted(|m| m.accuracy);
    let waf1 = weighted(|m| m.f1);
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        accuracy: ratio(correct, n),
        waa,
        waf1,
        per_class,
        confusion,
        minority_classes: Vec::new(),
        minority_f1: 0.0,
        metadata: RunMetadata::default(),
    })
}

impl MetricsReport {
    pub fn with_class_names(mut self, names: &[String]) -> Self {
        for (m, name) in self.per_class.iter_mut().zip(names) {
            m.name = name.clone();
        }
        self
    }

    pub fn with_minority(mut self, classes: Vec<usize>) -> Self {
        self.minority_f1 = if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(|&c| self.per_class[c].f1).sum::<f64>() / classes.len() as f64
        };
        self.minority_classes = classes;
        self
    }

    /// Report content with the wall-time field zeroed, as canonical JSON.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.metadata.wall_time_secs = 0.0;
        serde_json::to_string(&copy).expect("report serializes")
    }

    /// SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Metrics only: equal for runs that differ only in configuration.
    pub fn same_results(&self, other: &MetricsReport) -> bool {
        self.per_class == other.per_class
            && self.confusion == other.confusion
            && self.waa.to_bits() == other.waa.to_bits()
            && self.waf1.to_bits() == other.waf1.to_bits()
    }

    pub fn confusion_csv(&self) -> String {
        let names: Vec<&str> = self.per_class.iter().map(|m| m.name.as_str()).collect();
        let mut out = format!("true\\pred,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_hand_example() {
        let r = compute_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((r.waf1 - 0.733_333_333_333).abs() < 1e-9);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2];
        let r = compute_metrics(&y, &y, 3).unwrap();
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0));
        assert_eq!(r.waf1, 1.0);
    }

    #[test]
    fn absent_class_has_zero_support() {
        let r = compute_metrics(&[0, 1], &[0, 2], 3).unwrap();
        assert_eq!(r.per_class[2].support, 0);
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!((r.waa - 0.5).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            compute_metrics(&[0], &[0, 1], 2),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn hash_ignores_wall_time() {
        let mut a = compute_metrics(&[0, 1], &[0, 1], 2).unwrap();
        let h = a.hash();
        a.metadata.wall_time_secs = 12.5;
        assert_eq!(h, a.hash());
    }
}

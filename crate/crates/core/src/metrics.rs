//! Confusion matrices and per-class precision / recall / F1 reports.
//!
//! Any ratio with a zero denominator is reported as 0, so a class that is
//! never predicted shows `0.00` precision rather than an undefined value.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[truth][predicted]`
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], pred: &[usize], class_names: &[String]) -> Result<Self> {
        let c = class_names.len();
        if truth.len() != pred.len() {
            return Err(Error::Validation(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut counts = vec![vec![0u64; c]; c];
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            if t >= c || p >= c {
                return Err(Error::Validation(format!(
                    "pair {i} ({t}, {p}) out of range for {c} classes"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(Self {
            counts,
            class_names: class_names.to_vec(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }
}

/// Confusion matrix with generated class names `0..C`.
pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    let names: Vec<String> = (0..classes).map(|i| i.to_string()).collect();
    ConfusionMatrix::new(truth, pred, &names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn report(cm: &ConfusionMatrix) -> ClassReport {
    let c = cm.num_classes();
    let classes: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let predicted: u64 = (0..c).map(|t| cm.counts[t][k]).sum();
            let support: u64 = cm.counts[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                class: cm.class_names[k].clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if c == 0 {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / c as f64
        }
    };
    ClassReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: ratio(cm.trace(), cm.total()),
        classes,
    }
}

impl ClassReport {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|m| m.class == name)
    }

    /// Fixed-width table with 2-decimal values, one row per class plus a macro row.
    pub fn format_table(&self, title: &str) -> String {
        let width = self
            .classes
            .iter()
            .map(|m| m.class.len())
            .chain([5, title.len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
            title, "Precision", "Recall", "F1-Score", "Support"
        );
        for m in &self.classes {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>9}",
                m.class, m.precision, m.recall, m.f1, m.support
            );
        }
        let support: u64 = self.classes.iter().map(|m| m.support).sum();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>9}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1, support
        );
        let _ = writeln!(out, "accuracy {:.4}", self.accuracy);
        out
    }

    /// `class,precision,recall,f1,support` at full precision, classes then `macro`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for m in &self.classes {
            let _ = writeln!(
                out,
                "{},{:.12},{:.12},{:.12},{}",
                m.class, m.precision, m.recall, m.f1, m.support
            );
        }
        let support: u64 = self.classes.iter().map(|m| m.support).sum();
        let _ = writeln!(
            out,
            "macro,{:.12},{:.12},{:.12},{}",
            self.macro_precision, self.macro_recall, self.macro_f1, support
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_tallies() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.counts[i][j], u64::from(i == j));
            }
        }
        let cm = confusion(&[0, 1, 1, 2], &[0, 1, 0, 2], 3).unwrap();
        assert_eq!(cm.counts[1][0], 1);
        let cm = confusion(&[], &[], 2).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[0], &[3], 2).is_err());
    }

    #[test]
    fn hand_enumerated_report() {
        let r = report(&confusion(&[0, 1, 1, 2], &[0, 1, 0, 2], 3).unwrap());
        let c = &r.classes;
        assert_eq!((c[0].precision, c[0].recall), (0.5, 1.0));
        assert!((c[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((c[1].precision, c[1].recall), (1.0, 0.5));
        assert!((c[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((c[2].precision, c[2].recall, c[2].f1), (1.0, 1.0, 1.0));
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn zero_division_conventions() {
        // Class 2 is absent from both; class 1 is true but never predicted.
        let r = report(&confusion(&[0, 1, 0], &[0, 0, 0], 3).unwrap());
        assert_eq!((r.classes[2].precision, r.classes[2].recall, r.classes[2].f1), (0.0, 0.0, 0.0));
        assert_eq!((r.classes[1].precision, r.classes[1].recall, r.classes[1].f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn table_layout() {
        let names: Vec<String> = ["brute_force", "http_flood", "normal", "tcp_flood", "udp_flood"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let truth = [0, 1, 2, 3, 4, 0, 0];
        let pred = [0, 1, 2, 3, 4, 1, 0];
        let r = report(&ConfusionMatrix::new(&truth, &pred, &names).unwrap());
        let table = r.format_table("DNN");
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 1 + 5 + 1 + 1);
        assert!(lines[1].starts_with("brute_force"));
        assert!(lines[1].contains("0.67"), "{}", lines[1]);
        assert!(lines[6].starts_with("macro"));

        let csv = r.to_csv();
        let row = csv.lines().nth(1).unwrap();
        assert!(row.contains("0.666666666667"), "{row}");
    }
}

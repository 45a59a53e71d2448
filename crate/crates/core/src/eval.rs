//! Confusion matrices, IoU and report emission.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::synthdata::IGNORE;

/// `counts[gt][pred]` over `n` classes (background included).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Pixels whose ground truth is [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        // validate first so a bad pixel leaves the matrix untouched
        for (((row, col), &g), &p) in gt.indexed_iter().zip(pred.iter()) {
            if g == IGNORE {
                continue;
            }
            for label in [g, p] {
                if label as usize >= self.n {
                    return Err(Error::LabelOutOfRange {
                        row,
                        col,
                        label,
                        classes: self.n,
                    });
                }
            }
        }
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            if g != IGNORE {
                self.counts[g as usize * self.n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape(format!("merging {} classes into {}", other.n, self.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub miou: f64,
    /// `None` where the class has an empty union and is left out of the mean.
    pub per_class: Vec<Option<f64>>,
}

/// Per-class `TP / (TP + FP + FN)` and their mean over classes with a
/// non-empty union.
pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    if cm.total() == 0 {
        return Err(Error::Invalid("confusion matrix is empty".into()));
    }
    let n = cm.n;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..n).filter(|&g| g != c).map(|g| cm.get(g, c)).sum();
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(IouReport { miou, per_class })
}

pub fn accumulate(mut cm: ConfusionMatrix, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<ConfusionMatrix> {
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// Plain-text table, one row per named result.
pub fn format_table(header: &[&str], rows: &[(String, Vec<Option<f64>>)]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|(n, _)| n.len()).chain([header[0].len()]).max().unwrap_or(8);
    let _ = write!(out, "{:<width$}", header[0]);
    for h in &header[1..] {
        let _ = write!(out, " | {h:>8}");
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(width + 11 * (header.len() - 1)));
    for (name, vals) in rows {
        let _ = write!(out, "{name:<width$}");
        for v in vals {
            match v {
                Some(x) => {
                    let _ = write!(out, " | {:>8.2}", 100.0 * x);
                }
                None => {
                    let _ = write!(out, " | {:>8}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// `key=value` lines; IoUs as fractions in `[0, 1]`.
pub fn format_metrics(prefix: &str, report: &IouReport, class_names: &[String]) -> String {
    let mut out = format!("{prefix}.miou={:.6}\n", report.miou);
    for (c, v) in report.per_class.iter().enumerate() {
        let name = if c == 0 {
            "background"
        } else {
            class_names.get(c - 1).map(String::as_str).unwrap_or("?")
        };
        match v {
            Some(x) => {
                let _ = writeln!(out, "{prefix}.iou.{name}={x:.6}");
            }
            None => {
                let _ = writeln!(out, "{prefix}.iou.{name}=nan");
            }
        }
    }
    out
}

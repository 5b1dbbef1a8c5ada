//! Segmentation and regression metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
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

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per scored pixel; pixels whose truth is `ignore` are skipped.
    pub fn accumulate(&mut self, pred: &[usize], truth: &[usize], ignore: Option<usize>) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions vs {} labels", pred.len(), truth.len())));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) == ignore {
                continue;
            }
            for label in [t, p] {
                if label >= k {
                    return Err(Error::LabelOutOfRange { label, num_classes: k });
                }
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) != ignore {
                self.counts[t * k + p] += 1;
            }
        }
        Ok(())
    }

    /// Sums two partial matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn support(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    fn predicted(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, c)).sum()
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::EmptyConfusion)
        } else {
            Ok(())
        }
    }

    /// `TP / (TP + FP + FN)`; `None` when the class never occurs in truth or prediction.
    pub fn iou(&self, c: usize) -> Result<Option<f64>> {
        self.nonempty()?;
        let tp = self.get(c, c);
        let denom = self.support(c) + self.predicted(c) - tp;
        Ok((denom > 0).then(|| tp as f64 / denom as f64))
    }

    fn present(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| self.support(c) > 0).collect()
    }

    /// Mean IoU over classes with ground-truth support.
    pub fn miou(&self) -> Result<f64> {
        self.nonempty()?;
        let present = self.present();
        let sum: f64 = present.iter().map(|&c| self.iou(c).map(|v| v.unwrap_or(0.0))).sum::<Result<f64>>()?;
        Ok(sum / present.len() as f64)
    }

    /// Mean per-class recall over classes with ground-truth support.
    pub fn macc(&self) -> Result<f64> {
        self.nonempty()?;
        let present = self.present();
        let sum: f64 = present.iter().map(|&c| self.get(c, c) as f64 / self.support(c) as f64).sum();
        Ok(sum / present.len() as f64)
    }

    /// Trace over total.
    pub fn overall_acc(&self) -> Result<f64> {
        self.nonempty()?;
        let trace: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    pub fn summary(&self) -> Result<SegmentationSummary> {
        Ok(SegmentationSummary {
            iou: (0..self.num_classes).map(|c| self.iou(c)).collect::<Result<_>>()?,
            miou: self.miou()?,
            macc: self.macc()?,
            overall_acc: self.overall_acc()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSummary {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub overall_acc: f64,
}

impl SegmentationSummary {
    pub fn csv_header(num_classes: usize) -> String {
        let mut h: Vec<String> = (0..num_classes).map(|c| format!("iou_{c}")).collect();
        h.extend(["miou", "macc", "overall_acc"].map(String::from));
        h.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cells: Vec<String> = self
            .iou
            .iter()
            .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "nan".into()))
            .collect();
        cells.extend([self.miou, self.macc, self.overall_acc].map(|v| format!("{v:.6}")));
        cells.join(",")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
}

/// Elementwise MSE and MAE, skipping pixels where `valid` is false.
pub fn regression_metrics(pred: &[f64], truth: &[f64], valid: Option<&[bool]>) -> Result<RegressionMetrics> {
    if pred.len() != truth.len() || valid.is_some_and(|v| v.len() != pred.len()) {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), truth.len())));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for i in 0..pred.len() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        let d = pred[i] - truth[i];
        se += d * d;
        ae += d.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("no valid pixels to score".into()));
    }
    Ok(RegressionMetrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    })
}

/// Aligned text table: one row per model, per-class IoU then mIoU, mAcc, OA.
pub fn segmentation_table(rows: &[(String, SegmentationSummary)], class_names: &[String]) -> String {
    let mut headers = vec!["model".to_string()];
    headers.extend(class_names.iter().map(|n| format!("IoU ({n})")));
    headers.extend(["mIoU", "mAcc", "OA"].map(String::from));
    let mut cells: Vec<Vec<String>> = vec![headers];
    for (name, s) in rows {
        let mut r = vec![name.clone()];
        r.extend(s.iou.iter().map(|v| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())));
        r.extend([s.miou, s.macc, s.overall_acc].map(|v| format!("{:.2}", 100.0 * v)));
        cells.push(r);
    }
    render(&cells)
}

/// Aligned text table of regression rows.
pub fn regression_table(rows: &[(String, RegressionMetrics)]) -> String {
    let mut cells = vec![vec!["model".to_string(), "MSE".into(), "MAE".into()]];
    for (name, m) in rows {
        cells.push(vec![name.clone(), format!("{:.4}", m.mse), format!("{:.4}", m.mae)]);
    }
    render(&cells)
}

fn render(cells: &[Vec<String>]) -> String {
    let cols = cells[0].len();
    let widths: Vec<usize> = (0..cols).map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(s, "{}", line.join("  "));
        if i == 0 {
            let _ = writeln!(s, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    s
}

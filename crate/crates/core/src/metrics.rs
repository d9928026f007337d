//! Overlap metrics on the 0-100 scale and fold-level aggregation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion_counts(pred: &Volume, gt: &Volume) -> Result<Confusion> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!("prediction {} vs ground truth {}", pred.shape(), gt.shape())));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.as_labels()?.iter().zip(gt.as_labels()?) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub dsc: f64,
    pub jaccard: f64,
    pub recall: f64,
    pub precision: f64,
}

impl CaseScore {
    /// Scores from confusion counts. A ratio with an empty denominator is
    /// vacuously perfect (100).
    pub fn from_confusion(case_id: impl Into<String>, c: &Confusion) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 100.0 } else { 100.0 * num as f64 / den as f64 };
        Self {
            case_id: case_id.into(),
            dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            jaccard: ratio(c.tp, c.tp + c.fp + c.fn_),
            recall: ratio(c.tp, c.tp + c.fn_),
            precision: ratio(c.tp, c.tp + c.fp),
        }
    }

    fn values(&self) -> [f64; 4] {
        [self.dsc, self.jaccard, self.recall, self.precision]
    }
}

pub fn score_case(case_id: &str, pred: &Volume, gt: &Volume) -> Result<CaseScore> {
    Ok(CaseScore::from_confusion(case_id, &confusion_counts(pred, gt)?))
}

/// Mean and sample standard deviation of each metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub n: usize,
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl FoldSummary {
    pub fn mean_dsc(&self) -> f64 {
        self.mean[0]
    }
}

pub fn aggregate_fold(scores: &[CaseScore]) -> Result<FoldSummary> {
    if scores.is_empty() {
        return Err(Error::Empty("score list"));
    }
    let n = scores.len();
    let mut mean = [0.0; 4];
    for s in scores {
        for (m, v) in mean.iter_mut().zip(s.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = [0.0; 4];
    if n > 1 {
        for s in scores {
            for ((acc, v), m) in std.iter_mut().zip(s.values()).zip(mean) {
                *acc += (v - m).powi(2);
            }
        }
        std.iter_mut().for_each(|v| *v = (*v / (n - 1) as f64).sqrt());
    }
    Ok(FoldSummary { n, mean, std })
}

pub const CSV_HEADER: &str = "case_id,dsc,jaccard,recall,precision";

/// Per-case rows followed by `mean` and `std` footer rows, two decimals.
pub fn format_report_csv(scores: &[CaseScore]) -> Result<String> {
    let summary = aggregate_fold(scores)?;
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    let row = |out: &mut String, id: &str, v: [f64; 4]| {
        writeln!(out, "{id},{:.2},{:.2},{:.2},{:.2}", v[0], v[1], v[2], v[3]).unwrap();
    };
    for s in scores {
        row(&mut out, &s.case_id, s.values());
    }
    row(&mut out, "mean", summary.mean);
    row(&mut out, "std", summary.std);
    Ok(out)
}

pub fn write_report_csv(scores: &[CaseScore], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_report_csv(scores)?).map_err(|e| Error::io(path, e))
}

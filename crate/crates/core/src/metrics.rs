//! Recall-based evaluation: WAR (overall accuracy) and UAR (mean per-class
//! recall).
//!
//! Classes with no true samples are left out of the UAR mean instead of
//! counting as zero recall.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// `counts[i][j]` = number of samples of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
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

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::LengthMismatch {
                what: "confusion counts",
                left: counts.len(),
                right: classes * classes,
            });
        }
        Ok(Self { classes, counts })
    }

    pub fn compute(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "predictions and labels",
                left: preds.len(),
                right: labels.len(),
            });
        }
        let mut cm = Self::new(classes);
        for (&p, &l) in preds.iter().zip(labels) {
            cm.record(l, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, label: usize, pred: usize) -> Result<()> {
        for v in [label, pred] {
            if v >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: v,
                    classes: self.classes,
                });
            }
        }
        self.counts[label * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, label: usize) -> u64 {
        self.counts[label * self.classes..(label + 1) * self.classes].iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Recall of every class, `None` where the class has no samples.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let support = self.support(i);
                (support > 0).then(|| self.get(i, i) as f64 / support as f64)
            })
            .collect()
    }

    /// Weighted average recall, in percent.
    pub fn war(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyInput("confusion matrix has no samples"));
        }
        Ok(100.0 * self.correct() as f64 / total as f64)
    }

    /// Unweighted average recall over classes with support, in percent.
    pub fn uar(&self) -> Result<f64> {
        let recalls: Vec<f64> = self.per_class_recall().into_iter().flatten().collect();
        if recalls.is_empty() {
            return Err(Error::EmptyInput("confusion matrix has no samples"));
        }
        Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    /// Confusion matrix as CSV followed by per-class recall and a summary line.
    pub fn report_csv(&self) -> Result<String> {
        let mut out = String::from("true\\pred");
        for j in 0..self.classes {
            write!(out, ",{j}").unwrap();
        }
        out.push('\n');
        for i in 0..self.classes {
            write!(out, "{i}").unwrap();
            for j in 0..self.classes {
                write!(out, ",{}", self.get(i, j)).unwrap();
            }
            out.push('\n');
        }
        out.push_str("recall");
        for r in self.per_class_recall() {
            match r {
                Some(r) => write!(out, ",{:.4}", 100.0 * r).unwrap(),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
        writeln!(out, "WAR,{:.4},UAR,{:.4}", self.war()?, self.uar()?).unwrap();
        Ok(out)
    }
}

/// One row of a predictions file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub clip_id: String,
    pub true_label: usize,
    pub pred_label: usize,
}

pub fn write_predictions(path: &Path, rows: &[Prediction]) -> Result<()> {
    let mut out = String::from("clip_id,true_label,pred_label\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.clip_id, r.true_label, r.pred_label).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("clip_id,true_label,pred_label") {
        return Err(Error::format(path, "missing predictions header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad label in {line:?}")));
            match f[..] {
                [id, t, p] => Ok(Prediction {
                    clip_id: id.to_string(),
                    true_label: parse(t)?,
                    pred_label: parse(p)?,
                }),
                _ => Err(Error::format(path, format!("expected 3 fields in {line:?}"))),
            }
        })
        .collect()
}

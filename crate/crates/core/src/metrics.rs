//! Confusion matrices and the unweighted F1 / recall scores.

use serde::Serialize;

use crate::error::{Error, Result};

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// A macro-averaged score with the classes that had nothing to score.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Score {
    pub value: f64,
    /// Classes that contributed 0 because their denominator was 0.
    pub flagged: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::contract("confusion matrix must be square"));
        }
        Ok(Self {
            classes: n,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::contract(format!(
                "{} labels against {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::contract(format!(
                "class pair ({truth}, {predicted}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::contract("merging confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
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

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|j| self.get(c, j)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, c)).sum()
    }

    /// CSV with a header row of predicted-class ids.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.classes {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for i in 0..self.classes {
            s.push_str(&i.to_string());
            for j in 0..self.classes {
                s.push_str(&format!(",{}", self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }
}

fn macro_average(cm: &ConfusionMatrix, per_class: impl Fn(usize) -> (u64, u64)) -> Score {
    let mut flagged = Vec::new();
    let mut sum = 0.0;
    for c in 0..cm.classes {
        let (num, den) = per_class(c);
        if den == 0 {
            flagged.push(c);
        } else {
            sum += num as f64 / den as f64;
        }
    }
    Score {
        value: if cm.classes == 0 { 0.0 } else { sum / cm.classes as f64 },
        flagged,
    }
}

/// Mean over classes of `2·TP / (2·TP + FP + FN)`.
pub fn uf1(cm: &ConfusionMatrix) -> Score {
    macro_average(cm, |c| {
        let tp = cm.get(c, c);
        let fp = cm.col_sum(c) - tp;
        let fn_ = cm.row_sum(c) - tp;
        (2 * tp, 2 * tp + fp + fn_)
    })
}

/// Mean over classes of `TP / row sum`.
pub fn uar(cm: &ConfusionMatrix) -> Score {
    macro_average(cm, |c| (cm.get(c, c), cm.row_sum(c)))
}

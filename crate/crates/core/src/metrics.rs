//! Confusion-matrix metrics: balanced accuracy, Cohen's kappa and
//! support-weighted F1. Per-class ratios with a zero denominator resolve
//! to 0 and set the report's warning flag.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let m = counts.len();
        if counts.iter().any(|r| r.len() != m) {
            return Err(Error::Validation("confusion matrix must be square".into()));
        }
        Ok(Self { classes: m, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

pub fn confusion_from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Validation(format!(
            "{} labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::Validation(format!("label pair ({t}, {p}) outside [0, {classes})")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64, warned: &mut bool) -> f64 {
    if den == 0 {
        *warned = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn require_samples(cm: &ConfusionMatrix) -> Result<()> {
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerClass {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub f1: Vec<f64>,
    pub zero_division: bool,
}

pub fn per_class(cm: &ConfusionMatrix) -> PerClass {
    let m = cm.classes;
    let mut warned = false;
    let mut out = PerClass { recall: vec![0.0; m], precision: vec![0.0; m], f1: vec![0.0; m], zero_division: false };
    for c in 0..m {
        let tp = cm.counts[c][c];
        let r = ratio(tp, cm.row_sum(c), &mut warned);
        let p = ratio(tp, cm.col_sum(c), &mut warned);
        out.recall[c] = r;
        out.precision[c] = p;
        out.f1[c] = if p + r == 0.0 {
            warned = true;
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
    }
    out.zero_division = warned;
    out
}

pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    require_samples(cm)?;
    let pc = per_class(cm);
    Ok(pc.recall.iter().sum::<f64>() / cm.classes as f64)
}

pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    require_samples(cm)?;
    let n = cm.total() as f64;
    let diag: u64 = (0..cm.classes).map(|i| cm.counts[i][i]).sum();
    let p_o = diag as f64 / n;
    let p_e: f64 = (0..cm.classes).map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64).sum::<f64>() / (n * n);
    if p_e == 1.0 {
        return Err(Error::UndefinedMetric("kappa undefined when chance agreement is 1".into()));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    require_samples(cm)?;
    let n = cm.total() as f64;
    let pc = per_class(cm);
    Ok((0..cm.classes).map(|c| cm.row_sum(c) as f64 / n * pc.f1[c]).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    /// `None` when chance agreement is 1.
    pub kappa: Option<f64>,
    pub weighted_f1: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub f1: Vec<f64>,
    pub zero_division_warning: bool,
    pub cm: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let balanced_accuracy = balanced_accuracy(&cm)?;
        let kappa = match cohen_kappa(&cm) {
            Ok(k) => Some(k),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let weighted_f1 = weighted_f1(&cm)?;
        let pc = per_class(&cm);
        Ok(Self {
            balanced_accuracy,
            kappa,
            weighted_f1,
            recall: pc.recall,
            precision: pc.precision,
            f1: pc.f1,
            zero_division_warning: pc.zero_division,
            cm,
        })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        Self::from_confusion(confusion_from_predictions(truth, pred, classes)?)
    }

    /// Kappa with the undefined case mapped to `-inf` for ranking.
    pub fn kappa_or_neg_inf(&self) -> f64 {
        self.kappa.unwrap_or(f64::NEG_INFINITY)
    }

    fn columns(&self) -> Vec<(String, serde_json::Value)> {
        use serde_json::Value;
        let num = |v: f64| serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number);
        let mut cols = vec![
            ("ba".to_string(), num(self.balanced_accuracy)),
            ("kappa".to_string(), self.kappa.map_or(Value::Null, num)),
            ("wf1".to_string(), num(self.weighted_f1)),
        ];
        for (name, vals) in [("recall", &self.recall), ("precision", &self.precision), ("f1", &self.f1)] {
            for (i, v) in vals.iter().enumerate() {
                cols.push((format!("{name}_{i}"), num(*v)));
            }
        }
        cols.push(("zero_division_warning".into(), Value::Bool(self.zero_division_warning)));
        cols
    }

    /// Flat JSON object with keys `ba`, `kappa`, `wf1`, then per-class
    /// `recall_i`, `precision_i`, `f1_i`.
    pub fn to_flat_json(&self) -> serde_json::Value {
        serde_json::Value::Object(self.columns().into_iter().collect())
    }

    pub fn csv_header(&self) -> String {
        self.columns().into_iter().map(|(k, _)| k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.columns()
            .into_iter()
            .map(|(_, v)| match v {
                serde_json::Value::Null => String::new(),
                other => other.to_string(),
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

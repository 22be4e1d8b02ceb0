//! Classification metrics: confusion matrix, per-class precision/recall/F1
//! with macro mean and spread, accuracy, and one-vs-rest AUC.
//!
//! Conventions:
//! - undefined precision/recall (0/0) is reported as 0 and still included in
//!   the macro mean, so all-zero classes drag the average down;
//! - the macro spread is the sample standard deviation over the K per-class
//!   values (divisor K-1);
//! - AUC uses the Mann-Whitney rank statistic with ties counted half; a class
//!   absent from the labels has undefined AUC and is excluded from the macro.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// K x K counts indexed by `(true class, predicted class)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_pairs(labels: &[usize], predictions: &[usize], k: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Metrics(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(k);
        for (i, (&t, &p)) in labels.iter().zip(predictions).enumerate() {
            if t >= k || p >= k {
                return Err(Error::Metrics(format!(
                    "pair {} out of range for {} classes: ({}, {})",
                    i, k, t, p
                )));
            }
            cm.counts[t * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> usize {
        self.counts[true_class * self.k + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.k).map(|i| self.at(i, i)).sum()
    }

    /// CSV with a header row of predicted-class names and one row per true
    /// class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for t in 0..self.k {
            out.push_str(&class_names[t]);
            for p in 0..self.k {
                out.push_str(&format!(",{}", self.at(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples whose true class is this one.
    pub support: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroStat {
    pub mean: f64,
    pub sd: f64,
}

/// Unweighted mean and sample standard deviation (divisor K-1) of per-class
/// values. A single value has spread 0.
pub fn macro_stat(values: &[f64]) -> MacroStat {
    let k = values.len();
    if k == 0 {
        return MacroStat { mean: 0.0, sd: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return MacroStat { mean, sd: 0.0 };
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    MacroStat { mean, sd: (ss / (k as f64 - 1.0)).sqrt() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClasswiseReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: MacroStat,
    pub macro_recall: MacroStat,
    pub macro_f1: MacroStat,
    pub accuracy: f64,
}

/// Per-class precision/recall/F1 from a confusion matrix, with 0/0 -> 0,
/// macro statistics over every class (zeros included), and trace accuracy.
pub fn classwise_report(cm: &ConfusionMatrix) -> ClasswiseReport {
    let k = cm.k();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.at(c, c);
        let fp: usize = (0..k).filter(|&t| t != c).map(|t| cm.at(t, c)).sum();
        let fn_: usize = (0..k).filter(|&p| p != c).map(|p| cm.at(c, p)).sum();
        let precision = ratio_or_zero(tp, tp + fp);
        let recall = ratio_or_zero(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { precision, recall, f1, support: tp + fn_ });
    }
    let col = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).collect::<Vec<_>>();
    let total = cm.total();
    ClasswiseReport {
        macro_precision: macro_stat(&col(|m| m.precision)),
        macro_recall: macro_stat(&col(|m| m.recall)),
        macro_f1: macro_stat(&col(|m| m.f1)),
        accuracy: if total == 0 { 0.0 } else { cm.trace() as f64 / total as f64 },
        per_class,
    }
}

fn ratio_or_zero(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Exact fraction of matching pairs.
pub fn accuracy(labels: &[usize], predictions: &[usize]) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(Error::Metrics(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metrics("accuracy of an empty set is undefined".into()));
    }
    let hits = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    /// One-vs-rest AUC per class; `None` when the class has no positives or
    /// no negatives in the labels.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the defined classes.
    pub macro_auc: f64,
}

/// One-vs-rest AUC per class from an `(N, K)` score matrix. Only the ordering
/// within each class's column matters, so any strictly monotone transform of
/// the scores leaves the result unchanged.
pub fn roc_auc_ovr(scores: &Tensor, labels: &[usize]) -> Result<AucReport> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Metrics(format!(
            "score matrix {:?} does not match {} labels",
            s,
            labels.len()
        )));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Metrics(format!("label {} out of range for {} classes", bad, k)));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let n_pos = labels.iter().filter(|&&y| y == c).count();
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            per_class.push(None);
            continue;
        }
        // Mann-Whitney: AUC = (rank sum of positives - n_pos(n_pos+1)/2)
        // / (n_pos * n_neg), with average ranks over tied scores.
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            scores
                .at(&[a, c])
                .partial_cmp(&scores.at(&[b, c]))
                .expect("scores are finite")
        });
        let mut rank_sum_pos = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && scores.at(&[idx[j + 1], c]) == scores.at(&[idx[i], c]) {
                j += 1;
            }
            // Tied block idx[i..=j] shares the average 1-based rank.
            let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
            for &row in &idx[i..=j] {
                if labels[row] == c {
                    rank_sum_pos += avg_rank;
                }
            }
            i = j + 1;
        }
        let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);
        per_class.push(Some(auc));
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|a| *a).collect();
    if defined.is_empty() {
        return Err(Error::Metrics(
            "AUC undefined: labels contain a single class, so every one-vs-rest split is degenerate".into(),
        ));
    }
    Ok(AucReport { macro_auc: defined.iter().sum::<f64>() / defined.len() as f64, per_class })
}

/// Full evaluation bundle for one prediction set.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub classwise: ClasswiseReport,
    pub auc: Option<AucReport>,
}

/// Build the full report. Predictions are argmax rows of `scores` when
/// given, otherwise supplied directly.
pub fn metrics_report(
    labels: &[usize],
    predictions: &[usize],
    scores: Option<&Tensor>,
    class_names: &[String],
) -> Result<MetricsReport> {
    let k = class_names.len();
    let confusion = ConfusionMatrix::from_pairs(labels, predictions, k)?;
    let classwise = classwise_report(&confusion);
    let auc = match scores {
        Some(sc) => Some(roc_auc_ovr(sc, labels)?),
        None => None,
    };
    Ok(MetricsReport { class_names: class_names.to_vec(), confusion, classwise, auc })
}

/// Structured-text rendering: `key: value` summary lines followed by a
/// per-class table.
pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    let cw = &report.classwise;
    out.push_str(&format!("samples: {}\n", report.confusion.total()));
    out.push_str(&format!("classes: {}\n", report.class_names.len()));
    out.push_str(&format!("accuracy: {:.6}\n", cw.accuracy));
    for (name, stat) in [
        ("macro_precision", cw.macro_precision),
        ("macro_recall", cw.macro_recall),
        ("macro_f1", cw.macro_f1),
    ] {
        out.push_str(&format!("{}: {:.6}\n", name, stat.mean));
        out.push_str(&format!("{}_sd: {:.6}\n", name, stat.sd));
    }
    if let Some(auc) = &report.auc {
        out.push_str(&format!("macro_auc: {:.6}\n", auc.macro_auc));
    }
    out.push('\n');
    out.push_str("class precision recall f1 support auc\n");
    for (i, m) in cw.per_class.iter().enumerate() {
        let auc_cell = match report.auc.as_ref().and_then(|a| a.per_class[i]) {
            Some(v) => format!("{:.6}", v),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {} {}\n",
            report.class_names[i], m.precision, m.recall, m.f1, m.support, auc_cell
        ));
    }
    out
}

//! Combining per-model softmax prediction matrices: plain averaging,
//! weighted averaging, and a stacked meta-learner.
//!
//! A prediction matrix is the per-sample class-probability table one model
//! produced over a fixed evaluation set. Matrices being combined must agree
//! on the sample list (paths and labels) and the class ordering. All
//! combination outputs stay row-stochastic by convexity or by construction.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Row-sum slack tolerated by the in-memory constructor.
pub const ROW_SUM_TOL: f64 = 1e-4;
/// Row-sum slack tolerated when parsing files.
pub const ROW_SUM_FILE_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct PredictionMatrix {
    /// Free-form provenance tag (model name, ensemble description, ...).
    pub tag: String,
    pub class_names: Vec<String>,
    pub paths: Vec<String>,
    pub labels: Vec<usize>,
    rows: Tensor,
}

impl PredictionMatrix {
    pub fn new(
        tag: String,
        class_names: Vec<String>,
        paths: Vec<String>,
        labels: Vec<usize>,
        rows: Tensor,
    ) -> Result<Self> {
        let k = class_names.len();
        let n = paths.len();
        if rows.shape() != [n, k] {
            return Err(Error::Predictions(format!(
                "rows shaped {:?} but {} paths and {} classes",
                rows.shape(),
                n,
                k
            )));
        }
        if labels.len() != n {
            return Err(Error::Predictions(format!("{} labels for {} rows", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Predictions(format!("label {} out of range for {} classes", bad, k)));
        }
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..k {
                let p = rows.at(&[i, j]);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Predictions(format!(
                        "row {}: probability {} outside [0,1]",
                        i, p
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Predictions(format!("row {}: probabilities sum to {}", i, sum)));
            }
        }
        Ok(PredictionMatrix { tag, class_names, paths, labels, rows })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.len()).map(|i| crate::train::argmax_row(&self.rows, i)).collect()
    }

    /// Accuracy of the row-argmax decision against the stored labels.
    pub fn accuracy(&self) -> Result<f64> {
        crate::metrics::accuracy(&self.labels, &self.argmax_rows())
    }
}

/// All matrices must share sample identity and class ordering; the first
/// divergence is reported.
pub fn check_conformant(mats: &[&PredictionMatrix]) -> Result<()> {
    let first = mats
        .first()
        .ok_or_else(|| Error::Predictions("no prediction matrices given".into()))?;
    for (mi, m) in mats.iter().enumerate().skip(1) {
        if m.class_names != first.class_names {
            return Err(Error::Predictions(format!(
                "matrix {} class ordering differs from matrix 0",
                mi
            )));
        }
        if m.len() != first.len() {
            return Err(Error::Predictions(format!(
                "matrix {} has {} rows, matrix 0 has {}",
                mi,
                m.len(),
                first.len()
            )));
        }
        for i in 0..m.len() {
            if m.paths[i] != first.paths[i] {
                return Err(Error::Predictions(format!(
                    "matrix {} row {}: path '{}' differs from '{}'",
                    mi, i, m.paths[i], first.paths[i]
                )));
            }
            if m.labels[i] != first.labels[i] {
                return Err(Error::Predictions(format!(
                    "matrix {} row {}: label {} differs from {}",
                    mi, i, m.labels[i], first.labels[i]
                )));
            }
        }
    }
    Ok(())
}

/// Elementwise mean of at least two conformant matrices. The row argmax of
/// the mean is identical to the argmax of the sum: dividing by the member
/// count rescales every entry by the same positive constant.
pub fn average_ensemble(mats: &[&PredictionMatrix]) -> Result<PredictionMatrix> {
    if mats.len() < 2 {
        return Err(Error::Predictions(format!(
            "averaging needs at least 2 matrices, got {}",
            mats.len()
        )));
    }
    let weights = EnsembleWeights::uniform(mats.len());
    let mut out = weighted_ensemble(mats, &weights)?;
    out.tag = format!("average({})", mats.iter().map(|m| m.tag.as_str()).collect::<Vec<_>>().join(","));
    Ok(out)
}

/// Nonnegative model weights, normalized to sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    /// Normalizes raw nonnegative weights; rejects negatives, non-finite
    /// values, and all-zero vectors.
    pub fn new(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Predictions("no ensemble weights given".into()));
        }
        if let Some(&bad) = raw.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Predictions(format!("invalid ensemble weight {}", bad)));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Predictions("ensemble weights sum to zero".into()));
        }
        Ok(EnsembleWeights(raw.iter().map(|w| w / sum).collect()))
    }

    pub fn uniform(m: usize) -> Self {
        EnsembleWeights(vec![1.0 / m as f64; m])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Convex combination of conformant matrices under the given weights.
pub fn weighted_ensemble(
    mats: &[&PredictionMatrix],
    weights: &EnsembleWeights,
) -> Result<PredictionMatrix> {
    check_conformant(mats)?;
    if weights.values().len() != mats.len() {
        return Err(Error::Predictions(format!(
            "{} weights for {} matrices",
            weights.values().len(),
            mats.len()
        )));
    }
    let first = mats[0];
    let (n, k) = (first.len(), first.num_classes());
    let mut data = vec![0.0; n * k];
    for (m, w) in mats.iter().zip(weights.values()) {
        for (slot, &p) in data.iter_mut().zip(m.rows.data()) {
            *slot += w * p;
        }
    }
    PredictionMatrix::new(
        format!(
            "weighted({})",
            mats.iter()
                .zip(weights.values())
                .map(|(m, w)| format!("{}:{:.4}", m.tag, w))
                .collect::<Vec<_>>()
                .join(",")
        ),
        first.class_names.clone(),
        first.paths.clone(),
        first.labels.clone(),
        Tensor::new(vec![n, k], data)?,
    )
}

/// Default weighting: member validation accuracies, normalized.
pub fn accuracy_weights(val_accuracies: &[f64]) -> Result<EnsembleWeights> {
    EnsembleWeights::new(val_accuracies)
}

#[derive(Clone, Debug)]
pub struct StackedConfig {
    pub lr: f64,
    pub iterations: usize,
}

impl Default for StackedConfig {
    fn default() -> Self {
        StackedConfig { lr: 1.0, iterations: 300 }
    }
}

/// Multinomial logistic regression over the concatenated member
/// probabilities: features are the M*K values per sample.
#[derive(Clone, Debug)]
pub struct StackedModel {
    pub class_names: Vec<String>,
    /// `(M*K, K)` weight matrix.
    pub w: Tensor,
    /// `(K,)` bias.
    pub b: Tensor,
}

fn concat_features(mats: &[&PredictionMatrix]) -> Tensor {
    let n = mats[0].len();
    let k = mats[0].num_classes();
    let width = mats.len() * k;
    Tensor::from_fn(&[n, width], |ix| {
        let (row, col) = (ix[0], ix[1]);
        mats[col / k].rows.at(&[row, col % k])
    })
}

/// Fit the meta-learner on held-out-split predictions by full-batch gradient
/// descent from zero weights. The validation labels come from the matrices
/// themselves.
pub fn stacked_train(mats: &[&PredictionMatrix], config: &StackedConfig) -> Result<StackedModel> {
    check_conformant(mats)?;
    let first = mats[0];
    if first.is_empty() {
        return Err(Error::Predictions("cannot fit a meta-learner on zero samples".into()));
    }
    let labels = &first.labels;
    let k = first.num_classes();
    let distinct = {
        let mut seen = vec![false; k];
        labels.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Predictions(
            "meta-learner needs at least two classes in the fitting labels".into(),
        ));
    }
    let x = concat_features(mats);
    let width = x.shape()[1];
    let mut w = Tensor::zeros(&[width, k]);
    let mut b = Tensor::zeros(&[k]);
    for _ in 0..config.iterations {
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let wv = tape.leaf(&w);
        let bv = tape.leaf(&b);
        let scores = tape.matmul(xv, wv)?;
        let logits = tape.add(scores, bv)?;
        let loss = tape.sparse_cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        let gw = grads.get(wv).expect("weight gradient");
        let gb = grads.get(bv).expect("bias gradient");
        w = Tensor::from_fn(w.shape(), |ix| w.at(ix) - config.lr * gw.at(ix));
        b = Tensor::from_fn(b.shape(), |ix| b.at(ix) - config.lr * gb.at(ix));
    }
    Ok(StackedModel { class_names: first.class_names.clone(), w, b })
}

/// Apply a fitted meta-learner to conformant member predictions over another
/// evaluation set; the output rows are an exact softmax.
pub fn stacked_apply(model: &StackedModel, mats: &[&PredictionMatrix]) -> Result<PredictionMatrix> {
    check_conformant(mats)?;
    let first = mats[0];
    if first.class_names != model.class_names {
        return Err(Error::Predictions("meta-learner class ordering differs from inputs".into()));
    }
    let x = concat_features(mats);
    if x.shape()[1] != model.w.shape()[0] {
        return Err(Error::Predictions(format!(
            "meta-learner expects {} features, inputs provide {}",
            model.w.shape()[0],
            x.shape()[1]
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let wv = tape.constant(&model.w);
    let bv = tape.constant(&model.b);
    let scores = tape.matmul(xv, wv)?;
    let logits = tape.add(scores, bv)?;
    let probs = tape.softmax(logits)?;
    PredictionMatrix::new(
        format!("stacked({})", mats.iter().map(|m| m.tag.as_str()).collect::<Vec<_>>().join(",")),
        first.class_names.clone(),
        first.paths.clone(),
        first.labels.clone(),
        tape.value(probs).clone(),
    )
}

// ---- CSV I/O ----

/// Write as CSV: header `path,label,<class_0>,...`, one row per sample.
/// Probabilities use shortest-round-trip decimal formatting, so reading the
/// file back reproduces every value bitwise.
pub fn write_prediction_csv(m: &PredictionMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("path,label");
    for name in &m.class_names {
        if name.contains(',') {
            return Err(Error::Predictions(format!("class name '{}' contains a comma", name)));
        }
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..m.len() {
        if m.paths[i].contains(',') {
            return Err(Error::Predictions(format!("path '{}' contains a comma", m.paths[i])));
        }
        out.push_str(&m.paths[i]);
        out.push_str(&format!(",{}", m.labels[i]));
        for j in 0..m.num_classes() {
            out.push_str(&format!(",{}", m.rows.at(&[i, j])));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a prediction CSV, verifying the header shape, probability ranges,
/// and per-row sums (tolerance `ROW_SUM_FILE_TOL`, violations reported with
/// their row index). When `expected_classes` is given the header must match
/// it exactly, including order.
pub fn read_prediction_csv(path: &Path, expected_classes: Option<&[String]>) -> Result<PredictionMatrix> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Predictions(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "path" || cols[1] != "label" {
        return Err(Error::Predictions(format!(
            "{}: header must start with 'path,label,<classes...>', got '{}'",
            path.display(),
            header
        )));
    }
    let class_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    if let Some(expect) = expected_classes {
        if class_names != expect {
            return Err(Error::Predictions(format!(
                "{}: class header {:?} does not match expected {:?}",
                path.display(),
                class_names,
                expect
            )));
        }
    }
    let k = class_names.len();
    let mut paths = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 2 {
            return Err(Error::Predictions(format!(
                "{}: row {}: expected {} fields, got {}",
                path.display(),
                row,
                k + 2,
                fields.len()
            )));
        }
        paths.push(fields[0].to_string());
        labels.push(fields[1].parse::<usize>().map_err(|_| {
            Error::Predictions(format!("{}: row {}: bad label '{}'", path.display(), row, fields[1]))
        })?);
        let mut sum = 0.0;
        for f in &fields[2..] {
            let p: f64 = f.parse().map_err(|_| {
                Error::Predictions(format!("{}: row {}: bad probability '{}'", path.display(), row, f))
            })?;
            sum += p;
            data.push(p);
        }
        if (sum - 1.0).abs() > ROW_SUM_FILE_TOL {
            return Err(Error::Predictions(format!(
                "{}: row {}: probabilities sum to {}, outside tolerance {}",
                path.display(),
                row,
                sum,
                ROW_SUM_FILE_TOL
            )));
        }
    }
    let n = paths.len();
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "predictions".to_string());
    PredictionMatrix::new(tag, class_names, paths, labels, Tensor::new(vec![n, k], data)?)
}

//! Optimizer, learning-rate schedule, and the epoch loop.
//!
//! The loop trains on seeded, per-epoch shuffled mini-batches (the last
//! partial batch is kept), evaluates validation accuracy after each epoch,
//! feeds the plateau schedule, and checkpoints whenever validation accuracy
//! strictly exceeds the previous best. Only one thread ever touches the
//! model, so a fixed seed makes whole runs bitwise reproducible.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::weights;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub plateau: PlateauConfig,
    /// When set, a `.best` checkpoint is written here on every improvement.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            weight_decay: 0.0001,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            plateau: PlateauConfig::default(),
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        self.plateau.validate()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.2, patience: 5, min_delta: 1e-4, min_lr: 1e-6 }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Invalid(format!("plateau factor must be in (0,1), got {}", self.factor)));
        }
        if self.patience == 0 {
            return Err(Error::Invalid("plateau patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Maximization-mode plateau schedule: an epoch improves only when the metric
/// strictly exceeds `best + min_delta`; after `patience` consecutive
/// non-improving epochs the rate is multiplied by `factor` (clamped to
/// `min_lr`) and the wait counter resets.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    config: PlateauConfig,
    pub lr: f64,
    best: Option<f64>,
    wait: usize,
}

impl PlateauSchedule {
    pub fn new(initial_lr: f64, config: PlateauConfig) -> Self {
        PlateauSchedule { config, lr: initial_lr, best: None, wait: 0 }
    }

    /// Feed one epoch's metric; returns the (possibly reduced) rate.
    pub fn observe(&mut self, metric: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => metric > best + self.config.min_delta,
        };
        if improved {
            self.best = Some(metric);
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
/// name and allocated lazily on first sight.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update: `theta <- theta - lr * mhat / (sqrt(vhat) + eps)
    /// - lr * wd * theta`. The decay term uses the pre-update weight and is
    /// not folded into the gradient.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, theta) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != theta.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("'{}' gradient shape {:?} vs parameter {:?}", name, g.shape(), theta.shape()),
                ));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("non-finite gradient for parameter '{}'", name)));
            }
            let n = theta.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut fresh = Vec::with_capacity(n);
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let old = theta.data()[i];
                fresh.push(old - lr * mhat / (vhat.sqrt() + self.eps) - lr * weight_decay * old);
            }
            *theta = Tensor::new(theta.shape().to_vec(), fresh)?;
        }
        Ok(())
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

/// An in-memory labeled split: images stacked as `(N, C, H, W)`.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(LabeledSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stack per-sample `(C, H, W)` tensors into one `(B, C, H, W)` batch.
pub fn stack_batch(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let s = first.shape();
    if s.len() != 3 {
        return Err(Error::shape("stack", format!("expected (C,H,W) samples, got {:?}", s)));
    }
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != s {
            return Err(Error::shape(
                "stack",
                format!("sample shape {:?} differs from first {:?}", img.shape(), s),
            ));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), s[0], s[1], s[2]], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    /// The model restored to its best-validation-accuracy weights.
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_val_acc: f64,
    pub best_epoch: Option<usize>,
}

/// Render history as CSV with the fixed header
/// `epoch,train_loss,train_acc,val_acc,lr`.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_acc,lr\n");
    for h in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            h.epoch, h.train_loss, h.train_acc, h.val_acc, h.lr
        ));
    }
    out
}

/// Eval-mode accuracy over a set, batched to bound memory.
pub fn evaluate_accuracy(model: &Model, set: &LabeledSet, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate an empty set".into()));
    }
    let mut hits = 0usize;
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().map(|&i| &set.images[i]).collect();
        let batch = stack_batch(&refs)?;
        let probs = model.predict_probs(&batch)?;
        for (row, &i) in chunk.iter().enumerate() {
            if argmax_row(&probs, row) == set.labels[i] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

pub fn argmax_row(probs: &Tensor, row: usize) -> usize {
    let k = probs.shape()[1];
    let mut best = 0;
    for j in 1..k {
        if probs.at(&[row, j]) > probs.at(&[row, best]) {
            best = j;
        }
    }
    best
}

/// Optional per-epoch observer; returning `true` stops training early.
/// Checkpoints and history up to that epoch are preserved.
pub type EpochCallback<'a> = dyn FnMut(&EpochStats) -> bool + 'a;

pub fn train(
    model: Model,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    config: &TrainConfig,
) -> Result<TrainResult> {
    train_with_callback(model, train_set, val_set, config, None)
}

pub fn train_with_callback(
    mut model: Model,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    config: &TrainConfig,
    mut callback: Option<&mut EpochCallback>,
) -> Result<TrainResult> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation splits must both be non-empty".into()));
    }
    let k = model.config.num_classes;
    for (which, set) in [("train", train_set), ("val", val_set)] {
        if let Some(&bad) = set.labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("{} split has label {} but the model has {} classes", which, bad, k)));
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new();
    let mut schedule = PlateauSchedule::new(config.lr, config.plateau);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut best_params: Option<crate::model::ParamStore> = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut hits = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &train_set.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let batch = stack_batch(&refs)?;
            let pass = model.forward(&batch, Some(&labels), Mode::Train)?;
            let loss_var = pass.loss.expect("labels were supplied");
            let loss = pass.tape.value(loss_var).item()?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_idx });
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            let probs = pass.tape.value(pass.probs);
            for (row, &y) in labels.iter().enumerate() {
                if argmax_row(probs, row) == y {
                    hits += 1;
                }
            }

            let grads = pass.tape.backward(loss_var)?;
            let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut grad_map: BTreeMap<String, Tensor> = BTreeMap::new();
            for (name, var) in &pass.param_vars {
                if let Some(g) = grads.get(*var) {
                    params.insert(name.clone(), model.params.get(name)?.clone());
                    grad_map.insert(name.clone(), g.clone());
                }
            }
            optimizer
                .step(&mut params, &grad_map, lr, config.weight_decay)
                .map_err(|e| match e {
                    Error::Invalid(msg) => {
                        Error::Invalid(format!("epoch {epoch} batch {batch_idx}: {msg}"))
                    }
                    other => other,
                })?;
            for (name, value) in params {
                model.params.set(&name, value)?;
            }
            model.apply_bn_updates(&pass.bn_updates)?;
        }

        let train_loss = loss_sum / seen as f64;
        let train_acc = hits as f64 / seen as f64;
        let val_acc = evaluate_accuracy(&model, val_set, config.batch_size)?;

        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = Some(epoch);
            best_params = Some(model.params.clone());
            if let Some(base) = &config.checkpoint_path {
                let mut best_path = base.clone();
                let name = format!(
                    "{}.best",
                    best_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
                );
                best_path.set_file_name(name);
                weights::save_weights(&model, &best_path)?;
            }
        }

        schedule.observe(val_acc);
        let stats = EpochStats { epoch, train_loss, train_acc, val_acc, lr };
        let stop = callback.as_mut().map(|cb| cb(&stats)).unwrap_or(false);
        history.push(stats);
        if stop {
            break;
        }
    }

    if let Some(p) = best_params {
        model.params = p;
    }
    Ok(TrainResult {
        model,
        history,
        best_val_acc: if best_val.is_finite() { best_val } else { 0.0 },
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{micro_config, Model};

    #[test]
    fn plateau_reduces_after_exact_patience() {
        let mut s = PlateauSchedule::new(0.001, PlateauConfig::default());
        assert_eq!(s.observe(0.5), 0.001); // first observation sets the best
        for i in 0..4 {
            assert_eq!(s.observe(0.5), 0.001, "no reduction before patience ({i})");
        }
        // Fifth consecutive non-improvement triggers 0.001 * 0.2.
        let lr = s.observe(0.5);
        assert!((lr - 0.0002).abs() < 1e-15, "got {lr}");
    }

    #[test]
    fn plateau_strictness_and_reset() {
        let cfg = PlateauConfig { min_delta: 1e-4, ..Default::default() };
        let mut s = PlateauSchedule::new(0.01, cfg);
        s.observe(0.5);
        // Exactly min_delta is not an improvement.
        for _ in 0..4 {
            s.observe(0.5 + 1e-4);
        }
        assert_eq!(s.lr, 0.01);
        // A real improvement resets the wait counter.
        s.observe(0.5 + 2e-4);
        for _ in 0..4 {
            s.observe(0.5);
        }
        assert_eq!(s.lr, 0.01);
        s.observe(0.5);
        assert!((s.lr - 0.002).abs() < 1e-15);
    }

    #[test]
    fn plateau_respects_floor() {
        let cfg = PlateauConfig { min_lr: 1e-6, ..Default::default() };
        let mut s = PlateauSchedule::new(1e-6, cfg);
        s.observe(0.9);
        for _ in 0..50 {
            s.observe(0.1);
        }
        assert_eq!(s.lr, 1e-6);
    }

    fn scalar_param(v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::scalar(v));
        m
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_fixed_point() {
        let mut opt = AdamW::new();
        let mut params = scalar_param(3.5);
        let grads = scalar_param(0.0);
        opt.step(&mut params, &grads, 0.001, 0.0).unwrap();
        assert_eq!(params["w"].item().unwrap(), 3.5);
    }

    #[test]
    fn adamw_first_step_magnitude() {
        // From zero moments with g=1: mhat=1, vhat=1, so the step is
        // lr / (1 + eps).
        let mut opt = AdamW::new();
        let mut params = scalar_param(0.0);
        let grads = scalar_param(1.0);
        opt.step(&mut params, &grads, 0.001, 0.0).unwrap();
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((params["w"].item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn adamw_pure_decay_shrinks_multiplicatively() {
        let mut opt = AdamW::new();
        let mut params = scalar_param(2.0);
        let grads = scalar_param(0.0);
        opt.step(&mut params, &grads, 0.01, 0.1).unwrap();
        // g=0 keeps moments at zero, so only the decay term acts.
        assert!((params["w"].item().unwrap() - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn adamw_descends_quadratic_bowl() {
        // f(w) = w^2 / 2, gradient w. Loss must drop after one step for
        // small lr.
        let mut opt = AdamW::new();
        let mut params = scalar_param(1.0);
        for _ in 0..200 {
            let w = params["w"].item().unwrap();
            let grads = scalar_param(w);
            opt.step(&mut params, &grads, 0.01, 0.0).unwrap();
        }
        assert!(params["w"].item().unwrap().abs() < 0.5);
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let mut opt = AdamW::new();
        let mut params = scalar_param(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_parts(vec![1], vec![f64::NAN].into()));
        let err = opt.step(&mut params, &grads, 0.01, 0.0).unwrap_err().to_string();
        assert!(err.contains("'w'"), "{err}");
    }

    fn toy_set(n: usize, classes: usize, size: usize, seed: u64) -> LabeledSet {
        // Class k = bright square in quadrant k on a noisy background:
        // linearly separable, learnable in a handful of epochs.
        let mut state = seed.wrapping_add(9);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64 * 0.2
        };
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let half = size / 2;
        for i in 0..n {
            let y = i % classes;
            let (r0, c0) = ((y / 2) * half, (y % 2) * half);
            let img = Tensor::from_fn(&[2, size, size], |ix| {
                let inside = ix[1] >= r0 && ix[1] < r0 + half && ix[2] >= c0 && ix[2] < c0 + half;
                let base = if inside { 0.8 } else { 0.1 };
                base + next()
            });
            images.push(img);
            labels.push(y);
        }
        LabeledSet::new(images, labels).unwrap()
    }

    #[test]
    fn zero_epochs_returns_init_and_empty_history() {
        let model = Model::new(micro_config(3, 8), 5).unwrap();
        let before: Vec<f64> = model.params.get("head.weight").unwrap().data().to_vec();
        let set = toy_set(6, 3, 8, 1);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(model, &set, &set, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, None);
        assert_eq!(out.model.params.get("head.weight").unwrap().data(), &before[..]);
    }

    #[test]
    fn rejects_empty_split_and_bad_labels() {
        let model = Model::new(micro_config(3, 8), 5).unwrap();
        let set = toy_set(6, 3, 8, 1);
        let empty = LabeledSet::new(vec![], vec![]).unwrap();
        let cfg = TrainConfig::default();
        assert!(train(model.clone(), &empty, &set, &cfg).is_err());
        assert!(train(model.clone(), &set, &empty, &cfg).is_err());
        let mut bad = set.clone();
        bad.labels[0] = 7;
        let err = train(model, &bad, &set, &cfg).unwrap_err().to_string();
        assert!(err.contains("label 7"), "{err}");
    }

    #[test]
    fn training_learns_separable_toy_task_and_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        };
        let train_set = toy_set(48, 2, 8, 10);
        let val_set = toy_set(16, 2, 8, 11);
        let run = |seed: u64| {
            let model = Model::new(micro_config(2, 8), seed).unwrap();
            train(model, &train_set, &val_set, &cfg).unwrap()
        };
        let a = run(4);
        assert_eq!(a.history.len(), 12);
        let last = a.history.last().unwrap();
        assert!(last.train_acc >= 0.95, "train acc {}", last.train_acc);
        // Same seeds, same data: final weights must match bitwise.
        let b = run(4);
        for ((na, ea), (_, eb)) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(ea.value.data(), eb.value.data(), "{na}");
        }
        // History lr trace never increases.
        for w in a.history.windows(2) {
            assert!(w[1].lr <= w[0].lr);
        }
        // Best checkpoint equals the max of the val trace.
        let max_val = a.history.iter().map(|h| h.val_acc).fold(f64::MIN, f64::max);
        assert_eq!(a.best_val_acc, max_val);
    }

    #[test]
    fn checkpoint_written_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("run.vtf1");
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 1,
            checkpoint_path: Some(base.clone()),
            ..Default::default()
        };
        let train_set = toy_set(16, 2, 8, 20);
        let model = Model::new(micro_config(2, 8), 2).unwrap();
        let out = train(model, &train_set, &train_set, &cfg).unwrap();
        let best = dir.path().join("run.vtf1.best");
        assert!(best.exists());
        let loaded = weights::load_weights(&out.model.config, &best).unwrap();
        // The checkpoint holds the best-epoch weights, which the result
        // model was restored to.
        for ((na, ea), (_, eb)) in out.model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(ea.value.data(), eb.value.data(), "{na}");
        }
    }

    #[test]
    fn early_stop_callback_truncates_history() {
        let cfg = TrainConfig { epochs: 10, batch_size: 8, seed: 1, ..Default::default() };
        let set = toy_set(16, 2, 8, 30);
        let model = Model::new(micro_config(2, 8), 2).unwrap();
        let mut cb = |stats: &EpochStats| stats.epoch == 2;
        let out = train_with_callback(model, &set, &set, &cfg, Some(&mut cb)).unwrap();
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn history_csv_has_fixed_header() {
        let h = vec![EpochStats { epoch: 0, train_loss: 1.5, train_acc: 0.25, val_acc: 0.3, lr: 0.001 }];
        let csv = history_csv(&h);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,train_acc,val_acc,lr");
        assert!(lines.next().unwrap().starts_with("0,1.5"));
    }

    #[test]
    fn batch_loss_invariant_to_sample_order() {
        let model = Model::new(micro_config(3, 8), 5).unwrap();
        let set = toy_set(6, 3, 8, 40);
        let fwd = |idx: &[usize]| {
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &set.images[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            let batch = stack_batch(&refs).unwrap();
            let pass = model.forward(&batch, Some(&labels), Mode::Eval).unwrap();
            pass.tape.value(pass.loss.unwrap()).item().unwrap()
        };
        let a = fwd(&[0, 1, 2, 3, 4, 5]);
        let b = fwd(&[5, 3, 1, 0, 2, 4]);
        assert!((a - b).abs() < 1e-12);
    }
}

//! Training recipe: one-vs-rest BCE, AdamW wrapped in Lookahead, window
//! masking augmentation, warm-up mixing and evaluation metrics.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{AttentionMode, RunConfig};
use crate::data::Bag;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, TimeMil};
use crate::pooling::WarmupConfig;
use crate::tensor::{Graph, Real, Tensor};

pub const MASK_WINDOWS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_p_choices: Vec<f64>,
    pub warmup: WarmupConfig,
    pub seed: u64,
    pub attention_mode: AttentionMode,
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            adam_betas: cfg.adam_betas,
            adam_eps: cfg.adam_eps,
            lookahead_k: cfg.lookahead_k,
            lookahead_alpha: cfg.lookahead_alpha,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            mask_p_choices: cfg.mask_p_choices.clone(),
            warmup: WarmupConfig::from_run(cfg),
            seed: cfg.seed,
            attention_mode: cfg.attention_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) || self.lookahead_k == 0 {
            return Err(Error::config("lookahead needs k >= 1 and alpha in (0, 1]"));
        }
        if self.batch_size == 0 || self.mask_p_choices.is_empty() {
            return Err(Error::config("batch_size and mask_p_choices must be non-empty"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_eps,
        }
    }
}

/// Mean over classes of `BCE(sigmoid(z_c), 1[c = label])`, written as
/// `softplus(z) − t·z`.
pub fn ovr_bce_loss(logits: &[f64], label: usize) -> Result<f64> {
    let c = logits.len();
    if c < 2 {
        return Err(Error::usage(format!("one-vs-rest loss needs at least 2 classes, got {c}")));
    }
    if label >= c {
        return Err(Error::usage(format!("label {label} out of range for {c} classes")));
    }
    let sum: f64 = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let sp = z.max(0.0) + (-z.abs()).exp().ln_1p();
            sp - if i == label { z } else { 0.0 }
        })
        .sum();
    Ok(sum / c as f64)
}

/// Argmax with ties going to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<F: Real>(params: &[Tensor<F>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update:
/// `w ← w(1 − lr·wd) − lr·m̂/(√v̂ + eps)`. Tensors without a gradient are
/// left untouched.
pub fn adamw_step<F: Real>(params: &mut [Tensor<F>], state: &mut AdamState, h: &AdamParams) {
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let decay = 1.0 - h.lr * h.weight_decay;
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(grad) = p.grad().map(|g| g.iter().map(|x| x.f64()).collect::<Vec<_>>()) else {
            continue;
        };
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w = F::c(w.f64() * decay - h.lr * mhat / (vhat.sqrt() + h.eps));
        }
    }
}

/// Slow weights that follow the fast weights every `k` optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Lookahead<F> {
    slow: Vec<Vec<F>>,
    k: usize,
    alpha: f64,
    counter: usize,
}

impl<F: Real> Lookahead<F> {
    pub fn new(params: &[Tensor<F>], k: usize, alpha: f64) -> Self {
        Self {
            slow: params.iter().map(|p| p.data().to_vec()).collect(),
            k: k.max(1),
            alpha,
            counter: 0,
        }
    }

    pub fn slow(&self) -> &[Vec<F>] {
        &self.slow
    }

    /// Counts one inner step; on every `k`-th, moves the slow weights
    /// `alpha` of the way to the fast weights and resets the fast weights to
    /// them. Returns whether a sync happened.
    pub fn step(&mut self, params: &mut [Tensor<F>]) -> bool {
        self.counter += 1;
        if !self.counter.is_multiple_of(self.k) {
            return false;
        }
        for (slow, p) in self.slow.iter_mut().zip(params.iter_mut()) {
            for (s, f) in slow.iter_mut().zip(p.data_mut()) {
                if self.alpha == 1.0 {
                    *s = *f;
                } else {
                    *s = F::c(s.f64() + self.alpha * (f.f64() - s.f64()));
                }
                *f = *s;
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutcome {
    pub values: Vec<f64>,
    /// Indices of the replaced windows, ascending.
    pub windows: Vec<usize>,
    /// Set when the series is shorter than the window count.
    pub skipped: bool,
}

/// Window bounds over the first `t` steps: 10 windows of `⌊t/10⌋` steps,
/// the last absorbing the remainder.
pub fn mask_windows(t: usize) -> Vec<(usize, usize)> {
    let w = t / MASK_WINDOWS;
    (0..MASK_WINDOWS)
        .map(|i| (i * w, if i + 1 == MASK_WINDOWS { t } else { (i + 1) * w }))
        .collect()
}

/// Replaces `⌊10p⌋` randomly chosen windows of the valid region with
/// standard normal noise on every channel.
pub fn window_mask_augment<R: Rng + ?Sized>(bag: &Bag, p: f64, rng: &mut R) -> MaskOutcome {
    let mut values = bag.values.clone();
    let t = bag.valid_len;
    if t < MASK_WINDOWS {
        log::warn!("bag {}: {t} steps is too short for window masking; skipped", bag.id);
        return MaskOutcome {
            values,
            windows: Vec::new(),
            skipped: true,
        };
    }
    let count = ((MASK_WINDOWS as f64 * p) + 1e-9).floor().clamp(0.0, MASK_WINDOWS as f64) as usize;
    if count == 0 {
        return MaskOutcome {
            values,
            windows: Vec::new(),
            skipped: false,
        };
    }
    let mut windows = index::sample(rng, MASK_WINDOWS, count).into_vec();
    windows.sort_unstable();
    let bounds = mask_windows(t);
    for &w in &windows {
        let (s, e) = bounds[w];
        for v in &mut values[s * bag.d..e * bag.d] {
            *v = rng.sample(StandardNormal);
        }
    }
    MaskOutcome {
        values,
        windows,
        skipped: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub auc_roc: f64,
    /// Classes left out of the macro averages because no sample carries them.
    pub skipped_classes: Vec<usize>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Trapezoidal area under the ROC curve; tied scores form one step.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Some(area)
}

/// Accuracy plus macro precision/recall/F1 and mean one-vs-rest AUC over the
/// classes present in `labels`.
pub fn compute_metrics(logits: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(l) = logits.iter().find(|l| l.len() != num_classes) {
        return Err(Error::dim(format!("{} logits for {num_classes} classes", l.len())));
    }
    let preds: Vec<usize> = logits.iter().map(|l| predict(l)).collect();
    let n = labels.len() as f64;
    let accuracy = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n;
    let (mut ps, mut rs, mut fs, mut aucs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut skipped = Vec::new();
    for c in 0..num_classes {
        let support = labels.iter().filter(|&&l| l == c).count();
        if support == 0 {
            skipped.push(c);
            continue;
        }
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ps.push(precision);
        rs.push(recall);
        fs.push(f1);
        let scores: Vec<f64> = logits.iter().map(|l| sigmoid(l[c])).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(a) = roc_auc(&scores, &positive) {
            aucs.push(a);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(Metrics {
        accuracy,
        macro_f1: mean(&fs),
        macro_precision: mean(&ps),
        macro_recall: mean(&rs),
        auc_roc: mean(&aucs),
        skipped_classes: skipped,
    })
}

/// Inference logits for every bag.
pub fn predict_logits<F: Real>(model: &TimeMil<F>, data: &[Bag], mode: AttentionMode) -> Result<Vec<Vec<f64>>> {
    data.iter().map(|b| model.infer(b, mode).map(|r| r.0)).collect()
}

/// Metrics in inference mode: no augmentation, no warm-up mixing.
pub fn evaluate<F: Real>(model: &TimeMil<F>, data: &[Bag]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let logits = predict_logits(model, data, model.config.attention_mode)?;
    let labels: Vec<usize> = data.iter().map(|b| b.label).collect();
    compute_metrics(&logits, &labels, model.num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean training loss over bags.
    pub loss: f64,
    /// Metrics of the augmented training forward passes.
    pub metrics: Metrics,
    pub validation: Option<Metrics>,
}

pub struct Trainer<F> {
    pub model: TimeMil<F>,
    pub cfg: TrainConfig,
    adam: AdamState,
    lookahead: Lookahead<F>,
    rng: ChaCha8Rng,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: TimeMil<F>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(model.params.tensors());
        let lookahead = Lookahead::new(model.params.tensors(), cfg.lookahead_k, cfg.lookahead_alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            cfg,
            adam,
            lookahead,
            rng,
        })
    }

    pub fn from_run(model: TimeMil<F>) -> Result<Self> {
        let cfg = TrainConfig::from_run(&model.config);
        Self::new(model, cfg)
    }

    fn diagnose(&self, epoch: usize, batch: usize, loss: f64) -> Error {
        let norms: Vec<String> = self
            .model
            .params
            .iter()
            .filter(|(_, t)| !t.norm().is_finite() || t.norm() > 1e3)
            .map(|(n, t)| format!("{n}={:.3e}", t.norm()))
            .collect();
        let total: f64 = self.model.params.tensors().iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
        Error::NonFinite(format!(
            "epoch {epoch} batch {batch}: loss {loss}; global parameter norm {total:.3e}; large or non-finite: [{}]",
            norms.join(", ")
        ))
    }

    /// One pass over `data` in a seeded random order.
    pub fn train_epoch(&mut self, data: &[Bag], epoch: usize) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::usage("training set is empty"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let warmup = self.cfg.warmup.active(epoch).then_some(self.cfg.warmup.alpha);
        let opts = ForwardOptions {
            mode: self.cfg.attention_mode,
            warmup_alpha: warmup,
        };
        let hp = self.cfg.adam();
        let mut total_loss = 0.0;
        let mut logits_all = vec![Vec::new(); data.len()];
        for (batch_idx, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let p = self.cfg.mask_p_choices[self.rng.random_range(0..self.cfg.mask_p_choices.len())];
            let mut g = Graph::new();
            let binds = self.model.params.bind(&mut g);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let bag = &data[i];
                let masked = window_mask_augment(bag, p, &mut self.rng);
                let out = self.model.forward(&mut g, &binds, bag, Some(&masked.values), opts)?;
                logits_all[i] = g.value(out.logits).iter().map(|v| v.f64()).collect();
                losses.push(g.ovr_bce(out.logits, bag.label)?);
            }
            let mut loss = losses[0];
            for &l in &losses[1..] {
                loss = g.add(loss, l)?;
            }
            let loss = g.scale(loss, F::c(1.0 / batch.len() as f64));
            let value = g.scalar(loss).f64();
            if !value.is_finite() {
                return Err(self.diagnose(epoch, batch_idx, value));
            }
            total_loss += value * batch.len() as f64;
            g.backward(loss)?;
            self.model.params.zero_grad();
            self.model.params.collect_grads(&g, &binds);
            adamw_step(self.model.params.tensors_mut(), &mut self.adam, &hp);
            self.lookahead.step(self.model.params.tensors_mut());
        }
        self.model.params.zero_grad();
        let labels: Vec<usize> = data.iter().map(|b| b.label).collect();
        Ok(EpochReport {
            epoch,
            loss: total_loss / data.len() as f64,
            metrics: compute_metrics(&logits_all, &labels, self.model.num_classes)?,
            validation: None,
        })
    }

    /// Trains for the configured epochs. With a validation set the
    /// parameters of the best validation-accuracy epoch (earliest on ties)
    /// are restored at the end; otherwise the last epoch is kept.
    pub fn fit(&mut self, train: &[Bag], validation: Option<&[Bag]>) -> Result<FitOutcome> {
        let mut reports = Vec::with_capacity(self.cfg.epochs);
        let mut best: Option<(f64, usize, Vec<Tensor<F>>)> = None;
        for epoch in 0..self.cfg.epochs {
            let mut report = self.train_epoch(train, epoch)?;
            if let Some(val) = validation {
                let m = evaluate(&self.model, val)?;
                if best.as_ref().is_none_or(|(acc, _, _)| m.accuracy > *acc) {
                    best = Some((m.accuracy, epoch, self.model.params.tensors().to_vec()));
                }
                report.validation = Some(m);
            }
            log::info!("epoch {epoch}: loss {:.5} train accuracy {:.4}", report.loss, report.metrics.accuracy);
            reports.push(report);
        }
        let best_epoch = match best {
            Some((_, epoch, params)) => {
                for (dst, src) in self.model.params.tensors_mut().iter_mut().zip(params) {
                    *dst = src;
                }
                epoch
            }
            None => self.cfg.epochs.saturating_sub(1),
        };
        Ok(FitOutcome { reports, best_epoch })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitOutcome {
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
}

/// Seeded split of `bags` into (train, validation).
pub fn split_validation(bags: &[Bag], fraction: f64, seed: u64) -> (Vec<Bag>, Vec<Bag>) {
    let n_val = (bags.len() as f64 * fraction).floor() as usize;
    if n_val == 0 {
        return (bags.to_vec(), Vec::new());
    }
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    order.shuffle(&mut rng);
    let (val, train) = order.split_at(n_val);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| bags[i].clone()).collect()
    };
    (pick(train), pick(val))
}

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "loss",
    "accuracy",
    "macro_f1",
    "macro_precision",
    "macro_recall",
    "auc_roc",
];

fn metrics_row(epoch: usize, loss: f64, m: &Metrics) -> [String; 7] {
    [
        epoch.to_string(),
        loss.to_string(),
        m.accuracy.to_string(),
        m.macro_f1.to_string(),
        m.macro_precision.to_string(),
        m.macro_recall.to_string(),
        m.auc_roc.to_string(),
    ]
}

/// Per-epoch training metrics; the loss column is the mean training loss.
pub fn write_metrics_csv(reports: &[EpochReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(METRICS_HEADER)?;
    for r in reports {
        w.write_record(metrics_row(r.epoch, r.loss, &r.metrics))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-epoch validation metrics, with the training loss of that epoch.
pub fn write_validation_csv(reports: &[EpochReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(METRICS_HEADER)?;
    for r in reports {
        if let Some(m) = &r.validation {
            w.write_record(metrics_row(r.epoch, r.loss, m))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            output_dim: 8,
            bottleneck_dim: 4,
            kernel_sizes: vec![3, 5, 9],
            d_model: 8,
            num_heads: 2,
            landmarks: 8,
            batch_size: 4,
            epochs: 2,
            ..RunConfig::default()
        }
    }

    fn bags(n: usize, t: usize) -> Vec<Bag> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let vals: Vec<f64> = (0..t).map(|s| rng.random::<f64>() + if label == 1 && s > t / 2 { 2.0 } else { 0.0 }).collect();
                Bag::new(format!("b{i}"), vals, t, 1, label).unwrap()
            })
            .collect()
    }

    #[test]
    fn lr_zero_leaves_parameters_unchanged() {
        let model = TimeMil::<f64>::new(tiny(), 1, 2).unwrap();
        let before = model.params.tensors().to_vec();
        let mut cfg = TrainConfig::from_run(&model.config);
        cfg.learning_rate = 0.0;
        let mut tr = Trainer {
            adam: AdamState::new(model.params.tensors()),
            lookahead: Lookahead::new(model.params.tensors(), cfg.lookahead_k, cfg.lookahead_alpha),
            rng: ChaCha8Rng::seed_from_u64(0),
            model,
            cfg,
        };
        tr.train_epoch(&bags(8, 20), 0).unwrap();
        for (a, b) in before.iter().zip(tr.model.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn mask_windows_cover_series() {
        let w = mask_windows(125);
        assert_eq!(w[0], (0, 12));
        assert_eq!(w[9], (108, 125));
        assert!(w.windows(2).all(|p| p[0].1 == p[1].0));
    }
}

//! Optimizer, schedule and the training loop over preloaded features.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::adapter::{SelectedFeatures, SideNetwork};
use crate::cache::FeatureSource;
use crate::data::{augment_low, normalize, Split};
use crate::error::{Error, Result};
use crate::metrics::macro_auc;
use crate::nn::Params;
use crate::tensor::{graph, init, ops, Buffer, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f32,
    pub weight_decay: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub seed: u64,
    /// Augment the low-resolution input.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr_max: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.lr_max >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate and weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// `½ · lr_max · (1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f32) -> f32 {
    let total = total.max(1);
    let t = t.min(total);
    (0.5 * lr_max as f64 * (1.0 + (PI * t as f64 / total as f64).cos())) as f32
}

/// AdamW with bias-corrected moments and decoupled weight decay applied to
/// every learnable tensor.
#[derive(Debug)]
pub struct AdamW {
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    steps: i32,
    moments: Vec<(Buffer, Buffer)>,
}

impl AdamW {
    pub fn new(betas: (f32, f32), eps: f32, weight_decay: f32) -> Self {
        AdamW {
            betas,
            eps,
            weight_decay,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.betas, cfg.eps, cfg.weight_decay)
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Allocates the moment buffers of every learnable tensor not yet seen,
    /// as the first [`AdamW::step`] would.
    pub fn prime(&mut self, model: &impl Params) {
        let mut slot = 0;
        let moments = &mut self.moments;
        model.visit("", &mut |_, p| {
            if !p.is_leaf_parameter() {
                return;
            }
            if moments.len() == slot {
                moments.push((Buffer::zeros(p.numel()), Buffer::zeros(p.numel())));
            }
            slot += 1;
        });
    }

    /// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)` for every learnable tensor;
    /// consumes the gradients. A tensor without a gradient is treated as
    /// having a zero gradient.
    pub fn step(&mut self, model: &mut impl Params, lr: f32) -> Result<()> {
        self.steps += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - (b1 as f64).powi(self.steps) as f32;
        let c2 = 1.0 - (b2 as f64).powi(self.steps) as f32;
        let decay = 1.0 - lr * self.weight_decay;
        let eps = self.eps;
        let moments = &mut self.moments;
        let mut slot = 0;
        let mut failure = None;
        model.visit_mut("", &mut |name, p| {
            if !p.is_leaf_parameter() || failure.is_some() {
                return;
            }
            if moments.len() == slot {
                moments.push((Buffer::zeros(p.numel()), Buffer::zeros(p.numel())));
            }
            let (m, v) = &mut moments[slot];
            slot += 1;
            if m.len() != p.numel() {
                failure = Some(Error::contract(format!("{name}: optimizer state shape changed")));
                return;
            }
            let grad = p.take_grad();
            let g = grad.as_deref();
            p.update_data(|theta| {
                for i in 0..theta.len() {
                    let gi = g.map_or(0.0, |g| g[i]);
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    theta[i] = theta[i] * decay - lr * (m_hat / (v_hat.sqrt() + eps));
                }
            });
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// A training or evaluation example: the un-normalized low-resolution image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub low: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub auc: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,split,loss,auc\n");
    for r in rows {
        let auc = r.auc.map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(out, "{},{},{:.6},{}", r.epoch, r.split, r.loss, auc);
    }
    out
}

pub fn write_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    fs::write(path, log_csv(rows))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    /// `None` when a class is missing from the labels.
    pub auc: Option<f64>,
    pub per_class: Vec<f64>,
    pub loss: f64,
    /// Softmax outputs, `n × classes`.
    pub probs: Vec<f32>,
    pub labels: Vec<usize>,
}

fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter_mut().map(|v| {
            *v = (*v - max).exp();
            *v
        }).sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn summarize(logits: &[f32], labels: Vec<usize>, loss: f64, classes: usize) -> Result<EvalResult> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let probs = softmax_rows(logits, classes);
    let (auc, per_class) = match macro_auc(&probs, &labels, classes) {
        Ok((a, per)) => (Some(a), per),
        Err(Error::UndefinedMetric(_)) => (None, Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(EvalResult {
        auc,
        per_class,
        loss,
        probs,
        labels,
    })
}

/// Inference over `samples` without augmentation.
pub fn evaluate(net: &SideNetwork, samples: &[Sample], source: &dyn FeatureSource) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let classes = net.cfg.classes;
    graph::no_grad(|| {
        let mut logits = Vec::with_capacity(samples.len() * classes);
        let mut loss = 0.0;
        for s in samples {
            let feats = features_for(net, source, &s.id)?;
            let out = net.forward(&normalize(&s.low), &feats)?;
            loss += ops::cross_entropy(&out, &[s.label])?.item() as f64;
            logits.extend_from_slice(out.data());
        }
        let labels = samples.iter().map(|s| s.label).collect();
        summarize(&logits, labels, loss / samples.len() as f64, classes)
    })
}

fn features_for(net: &SideNetwork, source: &dyn FeatureSource, id: &str) -> Result<Vec<SelectedFeatures>> {
    if net.cfg.fusion {
        source.features(id)
    } else {
        Ok(Vec::new())
    }
}

/// Outcome of one optimization step.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub loss: f32,
    /// Graph nodes recorded by the forward pass.
    pub nodes: usize,
    pub logits: Vec<f32>,
}

/// Forward, backward and update on one batch. `inputs` are normalized
/// low-resolution images with their features.
pub fn train_step(
    net: &mut SideNetwork,
    opt: &mut AdamW,
    inputs: &[(Tensor, Vec<SelectedFeatures>)],
    labels: &[usize],
    lr: f32,
) -> Result<StepStats> {
    graph::clear();
    let start = graph::node_count();
    let rows = inputs
        .iter()
        .map(|(img, feats)| net.forward(img, feats))
        .collect::<Result<Vec<_>>>()?;
    let logits = ops::concat_rows(&rows.iter().collect::<Vec<_>>())?;
    drop(rows);
    let loss = ops::cross_entropy(&logits, labels)?;
    let nodes = graph::node_count() - start;
    let value = loss.item();
    if !value.is_finite() {
        graph::clear();
        return Err(Error::NonFinite("training loss"));
    }
    graph::backward(&loss)?;
    opt.step(net, lr)?;
    Ok(StepStats {
        loss: value,
        nodes,
        logits: logits.to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Validation results per epoch (empty without a validation set).
    pub val_history: Vec<EvalResult>,
    pub steps: usize,
}

/// Shuffled mini-batches, optional augmentation, AdamW under a per-step
/// cosine schedule. After every epoch the validation AUC is logged; the
/// parameters of the best epoch (first on ties, last epoch without a usable
/// validation AUC) are restored into `net` at the end.
pub fn train(
    net: &mut SideNetwork,
    train_set: &[Sample],
    val_set: &[Sample],
    source: &dyn FeatureSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if net.cfg.fusion {
        source.check(&net.cfg)?;
    }
    let classes = net.cfg.classes;
    let mut rng = init::rng_for(cfg.seed, "train");
    let mut opt = AdamW::from_config(cfg);
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut step = 0;
    let mut log = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut logits = Vec::with_capacity(train_set.len() * classes);
        let mut labels = Vec::with_capacity(train_set.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train_set[i];
                let low = if cfg.augment { augment_low(&s.low, &mut rng)? } else { s.low.detach() };
                inputs.push((normalize(&low), features_for(net, source, &s.id)?));
                batch_labels.push(s.label);
            }
            let stats = train_step(net, &mut opt, &inputs, &batch_labels, cosine_lr(step, total, cfg.lr_max))?;
            step += 1;
            loss_sum += stats.loss as f64 * batch.len() as f64;
            logits.extend(stats.logits);
            labels.extend(batch_labels);
        }
        let train_eval = summarize(&logits, labels, loss_sum / train_set.len() as f64, classes)?;
        log.push(LogRow {
            epoch,
            split: Split::Train,
            loss: train_eval.loss,
            auc: train_eval.auc,
        });
        let score = if val_set.is_empty() {
            None
        } else {
            let v = evaluate(net, val_set, source)?;
            log.push(LogRow {
                epoch,
                split: Split::Val,
                loss: v.loss,
                auc: v.auc,
            });
            let auc = v.auc;
            val_history.push(v);
            auc
        };
        let improved = match (&best, score) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some((b, _, _)), Some(s)) => s > *b,
        };
        if improved {
            best = Some((score.unwrap_or_default(), epoch, net.named_params()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            net.load_named(params)?;
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        val_history,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 1e-3), 1e-3);
        assert!(cosine_lr(10, 10, 1e-3).abs() < 1e-12);
        assert!((cosine_lr(5, 10, 1e-3) - 5e-4).abs() < 1e-9);
    }

    fn scalar_param(v: f32) -> Tensor {
        Tensor::new(vec![v], &[1]).unwrap().into_parameter()
    }

    #[test]
    fn adamw_scalar_step() {
        let mut theta = scalar_param(1.0);
        graph::backward(&ops::sum(&theta)).unwrap();
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut theta, 0.1).unwrap();
        assert!((theta.item() - 0.9).abs() < 1e-6);
        assert!(!theta.has_grad());
    }

    #[test]
    fn adamw_decay_and_zero_grad() {
        let mut lin = Linear::zeroed(2, 2);
        lin.w = Tensor::new(vec![1.0, -2.0, 0.5, 4.0], &[2, 2]).unwrap().into_parameter();
        lin.b = scalar_param(3.0).reshape(&[1]).unwrap();
        let before = lin.w.to_vec();
        AdamW::new((0.9, 0.999), 1e-8, 0.0).step(&mut lin, 0.1).unwrap();
        assert_eq!(lin.w.to_vec(), before);
        AdamW::new((0.9, 0.999), 1e-8, 0.5).step(&mut lin, 0.1).unwrap();
        let expected: Vec<f32> = before.iter().map(|v| v * (1.0 - 0.1 * 0.5)).collect();
        assert_eq!(lin.w.to_vec(), expected);
    }

    #[test]
    fn log_format() {
        let rows = [LogRow { epoch: 1, split: Split::Val, loss: 0.5, auc: Some(0.75) }];
        assert_eq!(log_csv(&rows), "epoch,split,loss,auc\n1,val,0.500000,0.750000\n");
    }
}

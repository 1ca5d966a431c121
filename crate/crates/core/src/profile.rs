//! Efficiency accounting: PPE/PME scores, parameter census and ledger peaks
//! of single optimization steps.

use crate::adapter::{FptConfig, SideNetwork};
use crate::cache;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{graph, ledger, ops, Tensor};
use crate::train::{self, AdamW};
use crate::vit::ViT;

/// Performance discounted by the learnable-parameter fraction `r`.
pub fn ppe(score: f64, r: f64) -> f64 {
    score * (-(r + 1.0).log10()).exp()
}

/// Performance discounted by the memory fraction `m` relative to full
/// fine-tuning.
pub fn pme(score: f64, m: f64) -> f64 {
    score * (-(m + 1.0).log10()).exp()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupCount {
    pub name: &'static str,
    pub learnable: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Census {
    pub groups: Vec<GroupCount>,
}

impl Census {
    pub fn learnable(&self) -> usize {
        self.groups.iter().map(|g| g.learnable).sum()
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.total).sum()
    }

    /// Learnable over total, 0 for an empty model.
    pub fn ratio(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.learnable() as f64 / t as f64,
        }
    }
}

fn count(name: &'static str, module: &impl Params) -> GroupCount {
    let (mut learnable, mut total) = (0, 0);
    module.visit("", &mut |_, t| {
        total += t.numel();
        if t.is_leaf_parameter() {
            learnable += t.numel();
        }
    });
    GroupCount { name, learnable, total }
}

/// Exact counts of the frozen LPM and every side-network group.
pub fn param_census(lpm: &ViT, side: &SideNetwork) -> Census {
    Census {
        groups: vec![
            count("lpm", lpm),
            count("side.embeddings", &side.embed),
            count("side.blocks", &side.blocks),
            count("prompts", &side.prompts),
            count("fusion_norms", &side.fusion_norms),
            count("f_out", &side.f_out),
            count("head", &side.head),
        ],
    }
}

/// Runs `run` and returns its value with the ledger peak it reached above
/// the bytes that were already live.
pub fn measure_peak<T>(run: impl FnOnce() -> Result<T>) -> Result<(T, u64)> {
    ledger::reset_peak();
    let base = ledger::snapshot().live_bytes;
    let out = run()?;
    Ok((out, ledger::snapshot().peak_bytes - base))
}

/// One FPT+ step on a single image: LPM feature extraction, side forward,
/// backward and AdamW. `image` is the normalized high-resolution input.
pub fn fpt_step(
    lpm: &ViT,
    net: &mut SideNetwork,
    opt: &mut AdamW,
    image: &Tensor,
    label: usize,
) -> Result<f32> {
    let cfg = net.cfg.clone();
    let feats = if cfg.fusion { cache::extract(lpm, &cfg, "step", image)? } else { Vec::new() };
    let low = crate::data::resize_bilinear(image, cfg.low_res, cfg.low_res)?;
    Ok(train::train_step(net, opt, &[(low, feats)], &[label], 1e-4)?.loss)
}

/// One full fine-tuning step of `model` (a classifier) on a single image.
pub fn full_ft_step(model: &mut ViT, opt: &mut AdamW, image: &Tensor, label: usize) -> Result<f32> {
    graph::clear();
    let logits = model.classify(image)?;
    let loss = ops::cross_entropy(&logits, &[label])?;
    let value = loss.item();
    if !value.is_finite() {
        graph::clear();
        return Err(Error::NonFinite("full fine-tuning loss"));
    }
    graph::backward(&loss)?;
    drop((logits, loss));
    opt.step(model, 1e-4)?;
    Ok(value)
}

/// A flat mid-gray input at `res`, the image used for memory probes.
pub fn probe_image(res: usize, channels: usize) -> Tensor {
    Tensor::zeros(&[res, res, channels])
}

/// Ledger peak of one FPT+ step for `cfg`, optimizer state already in place.
pub fn fpt_peak(cfg: &FptConfig, seed: u64) -> Result<u64> {
    let lpm = ViT::new(cfg.lpm(), seed)?;
    let mut net = SideNetwork::new(cfg.clone(), seed)?;
    let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
    opt.prime(&net);
    let image = probe_image(cfg.high_res, cfg.channels);
    Ok(measure_peak(|| fpt_step(&lpm, &mut net, &mut opt, &image, 0))?.1)
}

/// Ledger peak of one full fine-tuning step of the LPM of `cfg` with a
/// classifier head, optimizer state already in place.
pub fn full_ft_peak(cfg: &FptConfig, seed: u64) -> Result<u64> {
    let mut model = ViT::classifier(cfg.lpm(), cfg.classes, seed)?;
    let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
    opt.prime(&model);
    let image = probe_image(cfg.high_res, cfg.channels);
    Ok(measure_peak(|| full_ft_step(&mut model, &mut opt, &image, 0))?.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyReport {
    pub learnable_params: usize,
    pub total_params: usize,
    pub r: f64,
    pub peak_bytes_method: u64,
    pub peak_bytes_full_ft: u64,
    pub m: f64,
    pub score: f64,
    pub ppe: f64,
    pub pme: f64,
}

impl EfficiencyReport {
    pub fn new(census: &Census, peak_method: u64, peak_full_ft: u64, score: f64) -> Result<Self> {
        if peak_full_ft == 0 {
            return Err(Error::contract("full fine-tuning peak is zero"));
        }
        let r = census.ratio();
        let m = peak_method as f64 / peak_full_ft as f64;
        Ok(EfficiencyReport {
            learnable_params: census.learnable(),
            total_params: census.total(),
            r,
            peak_bytes_method: peak_method,
            peak_bytes_full_ft: peak_full_ft,
            m,
            score,
            ppe: ppe(score, r),
            pme: pme(score, m),
        })
    }

    /// `key value` lines; floats at full round-trip precision.
    pub fn render(&self) -> String {
        format!(
            "learnable_params {}\ntotal_params {}\nr {}\npeak_bytes_method {}\npeak_bytes_full_ft {}\nm {}\nscore {}\nppe {}\npme {}\n",
            self.learnable_params,
            self.total_params,
            self.r,
            self.peak_bytes_method,
            self.peak_bytes_full_ft,
            self.m,
            self.score,
            self.ppe,
            self.pme
        )
    }
}

//! Synthetic end-to-end runs: generate images, preload LPM features once,
//! then train and test side networks against them.

use crate::adapter::{FptConfig, SideNetwork};
use crate::cache::{self, CacheTarget, FeatureSource, PreloadReport};
use crate::data::{self, SynthImage};
use crate::error::Result;
use crate::train::{self, EvalResult, Sample, TrainConfig, TrainOutcome};
use crate::vit::ViT;

/// Cache key and file name of synthetic image `i`.
pub fn image_id(i: usize) -> String {
    format!("img_{i:05}.png")
}

/// Synthetic images split into train, validation and test, in that order.
pub struct SyntheticTask {
    pub cfg: FptConfig,
    pub images: Vec<SynthImage>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// A trained side network and its test metrics.
pub struct RunResult {
    pub net: SideNetwork,
    pub outcome: TrainOutcome,
    pub test: EvalResult,
}

impl RunResult {
    /// Test AUC, 0.5 when undefined.
    pub fn test_auc(&self) -> f64 {
        self.test.auc.unwrap_or(0.5)
    }
}

impl SyntheticTask {
    /// `n_train + n_val + n_test` images at `cfg.high_res` with
    /// `cfg.classes` classes.
    pub fn new(cfg: &FptConfig, seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<Self> {
        let n = n_train + n_val + n_test;
        let images = data::synth_dataset(seed, n, cfg.classes, cfg.high_res)?;
        let mut task = SyntheticTask {
            cfg: cfg.clone(),
            images: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, img) in images.iter().enumerate() {
            let sample = Sample {
                id: image_id(i),
                low: data::prepare_low(&img.to_tensor(), cfg.high_res, cfg.low_res)?,
                label: img.label,
            };
            match data::split_of(i, n, n_val, n_test) {
                data::Split::Train => task.train.push(sample),
                data::Split::Val => task.val.push(sample),
                data::Split::Test => task.test.push(sample),
            }
        }
        task.images = images;
        Ok(task)
    }

    /// Normalized LPM input of image `i`.
    pub fn high(&self, i: usize) -> Result<crate::Tensor> {
        data::prepare_high(&self.images[i].to_tensor(), self.cfg.high_res)
    }

    /// One LPM pass per image feeding every target cache.
    pub fn preload(&self, lpm: &ViT, targets: &[CacheTarget]) -> Result<PreloadReport> {
        let items = (0..self.images.len()).map(|i| (image_id(i), self.high(i)));
        cache::preload(items, lpm, targets)
    }

    /// Trains a side network built from `cfg` with `side_seed`, keeps its
    /// best validation epoch and evaluates it on the test split.
    pub fn run(
        &self,
        cfg: &FptConfig,
        source: &dyn FeatureSource,
        train_cfg: &TrainConfig,
        side_seed: u64,
    ) -> Result<RunResult> {
        let mut net = SideNetwork::new(cfg.clone(), side_seed)?;
        let outcome = train::train(&mut net, &self.train, &self.val, source, train_cfg)?;
        let test = train::evaluate(&net, &self.test, source)?;
        Ok(RunResult { net, outcome, test })
    }
}

//! Bodies of the `fpt` subcommands. Each returns the text it reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::adapter::SideNetwork;
use crate::cache::{self, CacheReader, CacheTarget, FeatureSource, NoFeatures};
use crate::config::RunConfig;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::profile::{self, EfficiencyReport};
use crate::tensor::weights;
use crate::train::{self, Sample};
use crate::vit::ViT;
use crate::viz;

pub fn config_or_default(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Writes `n` synthetic images and `labels.csv` under `out`; the last `test`
/// items form the test split and the `val` before them the validation split.
pub fn synth(out: &Path, n: usize, classes: usize, high_res: usize, seed: u64, val: usize, test: usize) -> Result<String> {
    let images = data::synth_dataset(seed, n, classes, high_res)?;
    let items = data::write_synthetic(out, &images, val, test)?;
    let count = |s: Split| items.iter().filter(|i| i.split == s).count();
    Ok(format!(
        "wrote {} images to {} (train {}, val {}, test {})\n",
        items.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    ))
}

/// Seeded random LPM weights, the stand-in for a pre-trained checkpoint.
pub fn init_lpm(cfg: &RunConfig, out: &Path) -> Result<String> {
    let lpm = ViT::new(cfg.model.lpm(), cfg.lpm_seed)?;
    weights::save(out, &lpm.named_params())?;
    Ok(format!("wrote {} LPM parameters to {}\n", lpm.param_count(), out.display()))
}

pub fn load_lpm(cfg: &RunConfig, path: &Path) -> Result<ViT> {
    let mut lpm = ViT::new(cfg.model.lpm(), cfg.lpm_seed)?;
    let extra = lpm.load_named(weights::load(path)?)?;
    if let Some((name, _)) = extra.first() {
        return Err(Error::Format(format!("{name}: not a parameter of the configured LPM")));
    }
    Ok(lpm)
}

/// Features of every dataset image, one LPM pass each.
pub fn preload(data_dir: &Path, weights_path: &Path, cfg: &RunConfig, out: &Path) -> Result<String> {
    let ds = Dataset::open(data_dir)?;
    let lpm = load_lpm(cfg, weights_path)?;
    let m = &cfg.model;
    let items = ds.items.iter().map(|item| {
        let img = ds.load(item, m.channels).and_then(|x| data::prepare_high(&x, m.high_res));
        (item.file.clone(), img)
    });
    let report = cache::preload(items, &lpm, &[CacheTarget { cfg: m.clone(), path: out.to_path_buf() }])?;
    if let Some((id, e)) = report.failures.first() {
        return Err(Error::Data(format!(
            "{} of {} images failed, first {id}: {e}",
            report.failures.len(),
            ds.items.len()
        )));
    }
    Ok(format!("cached {} images in {}\n", report.written, out.display()))
}

fn samples(ds: &Dataset, split: Split, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let m = &cfg.model;
    if ds.class_count > m.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, configuration {}",
            ds.class_count, m.classes
        )));
    }
    ds.split(split)
        .map(|item| {
            Ok(Sample {
                id: item.file.clone(),
                low: data::prepare_low(&ds.load(item, m.channels)?, m.high_res, m.low_res)?,
                label: item.label,
            })
        })
        .collect()
}

fn open_source(cache_path: Option<&Path>, cfg: &RunConfig) -> Result<Box<dyn FeatureSource>> {
    match cache_path {
        Some(p) => Ok(Box::new(CacheReader::open(p)?)),
        None if !cfg.model.fusion => Ok(Box::new(NoFeatures)),
        None => Err(Error::Config("fusion is on, a feature cache is required".into())),
    }
}

pub fn train(data_dir: &Path, cache_path: Option<&Path>, cfg: &RunConfig, out: &Path, log: &Path) -> Result<String> {
    let ds = Dataset::open(data_dir)?;
    let source = open_source(cache_path, cfg)?;
    let train_set = samples(&ds, Split::Train, cfg)?;
    let val_set = samples(&ds, Split::Val, cfg)?;
    let mut net = SideNetwork::new(cfg.model.clone(), cfg.side_seed)?;
    let outcome = train::train(&mut net, &train_set, &val_set, source.as_ref(), &cfg.train)?;
    weights::save(out, &net.named_params())?;
    train::write_log(log, &outcome.log)?;
    let mut s = String::new();
    let _ = writeln!(s, "trained {} steps on {} images, kept epoch {}", outcome.steps, train_set.len(), outcome.best_epoch);
    if let Some(auc) = outcome.val_history.get(outcome.best_epoch - 1).and_then(|v| v.auc) {
        let _ = writeln!(s, "val auc {auc:.6}");
    }
    Ok(s)
}

pub fn load_side(cfg: &RunConfig, path: &Path) -> Result<SideNetwork> {
    let mut net = SideNetwork::new(cfg.model.clone(), cfg.side_seed)?;
    let extra = net.load_named(weights::load(path)?)?;
    if let Some((name, _)) = extra.first() {
        return Err(Error::Format(format!("{name}: not a parameter of the configured side network")));
    }
    Ok(net)
}

pub fn eval(data_dir: &Path, cache_path: Option<&Path>, model: &Path, split: Split, cfg: &RunConfig) -> Result<String> {
    let ds = Dataset::open(data_dir)?;
    let source = open_source(cache_path, cfg)?;
    let net = load_side(cfg, model)?;
    let set = samples(&ds, split, cfg)?;
    let r = train::evaluate(&net, &set, source.as_ref())?;
    let auc = r.auc.ok_or_else(|| Error::UndefinedMetric(format!("{split} split lacks a class")))?;
    let mut s = format!("split {split}\nimages {}\nloss {:.6}\nauc {auc:.6}\n", set.len(), r.loss);
    for (c, a) in r.per_class.iter().enumerate() {
        let _ = writeln!(s, "auc_class_{c} {a:.6}");
    }
    Ok(s)
}

pub fn table1(score: f64, r: f64, m: f64) -> String {
    format!("ppe {:.2}\npme {:.2}\n", profile::ppe(score, r), profile::pme(score, m))
}

/// Parameter census and, unless `skip_memory`, ledger peaks of one FPT+
/// step and one full fine-tuning step at the configured resolution.
pub fn profile(cfg: &RunConfig, score: f64, skip_memory: bool) -> Result<String> {
    let m = &cfg.model;
    let lpm = ViT::new(m.lpm(), cfg.lpm_seed)?;
    let side = SideNetwork::new(m.clone(), cfg.side_seed)?;
    let census = profile::param_census(&lpm, &side);
    drop((lpm, side));
    let mut s = String::new();
    for g in &census.groups {
        let _ = writeln!(s, "group {} learnable {} total {}", g.name, g.learnable, g.total);
    }
    if skip_memory {
        let _ = writeln!(s, "learnable_params {}\ntotal_params {}\nr {}", census.learnable(), census.total(), census.ratio());
        let _ = writeln!(s, "ppe {}", profile::ppe(score, census.ratio()));
        return Ok(s);
    }
    let method = profile::fpt_peak(m, cfg.side_seed)?;
    let full = profile::full_ft_peak(m, cfg.lpm_seed)?;
    s.push_str(&EfficiencyReport::new(&census, method, full, score)?.render());
    Ok(s)
}

/// Selection raster of `image` for side layer `layer` (1-based). With a
/// trained model the cells carry the prompt attention of that layer.
pub fn viz(
    image: &Path,
    cache_path: &Path,
    out: &Path,
    layer: Option<usize>,
    model: Option<&Path>,
    cfg: &RunConfig,
) -> Result<String> {
    let reader = CacheReader::open(cache_path)?;
    let key = image
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("{} has no file name", image.display())))?;
    let feats = reader.load_record(&key)?;
    let l = layer.unwrap_or(feats.len());
    if l == 0 || l > feats.len() {
        return Err(Error::Config(format!("layer {l} outside 1..={}", feats.len())));
    }
    let grid = cfg.model.lpm().grid();
    let attention = match model {
        Some(p) => {
            reader.check(&cache::Fingerprint::of(&cfg.model))?;
            let net = load_side(cfg, p)?;
            let m = &cfg.model;
            let low = data::prepare_low(&data::load_image(image, m.channels)?, m.high_res, m.low_res)?;
            let (_, attn) = crate::tensor::graph::no_grad(|| {
                net.forward_traced(&data::normalize(&low), &feats, &mut |_, _| {})
            })?;
            attn.into_iter().nth(l - 1)
        }
        None => None,
    };
    let map = viz::export_selection_map(grid, &feats[l - 1], attention.as_ref(), out)?;
    Ok(format!(
        "layer {l}: {} of {} cells selected\nwrote {} and {}\n",
        map.on_count(),
        grid * grid,
        out.display(),
        viz::mask_path(out).display()
    ))
}

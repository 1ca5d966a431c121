//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`. The learnability
//! criteria train fifteen side networks on 256 px synthetic images and take
//! tens of minutes on one core; `FPT_ACCEPT_QUICK=1` skips them.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use fpt::adapter::{select_important, side_layer_map, FptConfig, Selection, SideNetwork};
use fpt::cache::{CacheReader, CacheTarget, Fingerprint, FeatureSource, LiveFeatures};
use fpt::experiment::SyntheticTask;
use fpt::gradcheck::{GradReport, Tolerance};
use fpt::metrics::auc;
use fpt::nn::Params;
use fpt::profile::{self, param_census, pme, ppe};
use fpt::tensor::{graph, init, Tensor};
use fpt::train::{self, AdamW, Sample, TrainConfig};
use fpt::vit::{extract_patches, ViT};
use fpt::{cache, viz, Result};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(n: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = f();
    verdict(n, name, limit, start.elapsed(), result)
}

fn verdict(n: usize, name: &str, limit: Option<Duration>, took: Duration, result: Result<Outcome>) -> bool {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = limit.is_none_or(|l| took <= l);
    let budget = limit.map_or(String::new(), |l| format!(" / limit {}s", l.as_secs()));
    let verdict = if pass && in_time { "PASS" } else { "FAIL" };
    let late = if pass && !in_time { ", over time limit" } else { "" };
    println!("criterion {n:>2} {name}: {verdict} ({detail}{late}; {:.1}s{budget})", took.as_secs_f64());
    pass && in_time
}

fn c1() -> Result<Outcome> {
    let cases = [
        ("ppe(88.82, 1.0)", ppe(88.82, 1.0), 65.73),
        ("ppe(87.12, 0.0103)", ppe(87.12, 0.0103), 86.73),
        ("pme(87.12, 736/23128)", pme(87.12, 736.0 / 23128.0), 85.94),
        ("ppe(83.28, 0.0001)", ppe(83.28, 0.0001), 83.28),
        ("pme(83.28, 3416/23128)", pme(83.28, 3416.0 / 23128.0), 78.44),
    ];
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let shown: Vec<String> = cases.iter().map(|(n, got, _)| format!("{n}={got:.2}")).collect();
    Ok(outcome(worst <= 0.01, format!("{}, max err {worst:.4}", shown.join(" "))))
}

fn c2() -> Result<Outcome> {
    let cfg = FptConfig::default();
    let lpm = ViT::new(cfg.lpm(), 0)?;
    let side = SideNetwork::new(cfg, 0)?;
    let census = param_census(&lpm, &side);
    let lpm_total = census.groups[0].total as f64;
    let r = census.ratio();
    let pass = (0.0073..=0.0133).contains(&r) && (lpm_total / 86e6 - 1.0).abs() <= 0.02;
    Ok(outcome(pass, format!("learnable/total {:.4}%, LPM {:.2}M", 100.0 * r, lpm_total / 1e6)))
}

fn c3() -> Result<Outcome> {
    let tokens = |res: usize| -> Result<usize> {
        let img = Tensor::zeros(&[res, res, 3]);
        Ok(extract_patches(&img, 16, 3)?.shape()[0])
    };
    let (small, large) = (tokens(224)?, tokens(512)?);
    let scores: Vec<f64> = (0..1024).map(|i| ((i * 7919) % 1031) as f64).collect();
    let picked = select_important(&scores, 0.2)?.len();
    Ok(outcome(
        small == 196 && large == 1024 && picked == 204,
        format!("224²→{small}, 512²→{large}, ratio 0.2 of 1024→{picked}"),
    ))
}

fn c4() -> Result<Outcome> {
    let map: Vec<usize> = (1..=6).map(|l| side_layer_map(12, 6, l)).collect::<Result<_>>()?;
    Ok(outcome(map == (7..=12).collect::<Vec<_>>(), format!("1..6 → {map:?}")))
}

fn c5() -> Result<Outcome> {
    let tol = Tolerance::PIPELINE;
    let mut pooled = GradReport::default();
    let mut worst = (String::new(), 1.0f64);
    for &(name, case) in common::grad::CASES {
        let r = common::grad::run(name, case, 20, tol)?;
        if r.pass_rate() < worst.1 {
            worst = (name.to_string(), r.pass_rate());
        }
        pooled.merge(r);
    }
    let rate = pooled.pass_rate();
    Ok(outcome(
        rate >= 0.98 && worst.1 >= 0.98,
        format!(
            "{} suites × 20 seeds, {}/{} elements ({:.2}%), lowest {} {:.2}%",
            common::grad::CASES.len(),
            pooled.passed,
            pooled.checked,
            100.0 * rate,
            worst.0,
            100.0 * worst.1
        ),
    ))
}

fn c6() -> Result<Outcome> {
    let cfg = common::toy();
    let lpm = ViT::new(cfg.lpm(), 0)?;
    let before = lpm.named_params();
    let images: Vec<Tensor> = (0..8).map(|i| common::image(cfg.high_res, cfg.channels, 100 + i)).collect();
    let samples = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            Ok(Sample { id: i.to_string(), low: fpt::data::prepare_low(img, cfg.high_res, cfg.low_res)?, label: i % 2 })
        })
        .collect::<Result<Vec<_>>>()?;
    let source = LiveFeatures { lpm: &lpm, cfg: &cfg, image: |id: &str| Ok(images[id.parse::<usize>().unwrap()].clone()) };
    let mut net = SideNetwork::new(cfg.clone(), 1)?;
    let tc = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    train::train(&mut net, &samples[..6], &samples[6..], &source, &tc)?;
    let frozen = before.iter().zip(lpm.named_params()).all(|((_, a), (_, b))| a.bit_eq(&b) && !b.has_grad());

    let nodes = |lpm_layers: usize| -> Result<usize> {
        let c = FptConfig { lpm_layers, side_layers: 6, ..cfg.clone() };
        let feats = common::features(&ViT::new(c.lpm(), 0)?, &c, 1);
        let mut net = SideNetwork::new(c.clone(), 3)?;
        let mut opt = AdamW::new((0.9, 0.999), 1e-8, 0.0);
        let low = common::image(c.low_res, c.channels, 2);
        Ok(train::train_step(&mut net, &mut opt, &[(low, feats)], &[1], 1e-3)?.nodes)
    };
    let (n12, n24) = (nodes(12)?, nodes(24)?);
    Ok(outcome(
        frozen && n12 == n24,
        format!("LPM bitwise unchanged: {frozen}, nodes per step L_M=12 {n12} vs L_M=24 {n24}"),
    ))
}

fn c7(dir: &Path) -> Result<Outcome> {
    let cfg = common::toy();
    let lpm = ViT::new(cfg.lpm(), 0)?;
    let images: Vec<(String, Tensor)> =
        (0..50).map(|i| (format!("img_{i:03}"), common::image(cfg.high_res, cfg.channels, 1000 + i))).collect();
    let path = dir.join("c7.fptc");
    let items = images.iter().map(|(id, t)| (id.clone(), Ok(t.clone())));
    cache::preload(items, &lpm, &[CacheTarget { cfg: cfg.clone(), path: path.clone() }])?;
    let reader = CacheReader::open_checked(&path, &Fingerprint::of(&cfg))?;
    let net = SideNetwork::new(cfg.clone(), 3)?;
    let mut equal = 0;
    for (i, (id, img)) in images.iter().enumerate() {
        let low = common::image(cfg.low_res, cfg.channels, i as u64);
        let cached = graph::no_grad(|| net.forward(&low, &reader.features(id)?))?;
        let fresh = graph::no_grad(|| net.forward(&low, &cache::extract(&lpm, &cfg, id, img)?))?;
        equal += usize::from(cached.bit_eq(&fresh));
    }
    Ok(outcome(equal == images.len(), format!("{equal}/{} images bitwise equal", images.len())))
}

fn c8() -> Result<Outcome> {
    let cfg = FptConfig::default();
    let method = profile::fpt_peak(&cfg, 0)?;
    let full: Vec<u64> = [128, 256, 512]
        .iter()
        .map(|&r| profile::full_ft_peak(&FptConfig { high_res: r, ..cfg.clone() }, 0))
        .collect::<Result<_>>()?;
    let ratio = method as f64 / full[2] as f64;
    let increasing = full.windows(2).all(|w| w[0] < w[1]);
    let mb = |b: u64| b as f64 / 1e6;
    Ok(outcome(
        ratio < 0.25 && increasing,
        format!(
            "FPT+ {:.1} MB vs full {:.1} MB at 512 ({:.2}%), full at 128/256/512: {:.1}/{:.1}/{:.1} MB",
            mb(method),
            mb(full[2]),
            100.0 * ratio,
            mb(full[0]),
            mb(full[1]),
            mb(full[2])
        ),
    ))
}

struct Learnability {
    fpt: Vec<f64>,
    plain: Vec<f64>,
    random: Vec<f64>,
    elapsed: Duration,
    random_elapsed: Duration,
}

fn learnability(dir: &Path) -> Result<Learnability> {
    let start = Instant::now();
    let cfg = FptConfig { high_res: 256, low_res: 64, ..FptConfig::default() };
    let rnd = FptConfig { selection: Selection::Random, ..cfg.clone() };
    let plain = FptConfig { fusion: false, ..cfg.clone() };
    // 512 training images, 64 of them held out for checkpoint selection.
    let task = SyntheticTask::new(&cfg, 0, 448, 64, 128)?;
    let lpm = ViT::new(cfg.lpm(), 0)?;
    let (imp_path, rnd_path) = (dir.join("important.fptc"), dir.join("random.fptc"));
    task.preload(
        &lpm,
        &[CacheTarget { cfg: cfg.clone(), path: imp_path.clone() }, CacheTarget { cfg: rnd.clone(), path: rnd_path.clone() }],
    )?;
    let important = CacheReader::open_checked(&imp_path, &Fingerprint::of(&cfg))?;
    let random = CacheReader::open_checked(&rnd_path, &Fingerprint::of(&rnd))?;
    let mut out = Learnability {
        fpt: Vec::new(),
        plain: Vec::new(),
        random: Vec::new(),
        elapsed: Duration::ZERO,
        random_elapsed: Duration::ZERO,
    };
    for seed in 0..5 {
        let tc = TrainConfig { seed, ..TrainConfig::default() };
        out.fpt.push(task.run(&cfg, &important, &tc, seed)?.test_auc());
        out.plain.push(task.run(&plain, &important, &tc, seed)?.test_auc());
        let t = Instant::now();
        out.random.push(task.run(&rnd, &random, &tc, seed)?.test_auc());
        out.random_elapsed += t.elapsed();
        println!(
            "  seed {seed}: FPT+ {:.4}, fusion off {:.4}, random tokens {:.4} ({:.0}s elapsed)",
            out.fpt[seed as usize],
            out.plain[seed as usize],
            out.random[seed as usize],
            start.elapsed().as_secs_f64()
        );
    }
    out.elapsed = start.elapsed() - out.random_elapsed;
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
}

fn c9(l: &Learnability) -> Outcome {
    let hits = l.fpt.iter().filter(|&&a| a >= 0.90).count();
    let gap = mean(&l.fpt) - mean(&l.plain);
    outcome(
        hits >= 4 && gap >= 0.05,
        format!(
            "FPT+ [{}] {hits}/5 ≥ 0.90, fusion off [{}], mean gap {gap:.3}; time covers preload, FPT+ and baseline",
            fmt(&l.fpt),
            fmt(&l.plain),
        ),
    )
}

fn c10(l: &Learnability) -> Outcome {
    let (imp, rnd) = (mean(&l.fpt), mean(&l.random));
    outcome(imp >= rnd, format!("important mean {imp:.4} vs random mean {rnd:.4} [{}]", fmt(&l.random)))
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice += if si > sj { 2 } else { u64::from(si == sj) };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn c11() -> Result<Outcome> {
    let mut rng = init::rng(2024);
    let (mut checked, mut exact) = (0, 0);
    while checked < 1000 {
        let n = rng.random_range(2..80);
        let levels = rng.random_range(1..16);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        checked += 1;
        exact += usize::from(auc(&scores, &labels)? == brute_auc(&scores, &labels));
    }
    Ok(outcome(exact == checked, format!("{exact}/{checked} instances exact")))
}

fn c12(dir: &Path) -> Result<Outcome> {
    let cfg = common::toy();
    let run = |tag: &str| -> Result<Vec<Vec<u8>>> {
        let task = SyntheticTask::new(&cfg, 5, 16, 4, 4)?;
        let lpm = ViT::new(cfg.lpm(), 0)?;
        let cache_path = dir.join(format!("c12_{tag}.fptc"));
        task.preload(&lpm, &[CacheTarget { cfg: cfg.clone(), path: cache_path.clone() }])?;
        let reader = CacheReader::open_checked(&cache_path, &Fingerprint::of(&cfg))?;
        let tc = TrainConfig { epochs: 2, batch_size: 4, seed: 7, ..TrainConfig::default() };
        let result = task.run(&cfg, &reader, &tc, 7)?;
        let log_path = dir.join(format!("c12_{tag}.csv"));
        train::write_log(&log_path, &result.outcome.log)?;
        let feats = reader.features(&task.test[0].id)?;
        let (_, attention) =
            graph::no_grad(|| result.net.forward_traced(&data_low(&task.test[0]), &feats, &mut |_, _| {}))?;
        let map_path = dir.join(format!("c12_{tag}.pgm"));
        let grid = cfg.high_res / cfg.patch_size;
        viz::export_selection_map(grid, &feats[0], attention.first(), &map_path)?;
        [cache_path, log_path, map_path.clone(), viz::mask_path(&map_path)]
            .iter()
            .map(|p| Ok(std::fs::read(p)?))
            .collect()
    };
    let (a, b) = (run("a")?, run("b")?);
    let names = ["cache", "log", "raster", "mask"];
    let same: Vec<&str> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x == y).map(|(n, _)| *n).collect();
    Ok(outcome(same.len() == names.len(), format!("identical across two runs: {}", same.join(", "))))
}

fn data_low(s: &Sample) -> Tensor {
    fpt::data::normalize(&s.low)
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let secs = Duration::from_secs;
    let mut passed = 0;
    let mut total = 0;
    let mut tally = |ok: bool| {
        total += 1;
        passed += usize::from(ok);
    };
    tally(report(1, "efficiency metrics", Some(secs(1)), c1));
    tally(report(2, "parameter ratio", Some(secs(10)), c2));
    tally(report(3, "token arithmetic", None, c3));
    tally(report(4, "layer mapping", None, c4));
    tally(report(5, "gradient suite", Some(secs(120)), c5));
    tally(report(6, "frozen LPM", Some(secs(120)), c6));
    tally(report(7, "cache equivalence", Some(secs(60)), || c7(dir.path())));
    tally(report(8, "memory", Some(secs(120)), c8));
    if std::env::var_os("FPT_ACCEPT_QUICK").is_some() {
        println!("criterion  9 learnability: SKIPPED (FPT_ACCEPT_QUICK)");
        println!("criterion 10 selection strategy: SKIPPED (FPT_ACCEPT_QUICK)");
    } else {
        match learnability(dir.path()) {
            Ok(l) => {
                tally(verdict(9, "learnability", Some(secs(600)), l.elapsed, Ok(c9(&l))));
                tally(report(10, "selection strategy", None, || Ok(c10(&l))));
            }
            Err(e) => {
                let msg = e.to_string();
                tally(verdict(9, "learnability", None, Duration::ZERO, Err(fpt::Error::Data(msg.clone()))));
                tally(verdict(10, "selection strategy", None, Duration::ZERO, Err(fpt::Error::Data(msg))));
            }
        }
    }
    tally(report(11, "AUC oracle", None, c11));
    tally(report(12, "determinism", None, || c12(dir.path())));
    println!("{passed}/{total} criteria passed");
}

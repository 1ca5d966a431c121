//! Preload once, then train FPT+ and a fusion-off baseline on the synthetic
//! stamp task and compare test AUC.
//!
//! `cargo run --release --example train_synthetic [epochs]`

use fpt::adapter::FptConfig;
use fpt::cache::{CacheReader, CacheTarget};
use fpt::experiment::SyntheticTask;
use fpt::train::{self, TrainConfig};
use fpt::vit::ViT;

fn main() -> fpt::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(10, |s| s.parse().expect("epochs"));
    let cfg = FptConfig { high_res: 128, low_res: 32, ..FptConfig::default() };
    let task = SyntheticTask::new(&cfg, 0, 160, 32, 64)?;
    let dir = std::env::temp_dir().join("fpt-train-synthetic");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("important.fptc");
    task.preload(&ViT::new(cfg.lpm(), 0)?, &[CacheTarget { cfg: cfg.clone(), path: path.clone() }])?;
    let cache = CacheReader::open(&path)?;

    let tc = TrainConfig { epochs, ..TrainConfig::default() };
    let fpt = task.run(&cfg, &cache, &tc, 0)?;
    print!("{}", train::log_csv(&fpt.outcome.log));
    train::write_log(dir.join("fpt.csv"), &fpt.outcome.log)?;
    let plain = task.run(&FptConfig { fusion: false, ..cfg.clone() }, &cache, &tc, 0)?;
    println!("FPT+ test AUC {:.4} (best epoch {})", fpt.test_auc(), fpt.outcome.best_epoch);
    println!("fusion off test AUC {:.4} (best epoch {})", plain.test_auc(), plain.outcome.best_epoch);
    Ok(())
}

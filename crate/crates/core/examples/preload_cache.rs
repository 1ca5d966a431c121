//! One LPM pass per image writing an important-token cache and a
//! random-token cache, then reading them back.
//!
//! `cargo run --release --example preload_cache [out_dir]`

use std::time::Instant;

use fpt::adapter::{FptConfig, Selection};
use fpt::cache::{self, CacheReader, CacheTarget, Fingerprint};
use fpt::experiment::SyntheticTask;
use fpt::vit::ViT;

fn main() -> fpt::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("fpt-preload"), Into::into);
    std::fs::create_dir_all(&out)?;
    let cfg = FptConfig { high_res: 128, low_res: 64, ..FptConfig::default() };
    let random = FptConfig { selection: Selection::Random, ..cfg.clone() };
    let task = SyntheticTask::new(&cfg, 0, 24, 4, 4)?;
    let lpm = ViT::new(cfg.lpm(), 0)?;

    let targets = [
        CacheTarget { cfg: cfg.clone(), path: out.join("important.fptc") },
        CacheTarget { cfg: random.clone(), path: out.join("random.fptc") },
    ];
    let start = Instant::now();
    let report = task.preload(&lpm, &targets)?;
    println!("{} images preloaded in {:.1}s, {} failures", report.written, start.elapsed().as_secs_f64(), report.failures.len());

    for t in &targets {
        let reader = CacheReader::open_checked(&t.path, &Fingerprint::of(&t.cfg))?;
        let first = reader.load_record(&reader.ids()[0])?;
        println!(
            "{}: {} records, {} bytes on disk, layers {:?}, {} tokens per layer, first indices {:?}",
            t.path.display(),
            reader.ids().len(),
            std::fs::metadata(&t.path)?.len(),
            first.iter().map(|l| l.layer_index).collect::<Vec<_>>(),
            first[0].len(),
            &first[0].indices[..6]
        );
    }
    let full = FptConfig::default();
    println!(
        "ViT-B at 512²: {:.2} MB per image for {} selected tokens across {} layers",
        cache::record_bytes(full.side_layers, full.n_selected(), full.lpm_dim) as f64 / 1e6,
        full.n_selected(),
        full.side_layers
    );

    // A cache built for another token ratio is refused.
    let other = FptConfig { token_ratio: 0.5, ..cfg };
    match CacheReader::open_checked(&targets[0].path, &Fingerprint::of(&other)) {
        Err(e) => println!("mismatched config refused: {e}"),
        Ok(_) => println!("mismatched config was accepted"),
    }
    Ok(())
}

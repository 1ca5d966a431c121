//! Token arithmetic of ViT-B and the taps the frozen LPM hands to the side
//! network.
//!
//! `cargo run --release --example vit_taps [high_res]`

use fpt::adapter::FptConfig;
use fpt::tensor::{graph, init, ledger};
use fpt::vit::{ViT, ViTConfig};

fn main() -> fpt::Result<()> {
    let res: usize = std::env::args().nth(1).map_or(224, |s| s.parse().expect("resolution"));
    for r in [224, 384, 512] {
        let c = ViTConfig::vit_b(r);
        println!("ViT-B/{} at {r}²: {} patches, {} tokens with class token", c.patch_size, c.n_patches(), c.n_tokens());
    }

    let cfg = FptConfig { high_res: res, ..FptConfig::default() };
    let lpm = ViT::new(cfg.lpm(), 0)?;
    let image = init::uniform(&[res, res, cfg.channels], -1.0, 1.0, &mut init::rng(1));
    let layers = cfg.tap_layers();
    println!("side layers 1..={} read LPM layers {layers:?}", cfg.side_layers);

    let before = ledger::snapshot().live_bytes;
    let nodes = graph::node_count();
    let taps = lpm.lpm_forward(&image, &layers)?;
    for tap in &taps {
        println!(
            "layer {:>2}: attention {:?}, keys {:?}, values {:?}",
            tap.layer_index,
            tap.attn.shape(),
            tap.keys.shape(),
            tap.values.shape()
        );
    }
    println!(
        "taps hold {:.1} MB, graph nodes recorded {}",
        (ledger::snapshot().live_bytes - before) as f64 / 1e6,
        graph::node_count() - nodes
    );
    Ok(())
}

//! Exports the patch-grid raster of the tokens one fusion layer read,
//! shaded by prompt attention, plus its boolean mask.
//!
//! `cargo run --release --example selection_map [out.pgm]`

use fpt::adapter::{FptConfig, SideNetwork};
use fpt::data::{self, synth_dataset};
use fpt::tensor::graph;
use fpt::vit::ViT;
use fpt::viz;

fn main() -> fpt::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("selection.pgm"), Into::into);
    let cfg = FptConfig { high_res: 256, low_res: 64, ..FptConfig::default() };
    let image = synth_dataset(5, 2, 2, cfg.high_res)?.into_iter().find(|i| i.label == 1).expect("class 1 image");
    let lpm = ViT::new(cfg.lpm(), 0)?;
    let high = data::prepare_high(&image.to_tensor(), cfg.high_res)?;
    let feats = fpt::cache::extract(&lpm, &cfg, "example", &high)?;
    let low = data::normalize(&data::prepare_low(&image.to_tensor(), cfg.high_res, cfg.low_res)?);
    let net = SideNetwork::new(cfg.clone(), 0)?;
    let (_, attention) = graph::no_grad(|| net.forward_traced(&low, &feats, &mut |_, _| {}))?;

    let grid = cfg.high_res / cfg.patch_size;
    let map = viz::export_selection_map(grid, &feats[0], attention.first(), &out)?;
    println!(
        "side layer 1 read LPM layer {}: {} of {} cells selected",
        feats[0].layer_index,
        map.on_count(),
        grid * grid
    );
    println!("wrote {} and {}", out.display(), viz::mask_path(&out).display());
    Ok(())
}

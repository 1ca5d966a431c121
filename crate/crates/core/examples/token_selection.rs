//! Important-token selection against random selection on one synthetic
//! image, drawn as an ASCII patch grid.
//!
//! `cargo run --release --example token_selection [ratio]`

use fpt::adapter::{importance_scores, select_important, select_random, selection_count, FptConfig};
use fpt::data::{self, synth_dataset};
use fpt::vit::ViT;

fn grid(n: usize, picked: &[usize], stamp: &[usize]) {
    for y in 0..n {
        let row: String = (0..n)
            .map(|x| {
                let i = y * n + x;
                match (picked.contains(&i), stamp.contains(&i)) {
                    (true, true) => '#',
                    (true, false) => 'o',
                    (false, true) => '+',
                    (false, false) => '.',
                }
            })
            .collect();
        println!("  {row}");
    }
}

fn main() -> fpt::Result<()> {
    let ratio: f64 = std::env::args().nth(1).map_or(0.2, |s| s.parse().expect("ratio"));
    let cfg = FptConfig { high_res: 256, ..FptConfig::default() };
    let n = cfg.high_res / cfg.patch_size;
    let image = synth_dataset(3, 2, 2, cfg.high_res)?.into_iter().find(|i| i.stamp.is_some()).expect("class 1 image");
    let s = image.stamp.as_ref().expect("stamp");
    let p = cfg.patch_size;
    let stamp: Vec<usize> = (s.y / p..=(s.y + s.size - 1) / p)
        .flat_map(|y| (s.x / p..=(s.x + s.size - 1) / p).map(move |x| y * n + x))
        .collect();

    let lpm = ViT::new(cfg.lpm(), 0)?;
    let high = data::prepare_high(&image.to_tensor(), cfg.high_res)?;
    let layer = cfg.tap_layers()[0];
    let tap = lpm.lpm_forward(&high, &[layer])?.remove(0);
    let scores = importance_scores(&tap.attn, true)?;
    let important = select_important(&scores, ratio)?;
    let random = select_random(n * n, ratio, 7)?;
    println!("{} of {} patches kept at ratio {ratio}", selection_count(n * n, ratio), n * n);
    println!("legend: # kept stamp patch, o kept, + missed stamp patch, . dropped");
    println!("important tokens, LPM layer {layer}:");
    grid(n, &important, &stamp);
    println!("random tokens:");
    grid(n, &random, &stamp);
    Ok(())
}

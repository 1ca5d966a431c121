//! Finite-difference check of the side network on a 32×32 toy config.
//!
//! `cargo run --example gradcheck [seeds]`

use fpt::adapter::{FptConfig, Selection, SideNetwork};
use fpt::gradcheck::{check_fn, check_module, GradReport, Tolerance};
use fpt::tensor::{init, ops};
use fpt::vit::ViT;

fn main() -> fpt::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(5, |s| s.parse().expect("seed count"));
    let cfg = FptConfig {
        high_res: 32,
        low_res: 16,
        patch_size: 8,
        channels: 3,
        lpm_layers: 2,
        lpm_dim: 16,
        heads: 2,
        mlp_ratio: 2,
        side_layers: 2,
        reduction: 2,
        prompts: 3,
        token_ratio: 0.25,
        classes: 2,
        selection: Selection::Important,
        selection_seed: 0,
        fusion: true,
    };
    let lpm = ViT::new(cfg.lpm(), 0)?;

    let mut attention = GradReport::default();
    let mut pipeline = GradReport::default();
    for seed in 0..seeds {
        let mut rng = init::rng(seed);
        let q = init::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let kv = init::uniform(&[7, 8], -1.0, 1.0, &mut rng);
        attention.merge(check_fn(
            &[q, kv.clone(), kv],
            |x| Ok(ops::attention(&x[0], &x[1], &x[2], 2, false)?.0),
            seed,
            Tolerance::OPS,
        )?);

        let high = init::uniform(&[32, 32, 3], -1.0, 1.0, &mut rng);
        let low = init::uniform(&[16, 16, 3], -1.0, 1.0, &mut rng);
        let feats = fpt::cache::extract(&lpm, &cfg, "probe", &high)?;
        let mut net = SideNetwork::new(cfg.clone(), seed)?;
        pipeline.merge(check_module(&mut net, |n: &SideNetwork| n.forward(&low, &feats), seed, Tolerance::PIPELINE, Some(6))?);
    }
    for (name, r) in [("attention", &attention), ("side pipeline", &pipeline)] {
        println!("{name:>14}: {}/{} elements within tolerance ({:.2}%)", r.passed, r.checked, 100.0 * r.pass_rate());
        for m in r.mismatches.iter().take(3) {
            println!("{:>16} {}[{}] analytic {:.6} numeric {:.6}", "miss", m.tensor, m.index, m.analytic, m.numeric);
        }
    }
    Ok(())
}

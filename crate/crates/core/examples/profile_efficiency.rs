//! Parameter census, PPE/PME and ledger peaks for FPT+ against full
//! fine-tuning.
//!
//! `cargo run --release --example profile_efficiency [high_res]`

use fpt::adapter::{FptConfig, SideNetwork};
use fpt::profile::{self, param_census, EfficiencyReport};
use fpt::vit::ViT;

fn main() -> fpt::Result<()> {
    let res: usize = std::env::args().nth(1).map_or(224, |s| s.parse().expect("resolution"));
    let cfg = FptConfig { high_res: res, ..FptConfig::default() };
    let lpm = ViT::new(cfg.lpm(), 0)?;
    let side = SideNetwork::new(cfg.clone(), 0)?;
    let census = param_census(&lpm, &side);
    for g in &census.groups {
        println!("{:<16} learnable {:>9} total {:>9}", g.name, g.learnable, g.total);
    }

    println!("published rows recomputed:");
    println!("  full fine-tuning  PPE {:.2}", profile::ppe(88.82, 1.0));
    println!("  FPT+              PPE {:.2}", profile::ppe(87.12, 0.0103));
    println!("  FPT+              PME {:.2}", profile::pme(87.12, 736.0 / 23128.0));

    let method = profile::fpt_peak(&cfg, 0)?;
    let full = profile::full_ft_peak(&cfg, 0)?;
    let report = EfficiencyReport::new(&census, method, full, 87.12)?;
    println!("at {res}² with a task score of 87.12:");
    print!("{}", report.render());
    Ok(())
}

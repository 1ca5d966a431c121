mod common;

use fpt::adapter::{FptConfig, SelectedFeatures, SideNetwork};
use fpt::nn::Params;
use fpt::profile::{self, param_census, pme, ppe};
use fpt::tensor::Tensor;
use fpt::vit::ViT;
use fpt::viz;

#[test]
fn table_one_triples() {
    let cases = [
        (ppe(88.82, 1.0), 65.73),
        (ppe(87.12, 0.0103), 86.73),
        (pme(87.12, 736.0 / 23128.0), 85.94),
        (ppe(83.28, 0.0001), 83.28),
        (pme(83.28, 3416.0 / 23128.0), 78.44),
    ];
    for (got, want) in cases {
        assert!((got - want).abs() <= 0.01, "{got} vs {want}");
    }
    assert_eq!(ppe(50.0, 0.0), 50.0);
}

#[test]
fn default_census() {
    let cfg = FptConfig::default();
    let lpm = ViT::new(cfg.lpm(), 0).unwrap();
    let side = SideNetwork::new(cfg, 0).unwrap();
    let c = param_census(&lpm, &side);
    assert_eq!(c.total(), c.groups.iter().map(|g| g.total).sum::<usize>());
    assert_eq!(c.learnable(), side.param_count());
    let lpm_total = c.groups[0].total as f64;
    assert!((lpm_total / 86e6 - 1.0).abs() <= 0.02, "{lpm_total}");
    assert!((0.0073..=0.0133).contains(&c.ratio()), "{}", c.ratio());
}

#[test]
fn peaks_are_reproducible_and_ordered() {
    let cfg = common::toy();
    assert_eq!(profile::fpt_peak(&cfg, 0).unwrap(), profile::fpt_peak(&cfg, 0).unwrap());
    let full: Vec<u64> = [16, 32, 64]
        .iter()
        .map(|&r| profile::full_ft_peak(&FptConfig { high_res: r, low_res: r / 2, ..cfg.clone() }, 0).unwrap())
        .collect();
    assert!(full.windows(2).all(|w| w[0] < w[1]), "{full:?}");
    assert_eq!(full[1], profile::full_ft_peak(&cfg, 0).unwrap());
}

fn features(indices: Vec<usize>) -> SelectedFeatures {
    let n = indices.len();
    SelectedFeatures {
        layer_index: 1,
        indices,
        keys: Tensor::zeros(&[2, n, 4]),
        values: Tensor::zeros(&[2, n, 4]),
    }
}

#[test]
fn selection_rasters() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("map.pgm");
    let all = features((0..16).collect());
    let map = viz::export_selection_map(4, &all, None, &out).unwrap();
    assert_eq!(map.on_count(), 16);
    let mask = std::fs::read(viz::mask_path(&out)).unwrap();
    assert!(mask.ends_with(&[255u8; 16]));

    let sel: Vec<usize> = fpt::adapter::select_important(&(0..1024).map(|i| (i * 37 % 101) as f64).collect::<Vec<_>>(), 0.2).unwrap();
    let f = features(sel);
    let attn = fpt::tensor::init::uniform(&[2, 3, 204], 0.0, 1.0, &mut fpt::tensor::init::rng(1));
    let a = viz::export_selection_map(32, &f, Some(&attn), &out).unwrap();
    assert_eq!(a.on_count(), 204);
    let first = (std::fs::read(&out).unwrap(), std::fs::read(viz::mask_path(&out)).unwrap());
    viz::export_selection_map(32, &f, Some(&attn), &out).unwrap();
    let second = (std::fs::read(&out).unwrap(), std::fs::read(viz::mask_path(&out)).unwrap());
    assert_eq!(first, second);
    assert!(first.0.starts_with(b"P5\n32 32\n255\n"));
}

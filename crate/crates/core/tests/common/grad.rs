//! Finite-difference suites shared by the gradient tests and the
//! acceptance run.

use fpt::adapter::SideNetwork;
use fpt::gradcheck::{check_fn, check_module, GradReport, Tolerance};
use fpt::nn::{randomize, Params};
use fpt::tensor::{init, ops, Tensor};
use fpt::vit::{Block, ViT};
use fpt::Result;
use rand::Rng as _;

pub type Case = fn(&mut init::Rng, u64, Tolerance) -> Result<GradReport>;

fn uniform(shape: &[usize], rng: &mut init::Rng) -> Tensor {
    init::uniform(shape, -1.0, 1.0, rng)
}

fn dim(rng: &mut init::Rng) -> usize {
    rng.random_range(1..=5)
}

/// Pooled report of `case` over seeds `0..seeds`.
pub fn run(name: &str, case: Case, seeds: u64, tol: Tolerance) -> Result<GradReport> {
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut rng = init::rng_for(seed, name);
        total.merge(case(&mut rng, seed, tol)?);
    }
    Ok(total)
}

/// Every differentiable op, one transformer block and the full side
/// network forward.
pub const CASES: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("linear", linear),
    ("elementwise", elementwise),
    ("reductions", reductions),
    ("softmax", softmax),
    ("layer_norm", layer_norm),
    ("gelu", gelu),
    ("attention", attention),
    ("rows", rows),
    ("cross_entropy", cross_entropy),
    ("mlp", mlp),
    ("vit_block", vit_block),
    ("pipeline", pipeline),
];

pub fn matmul(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let a = uniform(&[m, k], rng);
    let b = uniform(&[k, n], rng);
    check_fn(&[a, b], |x| ops::matmul(&x[0], &x[1]), seed, tol)
}

pub fn linear(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let (n, i, o) = (dim(rng), dim(rng), dim(rng));
    let ins = [uniform(&[n, i], rng), uniform(&[i, o], rng), uniform(&[o], rng)];
    check_fn(&ins, |x| ops::linear(&x[0], &x[1], &x[2]), seed, tol)
}

pub fn elementwise(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let shape = [dim(rng), dim(rng)];
    let ins = [uniform(&shape, rng), uniform(&shape, rng)];
    let s = rng.random_range(-2.0..2.0f32);
    check_fn(
        &ins,
        |x| {
            let prod = ops::mul(&x[0], &x[1])?;
            ops::add(&ops::scale(&prod, s), &x[0])
        },
        seed,
        tol,
    )
}

pub fn reductions(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let a = uniform(&[dim(rng), dim(rng)], rng);
    check_fn(&[a], |x| ops::add(&ops::sum(&x[0]), &ops::scale(&ops::mean(&x[0]), 3.0)), seed, tol)
}

pub fn softmax(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let a = init::uniform(&[dim(rng), dim(rng) + 1], -3.0, 3.0, rng);
    check_fn(&[a], |x| ops::softmax_rows(&x[0]), seed, tol)
}

pub fn layer_norm(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let (n, d) = (dim(rng), dim(rng) + 2);
    let ins = [init::uniform(&[n, d], -2.0, 2.0, rng), uniform(&[d], rng), uniform(&[d], rng)];
    check_fn(&ins, |x| ops::layer_norm(&x[0], &x[1], &x[2], 1e-5), seed, tol)
}

pub fn gelu(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let a = init::uniform(&[dim(rng) * 4], -4.0, 4.0, rng);
    check_fn(&[a], |x| Ok(ops::gelu(&x[0])), seed, tol)
}

pub fn attention(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let heads = rng.random_range(1..=3);
    let d = heads * rng.random_range(1..=3);
    let (n, m) = (dim(rng), dim(rng));
    let ins = [uniform(&[n, d], rng), uniform(&[m, d], rng), uniform(&[m, d], rng)];
    check_fn(&ins, |x| Ok(ops::attention(&x[0], &x[1], &x[2], heads, false)?.0), seed, tol)
}

pub fn rows(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let d = dim(rng);
    let (p, q) = (dim(rng), dim(rng));
    let ins = [uniform(&[p, d], rng), uniform(&[q, d], rng)];
    let start = rng.random_range(0..p + q);
    let len = rng.random_range(1..=p + q - start);
    check_fn(
        &ins,
        |x| {
            let joined = ops::concat_rows(&[&x[0], &x[1]])?;
            ops::slice_rows(&joined, start, len)?.reshape(&[len * d])
        },
        seed,
        tol,
    )
}

pub fn cross_entropy(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let (b, c) = (4, 3);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let logits = init::uniform(&[b, c], -2.0, 2.0, rng);
    check_fn(&[logits], |x| ops::cross_entropy(&x[0], &labels), seed, tol)
}

pub fn mlp(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let ins = [
        uniform(&[3, 4], rng),
        uniform(&[4, 5], rng),
        uniform(&[5], rng),
        uniform(&[5, 2], rng),
        uniform(&[2], rng),
    ];
    check_fn(
        &ins,
        |x| {
            let h = ops::gelu(&ops::linear(&x[0], &x[1], &x[2])?);
            ops::cross_entropy(&ops::linear(&h, &x[3], &x[4])?, &[0, 1, 1])
        },
        seed,
        tol,
    )
}

/// One pre-norm block on three tokens, every weight learnable.
pub fn vit_block(rng: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let mut block = Block::new(8, 2);
    randomize(&mut block, seed);
    // Larger weights than the 0.02 init so every branch carries signal.
    block.visit_mut("", &mut |_, t| t.update_data(|d| d.iter_mut().for_each(|v| *v *= 5.0)));
    block.make_trainable();
    let x = uniform(&[3, 8], rng);
    check_module(&mut block, |b: &Block| Ok(b.forward(&x, 2, None)?.0), seed, tol, None)
}

/// The side network on the 32×32 toy configuration, fed by a frozen LPM.
pub fn pipeline(_: &mut init::Rng, seed: u64, tol: Tolerance) -> Result<GradReport> {
    let cfg = super::toy();
    let lpm = ViT::new(cfg.lpm(), 7)?;
    let mut net = SideNetwork::new(cfg.clone(), seed)?;
    let feats = super::features(&lpm, &cfg, seed);
    let low = super::image(cfg.low_res, cfg.channels, seed + 100);
    check_module(&mut net, |n: &SideNetwork| n.forward(&low, &feats), seed, tol, Some(6))
}

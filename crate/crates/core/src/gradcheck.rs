//! Central finite-difference checks of reverse-mode gradients.
//!
//! The scalar probed is `Σ out ⊙ R` for a fixed random `R`, accumulated in
//! `f64`, so every output element contributes to the check.

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{graph, init, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
    /// Perturbation applied to each input element, in both directions.
    pub step: f32,
}

impl Tolerance {
    pub const OPS: Tolerance = Tolerance { atol: 1e-4, rtol: 1e-2, step: 1e-3 };
    pub const PIPELINE: Tolerance = Tolerance { atol: 1e-4, rtol: 2e-2, step: 1e-3 };

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.atol + self.rtol * numeric.abs()
    }
}

/// One element whose gradients disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub passed: usize,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.mismatches.extend(other.mismatches);
    }
}

fn projected(out: &Tensor, r: &[f32]) -> f64 {
    out.data().iter().zip(r).map(|(&o, &w)| o as f64 * w as f64).sum()
}

/// Checks the gradient of every learnable tensor of `module` through
/// `forward`. `sample` caps how many elements per tensor are probed (chosen
/// by `seed`); `None` probes all of them.
pub fn check_module<M: Params>(
    module: &mut M,
    forward: impl Fn(&M) -> Result<Tensor>,
    seed: u64,
    tol: Tolerance,
    sample: Option<usize>,
) -> Result<GradReport> {
    graph::clear();
    module.visit("", &mut |_, t| t.zero_grad());
    let out = forward(module)?;
    let mut rng = init::rng_for(seed, "gradcheck/projection");
    let r = init::uniform(out.shape(), -1.0, 1.0, &mut rng);
    if !out.requires_grad() {
        graph::clear();
        return Err(Error::contract("gradcheck output does not depend on any parameter"));
    }
    let loss = crate::tensor::ops::sum(&crate::tensor::ops::mul(&out, &r)?);
    graph::backward(&loss)?;
    drop((out, loss));

    let mut analytic = Vec::new();
    module.visit("", &mut |name, t| {
        if t.is_leaf_parameter() {
            analytic.push((name, t.grad().unwrap_or_else(|| vec![0.0; t.numel()])));
        }
    });
    let mut report = GradReport::default();
    let mut pick = init::rng_for(seed, "gradcheck/elements");
    for (slot, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let indices: Vec<usize> = match sample {
            Some(k) if k < n => {
                let mut v = rand::seq::index::sample(&mut pick, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let mut eval = |delta: f32| -> Result<f64> {
                let mut saved = 0.0;
                edit_element(module, slot, i, &mut |v| {
                    saved = *v;
                    *v += delta;
                });
                let out = graph::no_grad(|| forward(module));
                edit_element(module, slot, i, &mut |v| *v = saved);
                Ok(projected(&out?, r.data()))
            };
            let plus = eval(tol.step)?;
            let minus = eval(-tol.step)?;
            let numeric = (plus - minus) / (2.0 * tol.step as f64);
            let a = grad[i] as f64;
            report.checked += 1;
            if tol.accepts(a, numeric) {
                report.passed += 1;
            } else {
                report.mismatches.push(Mismatch { tensor: name.clone(), index: i, analytic: a, numeric });
            }
        }
    }
    module.visit("", &mut |_, t| t.zero_grad());
    Ok(report)
}

/// Applies `edit` to element `i` of the `slot`-th learnable tensor.
fn edit_element<M: Params>(module: &mut M, slot: usize, i: usize, edit: &mut dyn FnMut(&mut f32)) {
    let mut seen = 0;
    module.visit_mut("", &mut |_, t| {
        if !t.is_leaf_parameter() {
            return;
        }
        if seen == slot {
            t.update_data(|d| edit(&mut d[i]));
        }
        seen += 1;
    });
}

/// Checks `f` with respect to each of `inputs`, which become learnable
/// leaves for the duration of the check.
pub fn check_fn(
    inputs: &[Tensor],
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    seed: u64,
    tol: Tolerance,
) -> Result<GradReport> {
    let mut leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().into_parameter()).collect();
    check_module(&mut leaves, |v: &Vec<Tensor>| f(v), seed, tol, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn matmul_passes() {
        let mut rng = init::rng(3);
        let a = init::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = init::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let rep = check_fn(&[a, b], |x| ops::matmul(&x[0], &x[1]), 0, Tolerance::OPS).unwrap();
        assert_eq!(rep.checked, 20);
        assert_eq!(rep.passed, 20, "{:?}", rep.mismatches);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // detach() hides the dependence on x[1] from the tape but not from
        // the finite differences.
        let mut rng = init::rng(4);
        let a = init::uniform(&[2, 2], -1.0, 1.0, &mut rng);
        let b = init::uniform(&[2, 2], 0.5, 1.0, &mut rng);
        let rep = check_fn(&[a, b], |x| ops::mul(&x[0], &x[1].detach()), 0, Tolerance::OPS).unwrap();
        assert_eq!(rep.checked, 8);
        assert_eq!(rep.passed, 4);
    }
}

//! Analytic gradients against central finite differences.

mod common;

use common::grad::{self, Case};
use fpt::gradcheck::Tolerance;

const SEEDS: u64 = 20;

fn suite(name: &str, case: Case, tol: Tolerance) {
    let total = grad::run(name, case, SEEDS, tol).unwrap();
    assert!(total.checked > 0);
    assert!(
        total.pass_rate() >= 0.98,
        "{name}: {}/{} passed, first misses {:?}",
        total.passed,
        total.checked,
        &total.mismatches[..total.mismatches.len().min(5)]
    );
}

macro_rules! ops_suite {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                suite(stringify!($name), grad::$name, Tolerance::OPS);
            }
        )*
    };
}

ops_suite!(matmul, linear, elementwise, reductions, softmax, layer_norm, gelu, attention, rows, cross_entropy, mlp);

#[test]
fn vit_block() {
    suite("vit_block", grad::vit_block, Tolerance::PIPELINE);
}

#[test]
fn pipeline() {
    suite("pipeline", grad::pipeline, Tolerance::PIPELINE);
}

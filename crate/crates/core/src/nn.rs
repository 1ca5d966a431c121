//! Parameter containers and the small layers every model is built from.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::init::{self, WEIGHT_STD};
use crate::tensor::{ops, Tensor};

/// Named traversal over the tensors a module owns.
///
/// Names are dot-joined paths; traversal order is fixed, so optimizer state
/// and serialized files line up with it.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Turns every tensor into a learnable leaf.
    fn make_trainable(&mut self) {
        self.visit_mut("", &mut |_, t| *t = t.detach().into_parameter());
    }

    fn make_frozen(&mut self) {
        self.visit_mut("", &mut |_, t| *t = t.detach());
    }

    /// Replaces every tensor by the same-named entry of `entries`. Missing
    /// names and shape changes are errors; unused entries are returned.
    fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<Vec<(String, Tensor)>> {
        let mut pool: BTreeMap<String, Tensor> = entries.into_iter().collect();
        let mut failure = None;
        self.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match pool.remove(&name) {
                Some(src) if src.shape() == t.shape() => {
                    let learnable = t.is_leaf_parameter();
                    *t = if learnable { src.detach().into_parameter() } else { src.detach() };
                }
                Some(src) => {
                    failure = Some(Error::format(format!(
                        "{name}: stored shape {:?} differs from model shape {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => failure = Some(Error::format(format!("{name}: missing from weight file"))),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(pool.into_iter().collect()),
        }
    }
}

/// Draws every weight-like tensor (anything but biases, `beta` and `gamma`)
/// from a truncated normal, each from its own stream keyed by its full name.
pub fn randomize(module: &mut impl Params, seed: u64) {
    module.visit_mut("", &mut |name, t| {
        let last = name.rsplit('.').next().unwrap_or(&name);
        if matches!(last, "b" | "beta" | "gamma") {
            return;
        }
        let fresh = init::trunc_normal(t.shape(), WEIGHT_STD, &mut init::rng_for(seed, &name));
        *t = if t.is_leaf_parameter() { fresh.into_parameter() } else { fresh };
    });
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(prefix.to_string(), self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Params> Params for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(item) = self {
            item.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(item) = self {
            item.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Params`] for a struct by visiting the listed fields in order.
macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::tensor::Tensor)) {
                $( $crate::nn::Params::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor)) {
                $( $crate::nn::Params::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;

/// Affine map `x · w + b` with `w` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl_params!(Linear { w, b });

impl Linear {
    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[inputs, outputs]),
            b: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.w, &self.b)
    }
}

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl_params!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }
}

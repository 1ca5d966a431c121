//! Dense `f32` tensors with reverse-mode autodiff and allocation accounting.

pub mod graph;
pub mod init;
pub(crate) mod kernels;
pub mod ledger;
pub mod ops;
pub mod weights;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use graph::{GradLink, GradSlot, NodeId};
pub use ledger::Buffer;

/// Row-major tensor. Clones share the payload; gradients of parameters are
/// shared by all clones as well.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Buffer>,
    link: GradLink,
}

impl Tensor {
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::from_buffer(Buffer::from_vec(data), shape)
    }

    pub fn from_buffer(data: Buffer, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dims("tensor", shape, &[data.len()]));
        }
        Ok(Self::from_parts(data, shape.to_vec(), GradLink::None))
    }

    pub(crate) fn from_parts(data: Buffer, shape: Vec<usize>, link: GradLink) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            link,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(Buffer::zeros(n), shape.to_vec(), GradLink::None)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(Buffer::filled(n, value), shape.to_vec(), GradLink::None)
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(Buffer::filled(1, value), vec![1], GradLink::None)
    }

    /// Turns this tensor into a learnable leaf with its own gradient slot.
    pub fn into_parameter(self) -> Self {
        Tensor {
            link: GradLink::Leaf(Arc::new(GradSlot::default())),
            ..self
        }
    }

    /// Same payload, no gradient tracking.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            link: GradLink::None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        self.data.as_slice()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.link.requires_grad()
    }

    pub fn is_leaf_parameter(&self) -> bool {
        matches!(self.link, GradLink::Leaf(_))
    }

    pub fn node_id(&self) -> Option<NodeId> {
        match self.link {
            GradLink::Node(id) => Some(id),
            _ => None,
        }
    }

    pub(crate) fn link(&self) -> &GradLink {
        &self.link
    }

    /// Payload shared by `self` and `other`.
    pub fn shares_data(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// View with a different shape over the same payload; gradients flow
    /// through unchanged because layouts coincide.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::dims("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            link: self.link.clone(),
        })
    }

    /// Accumulated gradient of a parameter leaf, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        match &self.link {
            GradLink::Leaf(slot) => slot.with(|g| g.map(|b| b.to_vec())),
            _ => None,
        }
    }

    pub fn has_grad(&self) -> bool {
        match &self.link {
            GradLink::Leaf(slot) => slot.with(|g| g.is_some()),
            _ => false,
        }
    }

    pub fn take_grad(&self) -> Option<Buffer> {
        match &self.link {
            GradLink::Leaf(slot) => slot.take(),
            _ => None,
        }
    }

    pub fn zero_grad(&self) {
        drop(self.take_grad());
    }

    /// Mutates the payload in place, copying first if other tensors share it.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [f32])) {
        let buf = Arc::make_mut(&mut self.data);
        f(buf.as_mut_slice());
    }

    /// Size of the payload in bytes.
    pub fn byte_len(&self) -> u64 {
        self.data.byte_len()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data()[i * cols..(i + 1) * cols]
    }

    /// Bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.numel() <= 16 {
            s.field("data", &self.data());
        }
        s.field("requires_grad", &self.requires_grad()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_payload() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.row(1), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn inference_tensors_have_no_node() {
        let t = graph::no_grad(|| {
            let w = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap().into_parameter();
            ops::scale(&w, 2.0)
        });
        assert!(t.node_id().is_none());
        assert!(!t.requires_grad());
    }

    #[test]
    fn update_copies_shared_payload() {
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let mut b = a.clone();
        b.update_data(|d| d[0] = 5.0);
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[5.0, 2.0]);
    }
}

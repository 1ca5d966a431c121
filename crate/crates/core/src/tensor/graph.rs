//! Thread-local reverse-mode tape.
//!
//! Operations append a node whenever recording is on and at least one input
//! requires a gradient. Nodes hold whatever activations their backward rule
//! needs; nothing is recomputed. [`backward`] consumes the whole tape, walking
//! it once in reverse creation order, which is a reverse topological order
//! because every node is appended after its inputs.

use std::cell::RefCell;
use std::sync::{Arc, Mutex};

use super::ledger::Buffer;
use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Backward rule: receives the output gradient and a mask of which inputs
/// need a gradient, returns one entry per input.
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f32], &[bool]) -> Vec<Option<Buffer>>>;

/// Accumulator for the gradient of a leaf parameter, shared by all clones of
/// that parameter tensor.
#[derive(Debug, Default)]
pub(crate) struct GradSlot(Mutex<Option<Buffer>>);

impl GradSlot {
    pub(crate) fn accumulate(&self, grad: Buffer) {
        let mut slot = self.0.lock().unwrap_or_else(|e| e.into_inner());
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(grad.iter()).for_each(|(a, g)| *a += g),
            None => *slot = Some(grad),
        }
    }

    pub(crate) fn take(&self) -> Option<Buffer> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).take()
    }

    pub(crate) fn with<T>(&self, f: impl FnOnce(Option<&Buffer>) -> T) -> T {
        f(self.0.lock().unwrap_or_else(|e| e.into_inner()).as_ref())
    }
}

#[derive(Clone, Debug, Default)]
pub(crate) enum GradLink {
    #[default]
    None,
    Node(NodeId),
    Leaf(Arc<GradSlot>),
}

impl GradLink {
    pub(crate) fn requires_grad(&self) -> bool {
        !matches!(self, GradLink::None)
    }
}

struct Node {
    inputs: Vec<GradLink>,
    backward: BackwardFn,
}

struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

thread_local! {
    static TAPE: RefCell<Tape> = const { RefCell::new(Tape { nodes: Vec::new(), recording: true }) };
}

/// Number of nodes currently on this thread's tape.
pub fn node_count() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}

pub fn is_recording() -> bool {
    TAPE.with(|t| t.borrow().recording)
}

/// Drops every recorded node without computing gradients.
pub fn clear() {
    let nodes = TAPE.with(|t| std::mem::take(&mut t.borrow_mut().nodes));
    drop(nodes);
}

/// Restores the previous recording state when dropped.
pub struct RecordingGuard {
    previous: bool,
}

impl RecordingGuard {
    pub fn set(recording: bool) -> Self {
        let previous = TAPE.with(|t| std::mem::replace(&mut t.borrow_mut().recording, recording));
        RecordingGuard { previous }
    }
}

impl Drop for RecordingGuard {
    fn drop(&mut self) {
        let previous = self.previous;
        TAPE.with(|t| t.borrow_mut().recording = previous);
    }
}

/// Runs `f` in inference mode: no nodes are appended and every produced
/// tensor is detached.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = RecordingGuard::set(false);
    f()
}

/// Builds the output tensor of an operation, appending a node when needed.
pub(crate) fn record(
    data: Buffer,
    shape: Vec<usize>,
    inputs: &[&Tensor],
    backward: impl FnOnce(&[f32], &[bool]) -> Vec<Option<Buffer>> + 'static,
) -> Tensor {
    record_tensor(Tensor::from_parts(data, shape, GradLink::None), inputs, backward)
}

/// Like [`record`] for an output tensor that already exists, so the backward
/// rule can share its payload instead of keeping a copy.
pub(crate) fn record_tensor(
    mut out: Tensor,
    inputs: &[&Tensor],
    backward: impl FnOnce(&[f32], &[bool]) -> Vec<Option<Buffer>> + 'static,
) -> Tensor {
    let track = is_recording() && inputs.iter().any(|t| t.requires_grad());
    if !track {
        out.link = GradLink::None;
        return out;
    }
    let links = inputs.iter().map(|t| t.link().clone()).collect();
    let id = TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        tape.nodes.push(Node {
            inputs: links,
            backward: Box::new(backward),
        });
        tape.nodes.len() - 1
    });
    out.link = GradLink::Node(id);
    out
}

/// Populates gradients of every leaf reachable from `loss` and consumes the
/// tape.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let root = match loss.link() {
        GradLink::Node(id) => *id,
        GradLink::Leaf(slot) => {
            slot.accumulate(Buffer::filled(1, 1.0));
            clear();
            return Ok(());
        }
        GradLink::None => {
            return Err(Error::contract("backward called on a loss detached from any graph"))
        }
    };
    let mut nodes = TAPE.with(|t| std::mem::take(&mut t.borrow_mut().nodes));
    if root >= nodes.len() {
        return Err(Error::contract("loss belongs to a graph that was already consumed"));
    }
    nodes.truncate(root + 1);
    let mut grads: Vec<Option<Buffer>> = Vec::with_capacity(nodes.len());
    grads.resize_with(nodes.len(), || None);
    grads[root] = Some(Buffer::filled(1, 1.0));

    while let Some(node) = nodes.pop() {
        let id = nodes.len();
        let Some(grad) = grads[id].take() else {
            continue;
        };
        let needs: Vec<bool> = node.inputs.iter().map(GradLink::requires_grad).collect();
        let input_grads = (node.backward)(&grad, &needs);
        drop(grad);
        debug_assert_eq!(input_grads.len(), node.inputs.len());
        for (link, g) in node.inputs.iter().zip(input_grads) {
            let Some(g) = g else { continue };
            match link {
                GradLink::None => {}
                GradLink::Leaf(slot) => slot.accumulate(g),
                GradLink::Node(j) => match grads[*j].as_mut() {
                    Some(acc) => acc.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b),
                    None => grads[*j] = Some(g),
                },
            }
        }
    }
    Ok(())
}

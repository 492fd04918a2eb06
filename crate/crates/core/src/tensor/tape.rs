use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

pub(crate) type BackwardFn<S> = Box<dyn FnOnce(&[S], &mut GradSink<S>)>;

struct NodeRecord<S: Scalar> {
    len: usize,
    backward: Option<BackwardFn<S>>,
}

/// A value flowing through the tape. Cheap to clone.
///
/// `node` is `None` for constants and for anything computed while the
/// tape was not recording; such values never receive gradients.
#[derive(Clone, Debug)]
pub struct Var<S: Scalar> {
    value: Rc<Tensor<S>>,
    node: Option<NodeId>,
}

impl<S: Scalar> Var<S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn rc(&self) -> Rc<Tensor<S>> {
        Rc::clone(&self.value)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[S] {
        self.value.data()
    }

    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }
}

/// Ordered record of executed primitives.
///
/// Each op appends one node holding a backward closure; [`Tape::backward`]
/// replays the closures in exact reverse order and returns the
/// accumulated gradients of every tracked node.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<NodeRecord<S>>>,
    recording: Cell<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A tape that never records; ops evaluate forward only.
    pub fn inference() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor. It is tracked iff its `requires_grad` flag is
    /// set and the tape is recording.
    pub fn leaf(&self, t: &Tensor<S>) -> Var<S> {
        self.leaf_rc(Rc::new(strip_grad(t)), t.requires_grad())
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<S>>, track: bool) -> Var<S> {
        let node = (track && self.is_recording()).then(|| self.push(value.len(), None));
        Var { value, node }
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&self, t: Tensor<S>) -> Var<S> {
        Var {
            value: Rc::new(t),
            node: None,
        }
    }

    fn push(&self, len: usize, backward: Option<BackwardFn<S>>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(NodeRecord { len, backward });
        nodes.len() - 1
    }

    /// Appends an op output. The closure is kept only when some input is
    /// tracked and the tape is recording.
    pub(crate) fn record(
        &self,
        value: Tensor<S>,
        inputs: &[&Var<S>],
        backward: impl FnOnce(&[S], &mut GradSink<S>) + 'static,
    ) -> Var<S> {
        let tracked = self.is_recording() && inputs.iter().any(|v| v.node.is_some());
        let node = tracked.then(|| self.push(value.len(), Some(Box::new(backward))));
        Var {
            value: Rc::new(value),
            node,
        }
    }

    /// Whether an op over these inputs will be recorded. Ops use this to
    /// skip saving state needed only by backward.
    pub(crate) fn will_record(&self, inputs: &[&Var<S>]) -> bool {
        self.is_recording() && inputs.iter().any(|v| v.node.is_some())
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: &Var<S>) -> Result<Gradients<S>> {
        if loss.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let nodes = self.nodes.into_inner();
        let mut sink = GradSink {
            lens: nodes.iter().map(|n| n.len).collect(),
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        let Some(root) = loss.node else {
            return Ok(Gradients { grads: sink.grads });
        };
        sink.grads[root] = Some(vec![S::one()]);
        let mut backwards: Vec<Option<BackwardFn<S>>> =
            nodes.into_iter().map(|n| n.backward).collect();
        for id in (0..=root).rev() {
            let Some(f) = backwards[id].take() else {
                continue;
            };
            let Some(g) = sink.grads[id].take() else {
                continue;
            };
            f(&g, &mut sink);
        }
        Ok(Gradients { grads: sink.grads })
    }
}

fn strip_grad<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())
}

/// Gradient accumulators indexed by node during a backward sweep.
pub struct GradSink<S: Scalar> {
    lens: Vec<usize>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> GradSink<S> {
    /// Runs `f` on the (zero-initialised on first use) gradient buffer of
    /// `var`. Untracked vars are skipped.
    #[inline]
    pub(crate) fn with(&mut self, var: Option<NodeId>, f: impl FnOnce(&mut [S])) {
        if let Some(id) = var {
            let len = self.lens[id];
            let buf = self.grads[id].get_or_insert_with(|| vec![S::zero(); len]);
            f(buf);
        }
    }

    pub(crate) fn add(&mut self, var: Option<NodeId>, g: &[S]) {
        self.with(var, |buf| {
            for (b, v) in buf.iter_mut().zip(g) {
                *b += *v;
            }
        });
    }

    pub(crate) fn wants(&self, var: Option<NodeId>) -> bool {
        var.is_some()
    }
}

/// Result of a backward sweep.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a tracked var; `None` if untracked or unreachable.
    pub fn get(&self, v: &Var<S>) -> Option<&[S]> {
        v.node.and_then(|id| self.grads.get(id)?.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when unreachable.
    pub fn wrt(&self, v: &Var<S>) -> Tensor<S> {
        let data = self
            .get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![S::zero(); v.value.len()]);
        Tensor::from_parts(v.shape().to_vec(), data)
    }

    /// Adds the gradient of `v` into the accumulator of `param`.
    pub fn accumulate_into(&self, v: &Var<S>, param: &mut Tensor<S>) {
        if let Some(g) = self.get(v) {
            param.accumulate_grad(g);
        }
    }
}

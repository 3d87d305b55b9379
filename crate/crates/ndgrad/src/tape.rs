use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::ops::Op;
use crate::tensor::{numel, NodeRef, Tensor};

pub(crate) struct Node {
    pub op: Op,
    /// One slot per operand; `None` for operands that are constants.
    pub parents: Vec<Option<usize>>,
    pub shape: Vec<usize>,
}

struct Active {
    id: u64,
    nodes: Vec<Node>,
}

thread_local! {
    static ACTIVE: RefCell<Option<Active>> = const { RefCell::new(None) };
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

/// Recorded computation. Parents always precede children, so a reverse
/// sweep over `nodes` is a valid reverse topological order.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

// Restores the thread-local slot even if the recorded closure panics.
struct ScopeGuard {
    restore: Option<Active>,
    take_on_drop: bool,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        let restore = self.restore.take();
        let take = self.take_on_drop;
        ACTIVE.with(|a| {
            let mut slot = a.borrow_mut();
            if take {
                slot.take();
            }
            if restore.is_some() {
                *slot = restore;
            }
        });
    }
}

/// Runs `f` with a fresh tape active on this thread and returns the tape.
///
/// Tapes do not nest; calling `record` inside another recording scope is an
/// error. Use [`paused`] to run untracked code in the middle of a recording.
pub fn record<R>(f: impl FnOnce() -> R) -> Result<(R, Tape)> {
    let id = NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    });
    ACTIVE.with(|a| {
        let mut slot = a.borrow_mut();
        if slot.is_some() {
            return Err(Error::AlreadyRecording);
        }
        *slot = Some(Active {
            id,
            nodes: Vec::new(),
        });
        Ok(())
    })?;
    let mut guard = ScopeGuard {
        restore: None,
        take_on_drop: true,
    };
    let out = f();
    guard.take_on_drop = false;
    let active = ACTIVE
        .with(|a| a.borrow_mut().take())
        .expect("recording scope lost its tape");
    Ok((
        out,
        Tape {
            id: active.id,
            nodes: active.nodes,
        },
    ))
}

/// Runs `f` with recording suspended. Results are untracked constants.
pub fn paused<R>(f: impl FnOnce() -> R) -> R {
    let saved = ACTIVE.with(|a| a.borrow_mut().take());
    let _guard = ScopeGuard {
        restore: saved,
        take_on_drop: false,
    };
    f()
}

pub fn is_recording() -> bool {
    ACTIVE.with(|a| a.borrow().is_some())
}

pub(crate) fn push_leaf(shape: &[usize]) -> Option<NodeRef> {
    ACTIVE.with(|a| {
        let mut slot = a.borrow_mut();
        let active = slot.as_mut()?;
        let idx = active.nodes.len();
        active.nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            shape: shape.to_vec(),
        });
        Some(NodeRef { tape: active.id, idx })
    })
}

/// Appends a node when recording and at least one input is tracked.
pub(crate) fn push(op: impl FnOnce() -> Op, inputs: &[&Tensor], shape: &[usize]) -> Result<Option<NodeRef>> {
    if inputs.iter().all(|t| t.node.is_none()) {
        return Ok(None);
    }
    ACTIVE.with(|a| {
        let mut slot = a.borrow_mut();
        let Some(active) = slot.as_mut() else {
            // Tracked inputs outside a scope are treated as constants.
            return Ok(None);
        };
        let mut parents = Vec::with_capacity(inputs.len());
        for t in inputs {
            match t.node {
                Some(n) if n.tape != active.id => return Err(Error::ForeignTensor),
                Some(n) => parents.push(Some(n.idx)),
                None => parents.push(None),
            }
        }
        let idx = active.nodes.len();
        active.nodes.push(Node {
            op: op(),
            parents,
            shape: shape.to_vec(),
        });
        Ok(Some(NodeRef { tape: active.id, idx }))
    })
}

impl Tape {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of a scalar `root` with respect to every recorded node.
    ///
    /// The tape is left intact, so calling this twice gives identical results.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let Some(node) = root.node else {
            return Ok(Gradients { tape: self.id, grads });
        };
        if node.tape != self.id {
            return Err(Error::ForeignTensor);
        }
        grads[node.idx] = Some(vec![1.0]);
        for idx in (0..=node.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let n = &self.nodes[idx];
            debug_assert_eq!(g.len(), numel(&n.shape));
            if n.parents.iter().any(Option::is_some) {
                let contributions = n.op.vjp(&g, &n.shape, &n.parents);
                for (parent, contribution) in n.parents.iter().zip(contributions) {
                    let (Some(p), Some(c)) = (parent, contribution) else { continue };
                    match &mut grads[*p] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

/// Result of [`Tape::backward`], keyed by recorded tensor.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `t`, or `None` if the root does not depend on it.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        let g = self.grads.get(node.idx)?.as_ref()?;
        Some(Tensor::from_op(g.clone(), t.shape().to_vec(), None))
    }

    pub fn wrt_or_zeros(&self, t: &Tensor) -> Tensor {
        self.wrt(t).unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("id", &self.id).field("nodes", &self.nodes.len()).finish()
    }
}

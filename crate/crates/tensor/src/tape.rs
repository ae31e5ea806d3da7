//! Define-by-run gradient tape.
//!
//! Every primitive applied to a tracked tensor appends one node holding the
//! ids of its inputs and a closure that maps the output gradient to input
//! gradients. Ids are handed out in creation order, so inputs always precede
//! outputs and a reverse sweep over ids is a valid topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{Tensor, Var};

/// Maps the output gradient to one optional gradient per input. The flag
/// slice says which inputs are tracked; untracked inputs may be skipped.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    numel: usize,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Handle to a gradient tape. Cloning shares the same tape.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Opaque position of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `t`'s value as a gradient-receiving input.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Node {
            inputs: Vec::new(),
            backward: None,
            numel: t.numel(),
        });
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            var: Some(Var {
                tape: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Runs the reverse sweep from a single-element `loss`.
    ///
    /// Gradients fanning into the same node are summed in the fixed order
    /// of the sweep (descending node id, then input position), so repeated
    /// runs are bit-identical.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape.clone()));
        }
        let var = loss.var.as_ref().ok_or(TensorError::Detached)?;
        if !var.tape.same(self) {
            return Err(TensorError::MixedTapes("backward"));
        }
        let inner = self.inner.borrow();
        let root = var.id;
        let mut pending: Vec<Option<Vec<f64>>> = Vec::with_capacity(root + 1);
        pending.resize_with(root + 1, || None);
        pending[root] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for id in (0..=root).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            debug_assert_eq!(grad.len(), node.numel);
            let Some(backward) = &node.backward else {
                leaves.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&grad, &needs);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(g)) = (input, g) else {
                    continue;
                };
                match &mut pending[*input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            tape: self.clone(),
            grads: leaves,
        })
    }
}

/// Gradients of one backward sweep, keyed by leaf node.
pub struct Gradients {
    tape: Tape,
    grads: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::leaf`]. Leaves the loss does
    /// not depend on receive zeros.
    pub fn get(&self, t: &Tensor) -> Result<Tensor> {
        let var = t.var.as_ref().ok_or(TensorError::AbsentGradient)?;
        if !var.tape.same(&self.tape) {
            return Err(TensorError::AbsentGradient);
        }
        let is_leaf = self.tape.inner.borrow().nodes[var.id].backward.is_none();
        if !is_leaf {
            return Err(TensorError::AbsentGradient);
        }
        let data = self
            .grads
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        Tensor::new(t.shape.clone(), data)
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        t.var
            .as_ref()
            .is_some_and(|v| v.tape.same(&self.tape) && self.grads.contains_key(&v.id))
    }
}

/// Builds the output tensor of a primitive and, if any input is tracked,
/// records the node on the inputs' tape.
pub(crate) fn record(
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    inputs: &[&Tensor],
    backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
) -> Result<Tensor> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(v) = &t.var {
            match tape {
                Some(existing) if !existing.same(&v.tape) => {
                    return Err(TensorError::MixedTapes(op));
                }
                _ => tape = Some(&v.tape),
            }
        }
    }
    let var = match tape {
        None => None,
        Some(tape) => {
            let id = tape.push(Node {
                inputs: inputs.iter().map(|t| t.var.as_ref().map(|v| v.id)).collect(),
                backward: Some(Box::new(backward)),
                numel: data.len(),
            });
            Some(Var {
                tape: tape.clone(),
                id,
            })
        }
    };
    Ok(Tensor {
        shape,
        data: Arc::new(data),
        var,
    })
}

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::ops::Op;
use crate::tensor::Tensor;

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) parents: Vec<usize>,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Ordered record of every operation applied to [`Var`]s created from it.
///
/// Node ids increase in creation order, so the node list is a topological
/// order of the computation graph. Cloning a `Tape` clones the handle, not
/// the record.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node of a [`Tape`].
#[derive(Clone)]
pub struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to `var`; zero when `var` does not reach the root.
    pub fn wrt(&self, var: &Var) -> Tensor {
        match self.grads.get(&var.id) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(var.shape(), vec![0.0; var.value().numel()]),
        }
    }

    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(&var.id)
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

    pub(crate) fn push(&self, value: Tensor, op: Op, parents: Vec<usize>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|&p| inner.nodes[p].requires_grad),
        };
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            parents,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// A differentiable input (parameter).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new())
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, Vec::new())
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn var(&self, id: usize) -> Var {
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn truncate(&self, len: usize) {
        self.inner.borrow_mut().nodes.truncate(len);
    }

    /// Reverse accumulation from `root` restricted to nodes for which
    /// `relevant` holds. Returns the adjoint of every visited node.
    fn accumulate(
        &self,
        root: &Var,
        lowest: usize,
        relevant: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let root_value = root.value();
        if root_value.numel() != 1 {
            return Err(AdError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let span = root.id + 1 - lowest;
        let mut adjoints: Vec<Option<Var>> = vec![None; span];
        if !relevant[root.id - lowest] {
            return Ok(adjoints);
        }
        adjoints[span - 1] = Some(self.constant(Tensor::from_parts(
            root_value.shape().to_vec(),
            vec![1.0],
        )));
        for id in (lowest..=root.id).rev() {
            let Some(adj) = adjoints[id - lowest].take() else {
                continue;
            };
            let (op, parents) = {
                let inner = self.inner.borrow();
                let node = &inner.nodes[id];
                (node.op.clone(), node.parents.clone())
            };
            if parents.is_empty() {
                adjoints[id - lowest] = Some(adj);
                continue;
            }
            let needs: Vec<bool> = parents
                .iter()
                .map(|&p| p >= lowest && relevant[p - lowest])
                .collect();
            if needs.iter().any(|&n| n) {
                let contributions = op.vjp(self, id, &parents, &adj, &needs)?;
                for ((&p, contrib), need) in parents.iter().zip(contributions).zip(&needs) {
                    let (Some(c), true) = (contrib, *need) else {
                        continue;
                    };
                    let slot = &mut adjoints[p - lowest];
                    *slot = Some(match slot.take() {
                        Some(prev) => prev.add(&c)?,
                        None => c,
                    });
                }
            }
            adjoints[id - lowest] = Some(adj);
        }
        Ok(adjoints)
    }

    fn relevance_from(&self, wrt: &[&Var], root: usize) -> (usize, Vec<bool>) {
        let lowest = wrt.iter().map(|v| v.id).min().unwrap_or(root).min(root);
        let inner = self.inner.borrow();
        let mut relevant = vec![false; root + 1 - lowest];
        for v in wrt {
            if v.id <= root {
                relevant[v.id - lowest] = true;
            }
        }
        for id in lowest..=root {
            if relevant[id - lowest] {
                continue;
            }
            relevant[id - lowest] = inner.nodes[id]
                .parents
                .iter()
                .any(|&p| p >= lowest && relevant[p - lowest]);
        }
        (lowest, relevant)
    }

    fn check_owned(&self, vars: &[&Var]) -> Result<()> {
        if vars.iter().all(|v| self.same(&v.tape)) {
            Ok(())
        } else {
            Err(AdError::TapeMismatch)
        }
    }

    /// Gradients of scalar `root` with respect to `wrt`, recorded on the tape
    /// so they can be differentiated again.
    ///
    /// Only paths leaving the `wrt` nodes are followed: the result is the
    /// partial derivative holding every other input fixed.
    pub fn grad_graph(&self, root: &Var, wrt: &[&Var]) -> Result<Vec<Var>> {
        self.check_owned(&[root])?;
        self.check_owned(wrt)?;
        let (lowest, relevant) = self.relevance_from(wrt, root.id);
        let adjoints = self.accumulate(root, lowest, &relevant)?;
        wrt.iter()
            .map(|v| {
                let found = if v.id <= root.id {
                    adjoints[v.id - lowest].clone()
                } else {
                    None
                };
                Ok(match found {
                    Some(g) => g,
                    None => self.constant(Tensor::from_parts(
                        v.shape(),
                        vec![0.0; v.value().numel()],
                    )),
                })
            })
            .collect()
    }

    /// Gradient values of `root` with respect to `wrt`. Nothing is left on
    /// the tape.
    pub fn grad_values(&self, root: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let grads = self.grad_graph(root, wrt);
        let values = grads.map(|gs| gs.iter().map(|g| (*g.value()).clone()).collect());
        self.truncate(mark);
        values
    }

    /// Gradients of scalar `root` with respect to every leaf of the tape.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        self.check_owned(&[root])?;
        let mark = self.len();
        let (relevant, leaves): (Vec<bool>, Vec<usize>) = {
            let inner = self.inner.borrow();
            let relevant = inner.nodes[..=root.id]
                .iter()
                .map(|n| n.requires_grad)
                .collect();
            let leaves = inner.nodes[..=root.id]
                .iter()
                .enumerate()
                .filter(|(_, n)| matches!(n.op, Op::Leaf))
                .map(|(i, _)| i)
                .collect();
            (relevant, leaves)
        };
        let result = self.accumulate(root, 0, &relevant).map(|adjoints| {
            let grads = leaves
                .into_iter()
                .filter_map(|id| adjoints[id].as_ref().map(|g| (id, (*g.value()).clone())))
                .collect();
            Gradients { grads }
        });
        self.truncate(mark);
        result
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var {
        self.tape.constant((*self.value()).clone())
    }
}

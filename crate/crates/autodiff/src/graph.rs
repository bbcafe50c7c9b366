//! Reverse-mode tape.
//!
//! A [`Graph`] records every op applied during a forward pass together with a
//! vector-Jacobian closure. `backward` walks the tape from the end, popping
//! nodes as it goes, so each intermediate is freed once its gradient has been
//! pushed to its parents.
//!
//! Ops whose forward pass takes a discrete decision (threshold masks, the
//! interpolation cell of a sample point, saturation clamps) route that
//! decision through [`Graph::branch`]. A recording graph logs the decisions; a
//! replaying graph reuses them. The finite-difference checker records at the
//! base point and replays for every perturbed evaluation, so it measures the
//! derivative of the same smooth piece the analytic gradient differentiates.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamGrads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Inputs available to a vector-Jacobian closure.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Whether each input needs a gradient; closures may return `None` otherwise.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// Sequence of discrete decisions taken during one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchLog {
    pub decisions: Vec<Vec<i32>>,
}

#[derive(Clone, Debug)]
enum BranchMode {
    Free,
    Record(Vec<Vec<i32>>),
    Replay { log: Vec<Vec<i32>>, cursor: usize },
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    branches: BranchMode,
    grad_enabled: bool,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    params: ParamGrads<T>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }

    /// Gradient with respect to a [`Graph::leaf`] input.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new(), branches: BranchMode::Free, grad_enabled: true }
    }

    /// Forward-only graph: parameters enter as constants and no closures are kept.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn recording() -> Self {
        Self { branches: BranchMode::Record(Vec::new()), ..Self::new() }
    }

    pub fn replaying(log: BranchLog) -> Self {
        Self { branches: BranchMode::Replay { log: log.decisions, cursor: 0 }, ..Self::new() }
    }

    /// Turns gradient recording on or off for nodes created afterwards.
    pub fn with_grad(mut self, enabled: bool) -> Self {
        self.grad_enabled = enabled;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Decisions recorded so far (empty unless the graph is recording).
    pub fn branch_log(&self) -> BranchLog {
        match &self.branches {
            BranchMode::Record(log) => BranchLog { decisions: log.clone() },
            BranchMode::Replay { log, .. } => BranchLog { decisions: log.clone() },
            BranchMode::Free => BranchLog::default(),
        }
    }

    /// Takes a discrete decision, recording or replaying it as configured.
    pub fn branch(&mut self, decide: impl FnOnce() -> Vec<i32>) -> Result<Vec<i32>> {
        match &mut self.branches {
            BranchMode::Free => Ok(decide()),
            BranchMode::Record(log) => {
                let d = decide();
                log.push(d.clone());
                Ok(d)
            }
            BranchMode::Replay { log, cursor } => {
                let d = log.get(*cursor).cloned().ok_or(Error::Replay(*cursor))?;
                *cursor += 1;
                Ok(d)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.raw_push(value, false, Vec::new(), None, None)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.raw_push(value, rg, Vec::new(), None, None)
    }

    /// Places a parameter on the tape once; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = self.grad_enabled && !p.frozen;
        let v = self.raw_push(p.value.clone(), rg, Vec::new(), None, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    fn raw_push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var>,
        backward: Option<BackwardFn<T>>,
        param: Option<ParamId>,
    ) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node { value, requires_grad, parents, backward, param });
        v
    }

    /// Records an op output. The closure is dropped when no parent needs grad.
    pub(crate) fn push<F>(&mut self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        let rg = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let bw: Option<BackwardFn<T>> = if rg { Some(Box::new(backward)) } else { None };
        self.raw_push(value, rg, parents.to_vec(), bw, None)
    }

    /// Backpropagates from a scalar, consuming the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract { op: "backward", msg: format!("loss must be scalar, got shape {:?}", lv.shape()) });
        }
        let n_params = self.param_vars.keys().map(|id| id.0 + 1).max().unwrap_or(0);
        let mut params = ParamGrads::empty(n_params);
        let mut leaves = HashMap::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { params, leaves });
        }
        self.nodes.truncate(loss.0 + 1);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        while let Some(node) = self.nodes.pop() {
            let idx = self.nodes.len();
            let Some(g) = grads[idx].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Some(id) = node.param {
                params.set(id, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let Some(bw) = &node.backward else {
                leaves.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let ctx = BackwardCtx { grad: &g, inputs, output: &node.value, needs };
            let parent_grads = bw(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[p.0].value.numel());
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { params, leaves })
    }
}

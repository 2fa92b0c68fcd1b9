use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{CarlError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Variance {
        x: Var,
        axis: usize,
        correction: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
    pub param: Option<(u64, ParamId)>,
}

/// Records operations in execution order; `backward` replays them in reverse.
///
/// Each recorded entry only references earlier entries, so the record is
/// topologically sorted by construction. A tape with gradients disabled still
/// computes values but marks nothing as requiring a gradient; it is what the
/// EMA teacher runs on.
#[derive(Debug)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
    param_cache: HashMap<(u64, ParamId), Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            param_cache: HashMap::new(),
        }
    }

    /// A tape on which nothing requires a gradient.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A free leaf whose gradient can be read back from [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg, None)
    }

    /// Brings a parameter onto the tape. Repeated requests for the same
    /// parameter return the same handle, so its gradient contributions sum.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.key(), id);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let rg = self.grad_enabled;
        let v = self.push_leaf(store.value(id).clone(), rg, Some(key));
        self.param_cache.insert(key, v);
        v
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<(u64, ParamId)>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Returns the gradients of every leaf that requires one. Nothing is
    /// written to parameter stores until [`Gradients::accumulate_into`] is
    /// called; calling that twice doubles the stored gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(CarlError::Shape {
                op: "backward (loss must be scalar)",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads,
                params: Vec::new(),
            });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some((key, id)) = node.param {
                    if grads[i].is_some() {
                        params.push((key, id, i));
                    }
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(u64, ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a leaf, if it received one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradients of leaves that came from `store` into its slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(key, id, node) in &self.params {
            if key != store.key() {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                for (slot, x) in store.grad_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *slot += x;
                }
            }
        }
    }
}

use crate::ops::{conv, elementwise, linalg, loss, norm, shape};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    Silu(Var),
    Gelu(Var),
    SumAll(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: conv::Conv2dGeom,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        geom: conv::Conv2dGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        pad: usize,
    },
    RowLoss {
        x: Var,
        grad: Tensor,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Every op evaluates eagerly and records enough state to run the
/// reverse sweep in [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are only accumulated for leaves created
    /// with `requires_grad` and for everything downstream of them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub(crate) fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // Ops downstream of constants only need their value.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must hold a single element"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let mut acc = Accumulator {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            self.backward_node(&node.op, &node.value, &gy, &mut acc);
        }
        Gradients { grads }
    }

    fn backward_node(&self, op: &Op, y: &Tensor, gy: &Tensor, acc: &mut Accumulator<'_>) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc.add(*a, gy);
                acc.add(*b, gy);
            }
            Op::Sub(a, b) => {
                acc.add(*a, gy);
                acc.add_scaled(*b, gy, -1.0);
            }
            Op::Mul(a, b) => elementwise::backward_mul(self, *a, *b, gy, acc),
            Op::AddSuffix(x, b) => elementwise::backward_add_suffix(*x, *b, gy, acc),
            Op::MulSuffix(x, s) => elementwise::backward_mul_suffix(self, *x, *s, gy, acc),
            Op::AddChannel(x, b) => elementwise::backward_add_channel(*x, *b, gy, acc),
            Op::Scale(x, c) => acc.add_scaled(*x, gy, *c),
            Op::ScaleRows(x, f) => elementwise::backward_scale_rows(*x, f, gy, acc),
            Op::Relu(x) => elementwise::backward_relu(*x, y, gy, acc),
            Op::Silu(x) => elementwise::backward_silu(self, *x, gy, acc),
            Op::Gelu(x) => elementwise::backward_gelu(self, *x, gy, acc),
            Op::SumAll(x) => {
                let g = gy.item();
                if let Some(slot) = acc.slot(*x) {
                    for v in slot.data_mut() {
                        *v += g;
                    }
                }
            }
            Op::Linear { x, w, b } => linalg::backward_linear(self, *x, *w, *b, gy, acc),
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            } => linalg::backward_bmm(self, *a, *b, *trans_a, *trans_b, gy, acc),
            Op::Softmax(x) => linalg::backward_softmax(*x, y, gy, acc),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => norm::backward_layer_norm(self, *x, *gamma, *beta, xhat, rstd, gy, acc),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => norm::backward_batch_norm(self, *x, *gamma, *beta, xhat, rstd, gy, acc),
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => norm::backward_channel_affine(self, *x, *gamma, *beta, mean, rstd, gy, acc),
            Op::Reshape(x) => acc.add(*x, gy),
            Op::Permute { x, perm } => shape::backward_permute(self, *x, perm, gy, acc),
            Op::Gather { x, idx } => shape::backward_gather(*x, idx, gy, acc),
            Op::Concat { parts, axis } => shape::backward_concat(self, parts, *axis, gy, acc),
            Op::Conv2d { x, w, geom } => conv::backward_conv2d(self, *x, *w, geom, gy, acc),
            Op::DepthwiseConv2d { x, w, geom } => {
                conv::backward_depthwise_conv2d(self, *x, *w, geom, gy, acc)
            }
            Op::MaxPool2d { x, argmax } => conv::backward_max_pool2d(*x, argmax, gy, acc),
            Op::DepthwiseConv1d { x, w, pad } => {
                conv::backward_depthwise_conv1d(self, *x, *w, *pad, gy, acc)
            }
            Op::RowLoss { x, grad } => loss::backward_row_loss(*x, grad, gy, acc),
        }
    }
}

/// Gradient buffers indexed by node, lazily zero-initialized.
pub(crate) struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
}

impl Accumulator<'_> {
    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            self.grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())),
        )
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }


    pub fn add_scaled(&mut self, v: Var, g: &Tensor, c: f64) {
        if let Some(slot) = self.slot(v) {
            for (s, gv) in slot.data_mut().iter_mut().zip(g.data()) {
                *s += c * gv;
            }
        }
    }

    /// Adds `g`, read in `v`'s shape; the first contribution is copied in.
    pub fn add(&mut self, v: Var, g: &Tensor) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(slot) => {
                for (s, gv) in slot.data_mut().iter_mut().zip(g.data()) {
                    *s += gv;
                }
            }
            empty => *empty = Some(g.clone().reshaped(node.value.shape())),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` took part in it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

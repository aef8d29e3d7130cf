//! Reverse-mode differentiation.
//!
//! A [`Tape`] records every op evaluated through it, in evaluation order, so
//! node indices are already a topological order. [`Tape::backward`] walks the
//! nodes once in reverse and accumulates gradients additively for values that
//! fan out to several consumers.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::conv::{
    conv2d_backward, conv2d_with, depthwise_planes, depthwise_planes_backward, ConvGeometry, ConvOptions,
};
use crate::ops::elementwise::{binary, binary_backward, unary, unary_backward, Binary, Unary};
use crate::ops::norm::{group_norm_backward, group_norm_with_stats, GroupStats};
use crate::ops::pool::{avg_pool2x, avg_pool2x_backward, pool_backward, pool_with_argmax};
use crate::ops::resize::{upsample_bilinear2x, upsample_bilinear2x_backward};
use crate::ops::{channel_concat, ElementwiseKind, PoolAxis, PoolMode};
use crate::tensor::{Element, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Backward rule for an op defined outside this module.
pub trait GradRule<T: Element>: Send + Sync {
    /// Gradient for each input, in the order the inputs were given.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>>;
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    /// Channel-by-channel convolution with a constant kernel.
    Depthwise {
        x: usize,
        kernel: Tensor<T>,
        geom: ConvGeometry,
    },
    Unary {
        x: usize,
        kind: Unary,
    },
    Binary {
        x: usize,
        y: usize,
        kind: Binary,
    },
    Pool {
        x: usize,
        axis: PoolAxis,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    AvgPool2x {
        x: usize,
    },
    Upsample {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    SliceChannels {
        x: usize,
        start: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        stats: GroupStats<T>,
    },
    Sum {
        x: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Custom {
        name: &'static str,
        inputs: Vec<usize>,
        rule: Box<dyn GradRule<T>>,
    },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise",
            Op::Unary { kind: Unary::Sigmoid, .. } => "sigmoid",
            Op::Unary { kind: Unary::Relu, .. } => "relu",
            Op::Binary { kind: Binary::Add, .. } => "add",
            Op::Binary { kind: Binary::Mul, .. } => "mul",
            Op::Pool { .. } => "pool",
            Op::AvgPool2x { .. } => "avg_pool2x",
            Op::Upsample { .. } => "upsample_bilinear2x",
            Op::Concat { .. } => "channel_concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::GroupNorm { .. } => "group_norm",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
            Op::Custom { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Depthwise { x, .. }
            | Op::Unary { x, .. }
            | Op::Pool { x, .. }
            | Op::AvgPool2x { x }
            | Op::Upsample { x }
            | Op::SliceChannels { x, .. }
            | Op::Sum { x }
            | Op::Scale { x, .. } => vec![*x],
            Op::Binary { x, y, .. } => vec![*x, *y],
            Op::Concat { xs } => xs.clone(),
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Element = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Vars from before the clear become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::invalid("tape", "variable is not recorded on this tape"));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v).expect("var from another tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Name of the op that produced node `index`.
    /// Value of the node at `index`, in recording order.
    pub fn value_at(&self, index: usize) -> &Tensor<T> {
        &self.nodes[index].value
    }

    pub fn op_name(&self, index: usize) -> &'static str {
        self.nodes[index].op.name()
    }

    /// Node indices consumed by node `index`.
    pub fn inputs_of(&self, index: usize) -> Vec<usize> {
        self.nodes[index].op.inputs()
    }

    /// The side of every kink the recorded values sit on: relu input signs
    /// and max-pool winners, in tape order. Two evaluations of one program
    /// with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary { x, kind: Unary::Relu } => {
                    out.extend(self.nodes[*x].value.data().iter().map(|&v| u32::from(v > T::zero())));
                }
                Op::Pool {
                    mode: PoolMode::Max,
                    argmax,
                    ..
                } => out.extend(argmax.iter().map(|&i| i as u32)),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let geom = ConvGeometry::new(self.nodes[xi].value.shape(), self.nodes[wi].value.shape(), opts)?;
        if let Some(bi) = bi {
            let bs = self.nodes[bi].value.shape();
            if bs.numel() != geom.out_c {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.nodes[wi].value.shape(),
                    rhs: bs,
                });
            }
        }
        let out = conv2d_with(
            &geom,
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
        );
        Ok(self.push(out, Op::Conv2d { x: xi, w: wi, b: bi, geom }))
    }

    /// Convolves every channel independently with the constant `kernel`
    /// (shape `(1, 1, kh, kw)`), preserving the channel count.
    pub fn depthwise_fixed(&mut self, x: Var, kernel: &Tensor<T>, opts: ConvOptions) -> Result<Var> {
        let xi = self.check(x)?;
        let ks = kernel.shape();
        if (ks.n, ks.c) != (1, 1) {
            return Err(Error::invalid("depthwise", format!("kernel {ks} must be (1, 1, kh, kw)")));
        }
        let s = self.nodes[xi].value.shape();
        let flat = Shape::new(s.n * s.c, 1, s.h, s.w);
        let geom = ConvGeometry::new(flat, ks, opts)?;
        let data = depthwise_planes(&geom, self.nodes[xi].value.data(), kernel.data());
        let out = Tensor::new(Shape::new(s.n, s.c, geom.oh, geom.ow), data)?;
        Ok(self.push(
            out,
            Op::Depthwise {
                x: xi,
                kernel: kernel.clone(),
                geom,
            },
        ))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xi = self.check(x)?;
        let out = unary(&self.nodes[xi].value, kind);
        Ok(self.push(out, Op::Unary { x: xi, kind }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn binary(&mut self, x: Var, y: Var, kind: Binary) -> Result<Var> {
        let (xi, yi) = (self.check(x)?, self.check(y)?);
        let out = binary(&self.nodes[xi].value, &self.nodes[yi].value, kind)?;
        Ok(self.push(out, Op::Binary { x: xi, y: yi, kind }))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(x, y, Binary::Add)
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(x, y, Binary::Mul)
    }

    /// Dispatches on [`ElementwiseKind`]; unary kinds reject `y`.
    pub fn elementwise(&mut self, x: Var, y: Option<Var>, kind: ElementwiseKind) -> Result<Var> {
        match (kind, y) {
            (ElementwiseKind::Sigmoid, None) => self.sigmoid(x),
            (ElementwiseKind::Relu, None) => self.relu(x),
            (ElementwiseKind::Add, Some(y)) => self.add(x, y),
            (ElementwiseKind::Mul, Some(y)) => self.mul(x, y),
            _ => Err(Error::invalid("elementwise", format!("wrong operand count for {kind:?}"))),
        }
    }

    pub fn pool(&mut self, x: Var, axis: PoolAxis, mode: PoolMode) -> Result<Var> {
        let xi = self.check(x)?;
        let pooled = pool_with_argmax(&self.nodes[xi].value, axis, mode)?;
        Ok(self.push(
            pooled.output,
            Op::Pool {
                x: xi,
                axis,
                mode,
                argmax: pooled.argmax,
            },
        ))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = avg_pool2x(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::AvgPool2x { x: xi }))
    }

    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = upsample_bilinear2x(&self.nodes[xi].value);
        Ok(self.push(out, Op::Upsample { x: xi }))
    }

    pub fn channel_concat(&mut self, xs: &[Var]) -> Result<Var> {
        let idx = xs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = channel_concat(&values)?;
        Ok(self.push(out, Op::Concat { xs: idx }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.slice_channels(start, len)?;
        Ok(self.push(out, Op::SliceChannels { x: xi, start }))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (out, stats) = group_norm_with_stats(
            &self.nodes[xi].value,
            groups,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
        )?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                groups,
                stats,
            },
        ))
    }

    /// Sum of every element, as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        Ok(self.push(out, Op::Sum { x: xi }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.map(|v| v * factor);
        Ok(self.push(out, Op::Scale { x: xi, factor }))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn GradRule<T>>,
    ) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        Ok(self.push(output, Op::Custom { name, inputs: idx, rule }))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self
            .check(loss)
            .map_err(|_| Error::Backward("loss is not recorded on this tape".into()))?;
        let ls = self.nodes[li].value.shape();
        if ls.numel() != 1 {
            return Err(Error::Backward(format!("loss must be a scalar, got shape {ls}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::full(ls, T::one()));
        let mut visited = Vec::new();

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            for (input, gi) in self.local_grads(node, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            visited,
        })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, geom } => {
                let cg = conv2d_backward(geom, val(*x), val(*w), g);
                let mut out = vec![(*x, cg.dx), (*w, cg.dw)];
                if let Some(b) = b {
                    let db = cg.db.reshape(val(*b).shape()).expect("bias shape");
                    out.push((*b, db));
                }
                out
            }
            Op::Depthwise { x, kernel, geom } => {
                let dx = depthwise_planes_backward(geom, kernel.data(), g.data());
                vec![(*x, Tensor::new(val(*x).shape(), dx).expect("depthwise dx"))]
            }
            Op::Unary { x, kind } => vec![(*x, unary_backward(*kind, val(*x), &node.value, g))],
            Op::Binary { x, y, kind } => {
                let (gx, gy) = binary_backward(*kind, val(*x), val(*y), g);
                vec![(*x, gx), (*y, gy)]
            }
            Op::Pool { x, axis, mode, argmax } => {
                vec![(*x, pool_backward(val(*x).shape(), *axis, *mode, argmax, g))]
            }
            Op::AvgPool2x { x } => vec![(*x, avg_pool2x_backward(val(*x).shape(), g))],
            Op::Upsample { x } => vec![(*x, upsample_bilinear2x_backward(val(*x).shape(), g))],
            Op::Concat { xs } => {
                let mut start = 0;
                xs.iter()
                    .map(|&i| {
                        let c = val(i).shape().c;
                        let part = g.slice_channels(start, c).expect("concat grad slice");
                        start += c;
                        (i, part)
                    })
                    .collect()
            }
            Op::SliceChannels { x, start } => {
                let s = val(*x).shape();
                let c = g.shape().c;
                let mut dx = Tensor::zeros(s);
                let p = s.plane();
                for n in 0..s.n {
                    let dst = (n * s.c + start) * p;
                    dx.data_mut()[dst..dst + c * p]
                        .copy_from_slice(&g.data()[n * c * p..(n + 1) * c * p]);
                }
                vec![(*x, dx)]
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) = group_norm_backward(val(*x), *groups, val(*gamma), stats, g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(val(*x).shape(), gv))]
            }
            Op::Scale { x, factor } => vec![(*x, g.map(|v| v * *factor))],
            Op::Custom { inputs, rule, .. } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                let gs = rule.backward(&ins, &node.value, g);
                assert_eq!(gs.len(), inputs.len(), "custom rule returned wrong gradient count");
                inputs.iter().copied().zip(gs).collect()
            }
        }
    }
}

pub struct Gradients<T: Element> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Element> Gradients<T> {
    /// `None` when `v` does not influence the loss or never required a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

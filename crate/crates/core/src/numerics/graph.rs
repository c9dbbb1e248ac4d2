//! Recorded tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Sequence tensors use the `[B, M, C]` layout.

use std::collections::HashMap;

use super::ops;
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose backward pass is supplied by the caller.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the gradient of the output. `None`
    /// marks an input the op is constant in.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Silu,
    Softplus,
    Sigmoid,
    /// `-exp(x)`
    NegExp,
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Unary { x: Var, kind: Unary },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Conv { x: Var, kernel: Var, bias: Var },
    Reverse { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    MeanTokens { x: Var },
    MaxTokens { x: Var, argmax: Vec<usize> },
    ConcatTokens { parts: Vec<Var> },
    ConcatChannels { parts: Vec<Var> },
    SegmentMean { x: Var, sizes: Vec<usize> },
    Lerp { alpha: Var, a: Var, b: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Backward {
    grads: Vec<Option<Vec<f64>>>,
    params: Gradients,
}

impl Backward {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients are still tracked for it (see [`Backward::wrt`])
    /// only if it is later wrapped by [`Graph::input`].
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A leaf whose gradient is wanted but which is not a registered parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), &[]);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Silu => ops::silu_scalar,
            Unary::Softplus => ops::softplus_scalar,
            Unary::Sigmoid => ops::sigmoid_scalar,
            Unary::NegExp => |v: f64| -v.exp(),
        };
        let y = self.value(x).map(f);
        self.push(y, Op::Unary { x, kind }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn neg_exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::NegExp)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let y = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta]))
    }

    pub fn causal_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let y = ops::causal_depthwise_conv1d(self.value(x), self.value(kernel), self.value(bias))?;
        Ok(self.push(y, Op::Conv { x, kernel, bias }, &[x, kernel, bias]))
    }

    /// Reverse the token axis of a `[B, M, C]` tensor.
    pub fn reverse(&mut self, x: Var) -> Result<Var> {
        let y = reverse_tokens(self.value(x))?;
        Ok(self.push(y, Op::Reverse { x }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let y = Tensor::new(self.shape(a), data)?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let y = Tensor::new(self.shape(a), data)?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean over the token axis: `[B, M, C] -> [B, 1, C]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, m, c) = self.value(x).dims3()?;
        if m == 0 {
            return Err(Error::dim("mean_tokens", self.shape(x), &[b, 1, c]));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for t in 0..m {
                for ci in 0..c {
                    out[bi * c + ci] += xd[(bi * m + t) * c + ci];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let y = Tensor::new(&[b, 1, c], out)?;
        Ok(self.push(y, Op::MeanTokens { x }, &[x]))
    }

    /// Max over the token axis: `[B, M, C] -> [B, 1, C]`. Ties resolve to the first token.
    pub fn max_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, m, c) = self.value(x).dims3()?;
        if m == 0 {
            return Err(Error::dim("max_tokens", self.shape(x), &[b, 1, c]));
        }
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![0; b * c];
        for bi in 0..b {
            for t in 0..m {
                for ci in 0..c {
                    let src = (bi * m + t) * c + ci;
                    if xd[src] > out[bi * c + ci] {
                        out[bi * c + ci] = xd[src];
                        argmax[bi * c + ci] = src;
                    }
                }
            }
        }
        let y = Tensor::new(&[b, 1, c], out)?;
        Ok(self.push(y, Op::MaxTokens { x, argmax }, &[x]))
    }

    /// Concatenate `[B, M_i, C]` tensors along the token axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat of nothing"))?;
        let (b, _, c) = self.value(first).dims3()?;
        let mut total = 0;
        for &p in parts {
            let (pb, pm, pc) = self.value(p).dims3()?;
            if pb != b || pc != c {
                return Err(Error::dim("concat_tokens", self.shape(first), self.shape(p)));
            }
            total += pm;
        }
        let mut out = Vec::with_capacity(b * total * c);
        for bi in 0..b {
            for &p in parts {
                let (_, pm, _) = self.value(p).dims3()?;
                out.extend_from_slice(&self.value(p).data()[bi * pm * c..(bi + 1) * pm * c]);
            }
        }
        let y = Tensor::new(&[b, total, c], out)?;
        Ok(self.push(y, Op::ConcatTokens { parts: parts.to_vec() }, parts))
    }

    /// Concatenate `[B, M, C_i]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat of nothing"))?;
        let (b, m, _) = self.value(first).dims3()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pm, pc) = self.value(p).dims3()?;
            if pb != b || pm != m {
                return Err(Error::dim("concat_channels", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * m * total);
        for row in 0..b * m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let y = Tensor::new(&[b, m, total], out)?;
        Ok(self.push(y, Op::ConcatChannels { parts: parts.to_vec() }, parts))
    }

    /// Mean-pool contiguous token segments of the given sizes.
    pub fn segment_mean(&mut self, x: Var, sizes: &[usize]) -> Result<Var> {
        let (b, m, c) = self.value(x).dims3()?;
        if sizes.iter().sum::<usize>() != m || sizes.contains(&0) {
            return Err(Error::dim("segment_mean", self.shape(x), sizes));
        }
        let xd = self.value(x).data();
        let l = sizes.len();
        let mut out = vec![0.0; b * l * c];
        for bi in 0..b {
            let mut t = 0;
            for (s, &n) in sizes.iter().enumerate() {
                let dst = &mut out[(bi * l + s) * c..(bi * l + s + 1) * c];
                for _ in 0..n {
                    let src = &xd[(bi * m + t) * c..(bi * m + t + 1) * c];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    t += 1;
                }
                dst.iter_mut().for_each(|d| *d /= n as f64);
            }
        }
        let y = Tensor::new(&[b, l, c], out)?;
        Ok(self.push(
            y,
            Op::SegmentMean {
                x,
                sizes: sizes.to_vec(),
            },
            &[x],
        ))
    }

    /// `alpha * a + (1 - alpha) * b` with a scalar `alpha`.
    pub fn lerp(&mut self, alpha: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape("lerp", a, b)?;
        if self.value(alpha).numel() != 1 {
            return Err(Error::dim("lerp alpha", self.shape(alpha), &[]));
        }
        let al = self.value(alpha).item();
        let data = zip_map(self.value(a), self.value(b), |x, y| al * x + (1.0 - al) * y);
        let y = Tensor::new(self.shape(a), data)?;
        Ok(self.push(y, Op::Lerp { alpha, a, b }, &[alpha, a, b]))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Propagate gradients from the scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(gy.clone());
            }
            let send = |v: Var, g: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push(*id, gy.clone()),
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), &gy);
                    send(*x, gx, &mut grads);
                    send(*w, gw, &mut grads);
                    if let Some(b) = b {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Unary { x, kind } => {
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let g = gy
                        .iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(g, (&xi, &yi))| {
                            g * match kind {
                                Unary::Silu => ops::silu_grad_scalar(xi),
                                Unary::Softplus => ops::sigmoid_scalar(xi),
                                Unary::Sigmoid => yi * (1.0 - yi),
                                Unary::NegExp => yi,
                            }
                        })
                        .collect();
                    send(*x, g, &mut grads);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (gx, gg, gb) = ops::layer_norm_backward(self.value(*x), self.value(*gamma), *eps, &gy);
                    send(*x, gx, &mut grads);
                    send(*gamma, gg, &mut grads);
                    send(*beta, gb, &mut grads);
                }
                Op::Conv { x, kernel, bias } => {
                    let (gx, gk, gb) = ops::causal_depthwise_conv1d_backward(self.value(*x), self.value(*kernel), &gy);
                    send(*x, gx, &mut grads);
                    send(*kernel, gk, &mut grads);
                    send(*bias, gb, &mut grads);
                }
                Op::Reverse { x } => {
                    let gt = Tensor::new(node.value.shape(), gy)?;
                    send(*x, reverse_tokens(&gt)?.into_data(), &mut grads);
                }
                Op::Add { a, b } => {
                    send(*a, gy.clone(), &mut grads);
                    send(*b, gy, &mut grads);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    send(*a, gy.iter().zip(bv).map(|(g, v)| g * v).collect(), &mut grads);
                    send(*b, gy.iter().zip(av).map(|(g, v)| g * v).collect(), &mut grads);
                }
                Op::Sum { x } => {
                    send(*x, vec![gy[0]; self.value(*x).numel()], &mut grads);
                }
                Op::MeanTokens { x } => {
                    let (b, m, c) = self.value(*x).dims3()?;
                    let mut g = vec![0.0; b * m * c];
                    for bi in 0..b {
                        for t in 0..m {
                            for ci in 0..c {
                                g[(bi * m + t) * c + ci] = gy[bi * c + ci] / m as f64;
                            }
                        }
                    }
                    send(*x, g, &mut grads);
                }
                Op::MaxTokens { x, argmax } => {
                    let mut g = vec![0.0; self.value(*x).numel()];
                    for (&src, gv) in argmax.iter().zip(&gy) {
                        g[src] += gv;
                    }
                    send(*x, g, &mut grads);
                }
                Op::ConcatTokens { parts } => {
                    let (b, total, c) = node.value.dims3()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, pm, _) = self.value(p).dims3()?;
                        let mut g = Vec::with_capacity(b * pm * c);
                        for bi in 0..b {
                            let start = (bi * total + offset) * c;
                            g.extend_from_slice(&gy[start..start + pm * c]);
                        }
                        offset += pm;
                        send(p, g, &mut grads);
                    }
                }
                Op::ConcatChannels { parts } => {
                    let (b, m, total) = node.value.dims3()?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).last_dim();
                        let mut g = Vec::with_capacity(b * m * w);
                        for row in 0..b * m {
                            let start = row * total + offset;
                            g.extend_from_slice(&gy[start..start + w]);
                        }
                        offset += w;
                        send(p, g, &mut grads);
                    }
                }
                Op::SegmentMean { x, sizes } => {
                    let (b, m, c) = self.value(*x).dims3()?;
                    let l = sizes.len();
                    let mut g = vec![0.0; b * m * c];
                    for bi in 0..b {
                        let mut t = 0;
                        for (s, &n) in sizes.iter().enumerate() {
                            let src = &gy[(bi * l + s) * c..(bi * l + s + 1) * c];
                            for _ in 0..n {
                                let dst = &mut g[(bi * m + t) * c..(bi * m + t + 1) * c];
                                dst.iter_mut().zip(src).for_each(|(d, v)| *d = v / n as f64);
                                t += 1;
                            }
                        }
                    }
                    send(*x, g, &mut grads);
                }
                Op::Lerp { alpha, a, b } => {
                    let al = self.value(*alpha).item();
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let galpha = gy.iter().zip(av.iter().zip(bv)).map(|(g, (x, y))| g * (x - y)).sum();
                    send(*alpha, vec![galpha], &mut grads);
                    send(*a, gy.iter().map(|g| g * al).collect(), &mut grads);
                    send(*b, gy.iter().map(|g| g * (1.0 - al)).collect(), &mut grads);
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = op.backward(&values, &node.value, &gy);
                    debug_assert_eq!(gs.len(), inputs.len(), "{} gradient arity", op.name());
                    for (v, g) in inputs.iter().zip(gs) {
                        if let Some(g) = g {
                            send(*v, g, &mut grads);
                        }
                    }
                }
            }
        }
        Ok(Backward { grads, params })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

/// Reverse the token axis of a `[B, M, C]` tensor.
pub fn reverse_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, m, c) = x.dims3()?;
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for t in (0..m).rev() {
            out.extend_from_slice(&xd[(bi * m + t) * c..(bi * m + t + 1) * c]);
        }
    }
    Tensor::new(x.shape(), out)
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in
//! execution order; [`Graph::backward`] walks the tape in reverse and
//! accumulates exact vector-Jacobian products. Graphs are single-use per
//! backward pass: call [`Graph::reset_grads`] before differentiating again.

use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, ConvMeta};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Scale(usize, T),
    AddScalar(usize),
    MaxPool2 {
        x: usize,
        arg: Vec<usize>,
    },
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    Minimum(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    GatherCols {
        x: usize,
        idx: Vec<usize>,
    },
    SumLast(usize),
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    differentiated: bool,
    verify: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            differentiated: false,
            verify: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-op finiteness check.
    pub fn verify_finite(mut self, on: bool) -> Self {
        self.verify = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {v:?} is not recorded on graph {}",
                self.id
            )));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.verify && !value.all_finite() {
            return Err(Error::NonFinite(format!("graph node {}", self.nodes.len())));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Ok(Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Gradient of the last differentiated loss w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let i = self.idx(v).ok()?;
        let n = &self.nodes[i];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Adds the gradient of `v` into the gradient slot of `target`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        let i = self.idx(v)?;
        if let Some(g) = &self.nodes[i].grad {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.differentiated = false;
    }

    // ---- operations ----

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = ops::conv2d(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
            stride,
            pad,
        )?;
        let ng = self.ng(xi) || self.ng(wi) || bi.is_some_and(|i| self.ng(i));
        self.push(
            out,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn conv2d_meta(&mut self, x: Var, w: Var, b: Option<Var>, meta: &ConvMeta) -> Result<Var> {
        self.conv2d(x, w, b, meta.stride, meta.padding)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = ops::dense(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
        )?;
        let ng = self.ng(xi) || self.ng(wi) || bi.is_some_and(|i| self.ng(i));
        self.push(
            out,
            Op::Dense {
                x: xi,
                w: wi,
                b: bi,
            },
            ng,
        )
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        op: impl FnOnce(usize) -> Op<T>,
    ) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(f);
        let ng = self.ng(xi);
        self.push(out, op(xi), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::exp, Op::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::ln, Op::Log)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, |v| v.max(lo).min(hi), |i| Op::Clamp { x: i, lo, hi })
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (out, arg) = ops::maxpool2(&self.nodes[xi].value)?;
        let ng = self.ng(xi);
        self.push(out, Op::MaxPool2 { x: xi, arg }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.clone().reshape(shape)?;
        let ng = self.ng(xi);
        self.push(out, Op::Reshape(xi), ng)
    }

    /// Flattens all trailing axes: `(N, ...) -> (N, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.try_value(x)?.shape().to_vec();
        let n = s.first().copied().unwrap_or(1);
        let rest: usize = s.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(Error::dim(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.ng(ai) || self.ng(bi);
        self.push(out, op(ai, bi), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            "minimum",
            |x, y| if x <= y { x } else { y },
            Op::Minimum,
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::softmax(&self.nodes[xi].value)?;
        let ng = self.ng(xi);
        self.push(out, Op::Softmax(xi), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::log_softmax(&self.nodes[xi].value)?;
        let ng = self.ng(xi);
        self.push(out, Op::LogSoftmax(xi), ng)
    }

    /// Picks `x[i, idx[i]]` from an `(N, K)` tensor.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let s = v.shape();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&j| j >= s[1]) {
            return Err(Error::dim("gather_cols", s, &[idx.len()]));
        }
        let k = s[1];
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| v.data()[i * k + j])
            .collect();
        let out = Tensor::new(&[idx.len()], data)?;
        let ng = self.ng(xi);
        self.push(
            out,
            Op::GatherCols {
                x: xi,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let s = v.shape();
        let k = *s
            .last()
            .ok_or_else(|| Error::contract("sum_last of a 0-d tensor"))?;
        let data = v
            .data()
            .chunks(k.max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        let out = Tensor::new(&s[..s.len() - 1], data)?;
        let ng = self.ng(xi);
        self.push(out, Op::SumLast(xi), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        let ng = self.ng(xi);
        self.push(out, Op::Sum(xi), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        if v.numel() == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let out = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        let ng = self.ng(xi);
        self.push(out, Op::Mean(xi), ng)
    }

    // ---- reverse pass ----

    /// Populates gradients of `loss` w.r.t. every reachable node that
    /// requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        if self.differentiated {
            return Err(Error::contract("backward called twice without reset_grads"));
        }
        if !self.nodes[li].needs_grad {
            return Err(Error::Graph(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<T>>> = self.nodes.iter_mut().map(|n| n.grad.take()).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (n, g) in self.nodes.iter_mut().zip(grads) {
            if n.needs_grad {
                n.grad = g;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |j: usize| &nodes[j].value;
        let mut send = |j: usize, contrib: Vec<T>| {
            if !nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |j: usize, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            // f(grad, input, output)
            val(j)
                .data()
                .iter()
                .zip(nodes[i].value.data())
                .zip(g)
                .map(|((&x, &y), &gi)| f(gi, x, y))
                .collect()
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let cg =
                    ops::conv2d_backward(val(*x), val(*w), g, *stride, *pad, nodes[*x].needs_grad)?;
                if let Some(dx) = cg.input {
                    send(*x, dx);
                }
                send(*w, cg.weight);
                if let Some(b) = b {
                    send(*b, cg.bias);
                }
            }
            Op::Dense { x, w, b } => {
                let (dx, dw, db) = ops::dense_backward(val(*x), val(*w), g, nodes[*x].needs_grad);
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                send(*w, dw);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::Relu(x) => send(
                *x,
                elementwise(*x, &|gi, xv, _| if xv > T::zero() { gi } else { T::zero() }),
            ),
            Op::Tanh(x) => send(*x, elementwise(*x, &|gi, _, y| gi * (T::one() - y * y))),
            Op::Exp(x) => send(*x, elementwise(*x, &|gi, _, y| gi * y)),
            Op::Log(x) => send(*x, elementwise(*x, &|gi, xv, _| gi / xv)),
            Op::Square(x) => send(*x, elementwise(*x, &|gi, xv, _| gi * (xv + xv))),
            Op::Scale(x, c) => {
                let c = *c;
                send(*x, g.iter().map(|&gi| gi * c).collect())
            }
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *x,
                    elementwise(*x, &|gi, xv, _| {
                        if xv >= lo && xv <= hi {
                            gi
                        } else {
                            T::zero()
                        }
                    }),
                )
            }
            Op::MaxPool2 { x, arg } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (&a, &gi) in arg.iter().zip(g) {
                    dx[a] += gi;
                }
                send(*x, dx)
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                send(*a, g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect());
                send(*b, g.iter().zip(va).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let take_a: Vec<bool> = va.iter().zip(vb).map(|(x, y)| x <= y).collect();
                send(
                    *a,
                    g.iter()
                        .zip(&take_a)
                        .map(|(&gi, &t)| if t { gi } else { T::zero() })
                        .collect(),
                );
                send(
                    *b,
                    g.iter()
                        .zip(&take_a)
                        .map(|(&gi, &t)| if t { T::zero() } else { gi })
                        .collect(),
                );
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let k = *nodes[i].value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*x, dx)
            }
            Op::LogSoftmax(x) => {
                let y = nodes[i].value.data();
                let k = *nodes[i].value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                    let gs: T = gr.iter().copied().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * gs;
                    }
                }
                send(*x, dx)
            }
            Op::GatherCols { x, idx } => {
                let k = val(*x).shape()[1];
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (r, (&j, &gi)) in idx.iter().zip(g).enumerate() {
                    dx[r * k + j] += gi;
                }
                send(*x, dx)
            }
            Op::SumLast(x) => {
                let k = *val(*x).shape().last().unwrap_or(&1);
                let dx = g
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi, k))
                    .collect();
                send(*x, dx)
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                send(*x, vec![g[0] / T::lit(n as f64); n])
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 5.0]).unwrap(), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(), true);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn foreign_variable_is_a_graph_error() {
        let mut a = Graph::<f32>::new();
        let mut b = Graph::<f32>::new();
        let x = a.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(b.sum(x), Err(Error::Graph(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let x = g.leaf(Tensor::full(&[2], 2.0), true);
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn verification_mode_flags_nan() {
        let mut g = Graph::<f32>::new().verify_finite(true);
        let x = g.leaf(Tensor::full(&[1], -1.0), true);
        assert!(matches!(g.ln(x), Err(Error::NonFinite(_))));
    }
}

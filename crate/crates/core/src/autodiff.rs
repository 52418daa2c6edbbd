//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every value computed during a forward pass. Operations
//! return lightweight [`Var`] handles; [`Tape::backward`] walks the record in
//! exact reverse order and returns a [`Gradients`] table.
//!
//! ```
//! use gcnrwz::autodiff::Tape;
//! use gcnrwz::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(&tape, x).data(), &[2.0, -4.0, 6.0]);
//! ```

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{invalid, Error, Result};
use crate::tensor::{self, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Tanh,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Hadamard,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Softmax(Var, usize),
    Conv1dTime(Var, Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Single-threaded by construction.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        &self.nodes[v.idx]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// Smallest |input| over every `Relu` and `Abs` node recorded so far
    /// (infinity when there are none). Central differences reaching
    /// further than this may straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary(Unary::Relu | Unary::Abs, a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.idx].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = match op {
            Binary::Add => tensor::broadcast_binary(va, vb, "add", |x, y| x + y)?,
            Binary::Sub => tensor::broadcast_binary(va, vb, "sub", |x, y| x - y)?,
            Binary::Hadamard => tensor::broadcast_binary(va, vb, "hadamard", |x, y| x * y)?,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Hadamard, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Relu => |x| x.max(0.0),
            Unary::Tanh => f64::tanh,
            Unary::Abs => f64::abs,
        };
        let out = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Unary(op, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(a), axis)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    /// Valid correlation along time; see [`tensor::conv1d_time`].
    pub fn conv1d_time(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = tensor::conv1d_time(self.value(x), self.value(kernel))?;
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(out, Op::Conv1dTime(x, kernel), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat(&vals, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = tensor::slice(self.value(a), axis, start, len)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Slice(a, axis, start), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(invalid("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::MeanAll(a), rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::sum_axis(self.value(a), axis)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| invalid(format!("mean_axis: axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.idx).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.idx].requires_grad {
                return;
            }
            match &mut grads[v.idx] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let rg = |v: Var| self.nodes[v.idx].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (sa, sb) = (self.nodes[a.idx].value.shape(), self.nodes[b.idx].value.shape());
                match op {
                    Binary::Add => {
                        if rg(*a) {
                            acc(*a, tensor::sum_to_shape(g, sa));
                        }
                        if rg(*b) {
                            acc(*b, tensor::sum_to_shape(g, sb));
                        }
                    }
                    Binary::Sub => {
                        if rg(*a) {
                            acc(*a, tensor::sum_to_shape(g, sa));
                        }
                        if rg(*b) {
                            acc(*b, tensor::sum_to_shape(&g.map(|x| -x), sb));
                        }
                    }
                    Binary::Hadamard => {
                        let (va, vb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                        if rg(*a) {
                            let full = tensor::broadcast_binary(g, vb, "hadamard", |x, y| x * y)?;
                            acc(*a, tensor::sum_to_shape(&full, sa));
                        }
                        if rg(*b) {
                            let full = tensor::broadcast_binary(g, va, "hadamard", |x, y| x * y)?;
                            acc(*b, tensor::sum_to_shape(&full, sb));
                        }
                    }
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Unary(op, a) => {
                let y = &node.value;
                let x = &self.nodes[a.idx].value;
                let local = match op {
                    Unary::Sigmoid => tensor::broadcast_binary(g, y, "sigmoid", |g, s| g * s * (1.0 - s))?,
                    Unary::Tanh => tensor::broadcast_binary(g, y, "tanh", |g, t| g * (1.0 - t * t))?,
                    Unary::Relu => {
                        tensor::broadcast_binary(g, x, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?
                    }
                    Unary::Abs => tensor::broadcast_binary(g, x, "abs", |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?,
                };
                acc(*a, local);
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = tensor::matmul_backward(
                    &self.nodes[a.idx].value,
                    &self.nodes[b.idx].value,
                    g,
                    rg(*a),
                    rg(*b),
                )?;
                if let Some(t) = ga {
                    acc(*a, t);
                }
                if let Some(t) = gb {
                    acc(*b, t);
                }
            }
            Op::Softmax(a, axis) => acc(*a, tensor::softmax_backward(&node.value, g, *axis)),
            Op::Conv1dTime(x, k) => {
                let (gx, gk) = tensor::conv1d_time_backward(
                    &self.nodes[x.idx].value,
                    &self.nodes[k.idx].value,
                    g,
                    rg(*x),
                    rg(*k),
                )?;
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if let Some(t) = gk {
                    acc(*k, t);
                }
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = self.nodes[p.idx].value.shape()[*axis];
                    if rg(*p) {
                        acc(*p, tensor::slice(g, *axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let full = self.nodes[a.idx].value.shape();
                acc(*a, tensor::slice_backward(g, full, *axis, *start));
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                acc(*a, g.permute(&inv)?);
            }
            Op::Reshape(a) => {
                let s = self.nodes[a.idx].value.shape().to_vec();
                acc(*a, g.clone().reshaped(&s));
            }
            Op::SumAll(a) => {
                let s = self.nodes[a.idx].value.shape();
                acc(*a, Tensor::full(s, g.item()));
            }
            Op::MeanAll(a) => {
                let v = &self.nodes[a.idx].value;
                acc(*a, Tensor::full(v.shape(), g.item() / v.numel() as f64));
            }
            Op::SumAxis(a, axis) => {
                let s = self.nodes[a.idx].value.shape().to_vec();
                let mut kept = s.clone();
                kept[*axis] = 1;
                let g = g.clone().reshaped(&kept);
                let full = tensor::broadcast_binary(&g, &Tensor::zeros(&s), "sum_axis", |x, _| x)?;
                acc(*a, full);
            }
        }
        Ok(())
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` is not an ancestor of the loss.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "gradient lookup with a foreign variable");
        match &self.grads[v.idx] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.shape(v)),
        }
    }

    pub fn take(&mut self, tape: &Tape, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "gradient lookup with a foreign variable");
        self.grads[v.idx]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

/// Central-difference gradient check of a scalar tape function.
///
/// `f` records a scalar on the tape from the bound inputs. Each input is
/// perturbed coordinate by coordinate by ±`eps` and ±2`eps` (the fourth-order
/// five-point stencil, so truncation error is O(eps^4)); the returned value is the
/// largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)` over all
/// coordinates of all inputs.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(invalid("finite-difference check needs a scalar function"));
        }
        Ok(v.item())
    };

    let first = eval(inputs)?;
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let analytic = grads.get(&tape, v);
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            let mut at = |step: f64| -> Result<f64> {
                probe[which].data_mut()[i] = orig + step;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            probe[which].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_difference_check_many`].
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vs| f(tape, vs[0]), std::slice::from_ref(x), eps)
}

/// Move every coordinate at least `margin` away from zero (relu kink avoidance).
pub fn nudge_from_zero(x: &Tensor, margin: f64) -> Tensor {
    x.map(|v| {
        if v.abs() >= margin {
            v
        } else if v >= 0.0 {
            v + margin
        } else {
            v - margin
        }
    })
}

//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Nodes
//! are immutable once pushed; [`Graph::backward`] walks them in reverse and
//! returns a [`GradientRecord`] aligned with the parameter store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{GradientRecord, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Softmax(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Gelu(Var),
    Sum(Var),
    MaskedMae { pred: Var, target: Tensor, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `σ(2u)` with `u = c(x + a x³)`, which equals `(1 + tanh u) / 2`.
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A differentiable leaf bound to a stored parameter. Registering the same
    /// parameter twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c).check_finite("add_scalar")?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::AddScalar(a), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c).check_finite("scale")?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Scale(a, c), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x · w + b` where `w` is `[in, out]` and `b` is `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_last_axis(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, std) = tensor::mean_std_last_axis(self.value(x), eps)?;
        let out = tensor::normalize_last_axis(self.value(x), eps)?;
        let inv_std = std.data().iter().map(|s| 1.0 / s).collect();
        let ng = self.ng(x);
        Ok(self.push(out, Op::Normalize { x, inv_std }, ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_last_axis(&values)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = tensor::slice_last_axis(self.value(x), start, len)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Slice { x, start }, ng))
    }

    /// Row lookup: `table` is `[vocab, d]`, the output is `lead_shape ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], lead_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 || ids.len() != lead_shape.iter().product::<usize>() {
            return Err(Error::dim("gather", t.shape(), lead_shape));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Validation(format!(
                    "lookup id {id} outside vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut shape = lead_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = tensor::permute(self.value(x), perm)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Gelu(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum()).check_finite("sum")?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Sum(x), ng))
    }

    /// Mean absolute error over entries whose target is nonzero.
    pub fn masked_mae(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dim("masked_mae", p.shape(), target.shape()));
        }
        let mut count = 0usize;
        let mut total = 0.0;
        for (&y, &yh) in target.data().iter().zip(p.data()) {
            if y != 0.0 {
                count += 1;
                total += (yh - y).abs();
            }
        }
        if count == 0 {
            return Err(Error::Contract("masked loss over an empty mask".into()));
        }
        let out = Tensor::scalar(total / count as f64).check_finite("masked_mae")?;
        let ng = self.ng(pred);
        Ok(self.push(
            out,
            Op::MaskedMae {
                pred,
                target: target.clone(),
                count,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Parameters not reached by the loss
    /// get zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<GradientRecord> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }

        let mut collected = Vec::with_capacity(store.len());
        for (id, entry) in store.iter() {
            let g = self
                .params
                .get(&id)
                .and_then(|v| grads.get(v.0).and_then(|g| g.clone()))
                .unwrap_or_else(|| Tensor::zeros(entry.tensor.shape()));
            collected.push(g);
        }
        Ok(GradientRecord::from_vec(collected))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                send(grads, *a, tensor::reduce_to_shape(g, self.shape(*a)));
                send(grads, *b, tensor::reduce_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                send(grads, *a, tensor::reduce_to_shape(g, self.shape(*a)));
                send(grads, *b, tensor::reduce_to_shape(&g.scale(-1.0), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let full = g.mul(vb).expect("forward shapes broadcast");
                    send(grads, *a, tensor::reduce_to_shape(&full, va.shape()));
                }
                if self.ng(*b) {
                    let full = g.mul(va).expect("forward shapes broadcast");
                    send(grads, *b, tensor::reduce_to_shape(&full, vb.shape()));
                }
            }
            Op::AddScalar(a) => send(grads, *a, g.clone()),
            Op::Scale(a, c) => send(grads, *a, g.scale(*c)),
            Op::MatMul(a, b) => {
                let (ga, gb) = tensor::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    g,
                    self.ng(*a),
                    self.ng(*b),
                );
                if let Some(ga) = ga {
                    send(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    send(grads, *b, gb);
                }
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let d = s.last_dim();
                let mut out = g.clone();
                for (orow, srow) in out.data_mut().chunks_mut(d).zip(s.data().chunks(d)) {
                    let dot: f64 = orow.iter().zip(srow).map(|(x, y)| x * y).sum();
                    for (o, &sv) in orow.iter_mut().zip(srow) {
                        *o = sv * (*o - dot);
                    }
                }
                send(grads, *a, out);
            }
            Op::Normalize { x, inv_std } => {
                let y = &node.value;
                let d = y.last_dim();
                let mut out = g.clone();
                for (r, (orow, yrow)) in out
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .enumerate()
                {
                    let mean_g = orow.iter().sum::<f64>() / d as f64;
                    let mean_gy = orow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (o, &yv) in orow.iter_mut().zip(yrow) {
                        *o = inv_std[r] * (*o - mean_g - yv * mean_gy);
                    }
                }
                send(grads, *x, out);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.ng(p) {
                        let piece = tensor::slice_last_axis(g, start, w).expect("concat widths");
                        send(grads, p, piece);
                    }
                    start += w;
                }
            }
            Op::Slice { x, start } => {
                let src = self.value(*x);
                let d = src.last_dim();
                let w = g.last_dim();
                let mut out = Tensor::zeros(src.shape());
                for (orow, grow) in out.data_mut().chunks_mut(d).zip(g.data().chunks(w)) {
                    orow[*start..*start + w].copy_from_slice(grow);
                }
                send(grads, *x, out);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut out = Tensor::zeros(t.shape());
                let od = out.data_mut();
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        od[id * d + j] += g.data()[k * d + j];
                    }
                }
                send(grads, *table, out);
            }
            Op::Permute(x, perm) => {
                let inv = tensor::inverse_permutation(perm);
                send(grads, *x, tensor::permute(g, &inv).expect("valid permutation"));
            }
            Op::Reshape(x) => {
                send(grads, *x, g.reshape(self.shape(*x)).expect("same size"));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &v)| gv * gelu_grad(v))
                    .collect();
                send(grads, *x, Tensor::new(xv.shape().to_vec(), data).expect("shape"));
            }
            Op::Sum(x) => {
                send(grads, *x, Tensor::filled(self.shape(*x), g.item()));
            }
            Op::MaskedMae {
                pred,
                target,
                count,
            } => {
                let p = self.value(*pred);
                let scale = g.item() / *count as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&yh, &y)| {
                        if y == 0.0 {
                            0.0
                        } else {
                            scale * (yh - y).signum() * f64::from(yh != y)
                        }
                    })
                    .collect();
                send(grads, *pred, Tensor::new(p.shape().to_vec(), data).expect("shape"));
            }
        }
    }
}

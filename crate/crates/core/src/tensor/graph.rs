//! Tape of tensor operations with a reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse scan.

use super::kernels::{gemm, sigmoid};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

/// Backward rule for a fused operation defined outside this module.
pub trait CustomBackward: Send {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Conv { input: Var, weights: Var, bias: Var },
    AvgPool(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Activation { input: Var, kind: Activation },
    Elementwise { a: Var, b: Var, kind: Elementwise },
    Gate { features: Var, attention: Var },
    ConcatRows(Var, Var),
    BroadcastCols(Var),
    Reshape(Var),
    NormalizeCols { input: Var, norms: Vec<f64> },
    Log { input: Var, floor: f64 },
    Sum(Var),
    Mean(Var),
    Scale { input: Var, factor: f64 },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// Output shape plus per-input strides (zero on broadcast axes).
struct Broadcast {
    shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn padded(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.resize(rank, 1);
    s
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Lower-rank operands are padded with trailing unit axes, so a `[C]`
/// vector lines up with the rows of a `[C × N]` map.
fn broadcast(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    let rank = a.len().max(b.len());
    let pa = padded(a, rank);
    let pb = padded(b, rank);
    let mut shape = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        shape.push(if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return None;
        });
    }
    Some(Broadcast {
        a_strides: strides_for(&pa, &shape),
        b_strides: strides_for(&pb, &shape),
        shape,
    })
}

impl Broadcast {
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.shape.len();
        let total: usize = self.shape.iter().product();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        1 => Some((shape[0], 1)),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

/// Sum taken in ascending value order, so any permutation of `values`
/// gives the same bits.
pub(crate) fn order_free_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// `out[c, n] = bias[c] + Σ_k weights[c, k] · input[k, n]`.
    ///
    /// A rank-1 input is treated as a single column.
    pub fn pointwise_conv(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weights).to_vec();
        let bs = self.shape(bias).to_vec();
        let (cin, n) = as_matrix(&xs).ok_or_else(|| Error::dim("pointwise_conv", &xs, &ws))?;
        if ws.len() != 2 || ws[1] != cin {
            return Err(Error::dim("pointwise_conv", &xs, &ws));
        }
        let cout = ws[0];
        if bs != [cout] {
            return Err(Error::dim("pointwise_conv", &ws, &bs));
        }
        let mut out = vec![0.0; cout * n];
        let b = self.value(bias).data();
        for (row, &bc) in out.chunks_mut(n).zip(b) {
            row.fill(bc);
        }
        gemm(
            cout,
            cin,
            n,
            self.value(weights).data(),
            false,
            self.value(input).data(),
            false,
            &mut out,
            true,
        );
        let rg = self.needs(&[input, weights, bias]);
        Ok(self.push(
            Tensor::new(vec![cout, n], out)?,
            Op::Conv {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    /// Mean over points: `[C × N] → [C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, n) = as_matrix(x.shape()).ok_or_else(|| Error::dim("global_avg_pool", x.shape(), &[]))?;
        if n == 0 {
            return Err(Error::EmptyInput("global_avg_pool"));
        }
        let out: Vec<f64> = x
            .data()
            .chunks(n)
            .map(|row| order_free_sum(row) / n as f64)
            .collect();
        debug_assert_eq!(out.len(), c);
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::vector(&out), Op::AvgPool(input), rg))
    }

    /// Maximum over points: `[C × N] → [C]`; ties go to the lowest index.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (_, n) = as_matrix(x.shape()).ok_or_else(|| Error::dim("global_max_pool", x.shape(), &[]))?;
        if n == 0 {
            return Err(Error::EmptyInput("global_max_pool"));
        }
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        for row in x.data().chunks(n) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            argmax.push(best);
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::vector(&out), Op::MaxPool { input, argmax }, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let data: Vec<f64> = match kind {
            Activation::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, Op::Activation { input, kind }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    /// Element-wise add/mul. With `broadcast`, every axis must match or be 1
    /// on one side; otherwise the shapes must be identical.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise, broadcast_ok: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !broadcast_ok && sa != sb {
            return Err(Error::dim("elementwise", &sa, &sb));
        }
        let bc = broadcast(&sa, &sb).ok_or_else(|| Error::dim("elementwise", &sa, &sb))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bc.shape.iter().product()];
        match kind {
            Elementwise::Add => bc.for_each(|o, i, j| out[o] = va[i] + vb[j]),
            Elementwise::Mul => bc.for_each(|o, i, j| out[o] = va[i] * vb[j]),
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(bc.shape, out)?, Op::Elementwise { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add, true)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul, true)
    }

    /// Residual gating `F · (1 + A)`; `attention` may broadcast against `features`.
    pub fn gate(&mut self, features: Var, attention: Var) -> Result<Var> {
        let sf = self.shape(features).to_vec();
        let sa = self.shape(attention).to_vec();
        let bc = broadcast(&sf, &sa)
            .filter(|bc| bc.shape == sf)
            .ok_or_else(|| Error::dim("gate", &sf, &sa))?;
        let (vf, va) = (self.value(features).data(), self.value(attention).data());
        let mut out = vec![0.0; vf.len()];
        bc.for_each(|o, i, j| out[o] = vf[i] * (1.0 + va[j]));
        let rg = self.needs(&[features, attention]);
        Ok(self.push(
            Tensor::new(sf, out)?,
            Op::Gate {
                features,
                attention,
            },
            rg,
        ))
    }

    /// Stacks `[Ra × N]` on top of `[Rb × N]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ra, na) = as_matrix(&sa).ok_or_else(|| Error::dim("concat_rows", &sa, &sb))?;
        let (rb, nb) = as_matrix(&sb).ok_or_else(|| Error::dim("concat_rows", &sa, &sb))?;
        if na != nb {
            return Err(Error::dim("concat_rows", &sa, &sb));
        }
        let mut out = Vec::with_capacity((ra + rb) * na);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![ra + rb, na], out)?, Op::ConcatRows(a, b), rg))
    }

    /// Repeats a `[C]` (or `[C × 1]`) column across `n` points.
    pub fn broadcast_cols(&mut self, v: Var, n: usize) -> Result<Var> {
        let sv = self.shape(v).to_vec();
        let c = match as_matrix(&sv) {
            Some((c, 1)) => c,
            _ => return Err(Error::dim("broadcast_cols", &sv, &[n])),
        };
        let src = self.value(v).data();
        let mut out = Vec::with_capacity(c * n);
        for &x in src {
            out.extend(std::iter::repeat_n(x, n));
        }
        let rg = self.needs(&[v]);
        Ok(self.push(Tensor::new(vec![c, n], out)?, Op::BroadcastCols(v), rg))
    }

    pub fn reshape(&mut self, v: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(v).clone().reshaped(shape)?;
        let rg = self.needs(&[v]);
        Ok(self.push(value, Op::Reshape(v), rg))
    }

    /// Scales every column of a matrix to unit Euclidean norm.
    pub fn normalize_cols(&mut self, v: Var) -> Result<Var> {
        let x = self.value(v);
        let (r, n) = as_matrix(x.shape()).ok_or_else(|| Error::dim("normalize_cols", x.shape(), &[]))?;
        let mut norms = vec![0.0; n];
        for i in 0..r {
            for (j, norm) in norms.iter_mut().enumerate() {
                let e = x.data()[i * n + j];
                *norm += e * e;
            }
        }
        for norm in &mut norms {
            *norm = norm.sqrt();
            if *norm < 1e-12 {
                return Err(Error::DegenerateRotation(*norm));
            }
        }
        let mut out = x.data().to_vec();
        for i in 0..r {
            for j in 0..n {
                out[i * n + j] /= norms[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.needs(&[v]);
        Ok(self.push(value, Op::NormalizeCols { input: v, norms }, rg))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, v: Var, floor: f64) -> Var {
        let x = self.value(v);
        let data = x.data().iter().map(|&e| e.max(floor).ln()).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[v]);
        self.push(value, Op::Log { input: v, floor }, rg)
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let s = self.value(v).data().iter().sum();
        let rg = self.needs(&[v]);
        self.push(Tensor::scalar(s), Op::Sum(v), rg)
    }

    pub fn mean(&mut self, v: Var) -> Result<Var> {
        let x = self.value(v);
        if x.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.needs(&[v]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(v), rg))
    }

    pub fn scale(&mut self, v: Var, factor: f64) -> Var {
        let x = self.value(v);
        let data = x.data().iter().map(|&e| e * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[v]);
        self.push(value, Op::Scale { input: v, factor }, rg)
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let rg = self.needs(&inputs);
        self.push(output, Op::Custom { inputs, rule }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        debug_assert_eq!(delta.shape(), self.shape(var));
        match &mut grads[var.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn like(&self, var: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(var).to_vec(), data).expect("gradient shape")
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weights,
                bias,
            } => {
                let (cout, n) = (g.rows(), g.cols());
                let x = self.value(*input);
                let w = self.value(*weights);
                let cin = w.cols();
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; cin * n];
                    gemm(cin, cout, n, w.data(), true, gd, false, &mut dx, false);
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                if self.nodes[weights.0].requires_grad {
                    let mut dw = vec![0.0; cout * cin];
                    gemm(cout, n, cin, gd, false, x.data(), true, &mut dw, false);
                    self.accumulate(grads, *weights, self.like(*weights, dw));
                }
                if self.nodes[bias.0].requires_grad {
                    let db = gd.chunks(n).map(|row| row.iter().sum()).collect();
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
            }
            Op::AvgPool(input) => {
                let x = self.value(*input);
                let n = x.cols();
                let mut dx = Vec::with_capacity(x.len());
                for &gc in gd {
                    dx.extend(std::iter::repeat_n(gc / n as f64, n));
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::MaxPool { input, argmax } => {
                let x = self.value(*input);
                let n = x.cols();
                let mut dx = vec![0.0; x.len()];
                for (c, (&gc, &j)) in gd.iter().zip(argmax).enumerate() {
                    dx[c * n + j] = gc;
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Activation { input, kind } => {
                let dx = match kind {
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&y, &gy)| gy * y * (1.0 - y))
                        .collect(),
                    Activation::Relu => self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                        .collect(),
                };
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Elementwise { a, b, kind } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let bc = broadcast(va.shape(), vb.shape()).expect("checked in forward");
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                match kind {
                    Elementwise::Add => bc.for_each(|o, i, j| {
                        da[i] += gd[o];
                        db[j] += gd[o];
                    }),
                    Elementwise::Mul => {
                        let (xa, xb) = (va.data(), vb.data());
                        bc.for_each(|o, i, j| {
                            da[i] += gd[o] * xb[j];
                            db[j] += gd[o] * xa[i];
                        })
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::Gate {
                features,
                attention,
            } => {
                let vf = self.value(*features);
                let va = self.value(*attention);
                let bc = broadcast(vf.shape(), va.shape()).expect("checked in forward");
                let mut df = vec![0.0; vf.len()];
                let mut da = vec![0.0; va.len()];
                let (xf, xa) = (vf.data(), va.data());
                bc.for_each(|o, i, j| {
                    df[i] += gd[o] * (1.0 + xa[j]);
                    da[j] += gd[o] * xf[i];
                });
                self.accumulate(grads, *features, self.like(*features, df));
                self.accumulate(grads, *attention, self.like(*attention, da));
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, gd[..split].to_vec()));
                self.accumulate(grads, *b, self.like(*b, gd[split..].to_vec()));
            }
            Op::BroadcastCols(v) => {
                let n = g.cols();
                let dv = gd.chunks(n).map(|row| row.iter().sum()).collect();
                self.accumulate(grads, *v, self.like(*v, dv));
            }
            Op::Reshape(v) => {
                self.accumulate(grads, *v, self.like(*v, gd.to_vec()));
            }
            Op::NormalizeCols { input, norms } => {
                let y = node.value.data();
                let (r, n) = (g.rows(), g.cols());
                let mut dots = vec![0.0; n];
                for i in 0..r {
                    for (j, dot) in dots.iter_mut().enumerate() {
                        *dot += y[i * n + j] * gd[i * n + j];
                    }
                }
                let mut dx = vec![0.0; r * n];
                for i in 0..r {
                    for j in 0..n {
                        let k = i * n + j;
                        dx[k] = (gd[k] - y[k] * dots[j]) / norms[j];
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Log { input, floor } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gy)| if x >= *floor { gy / x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Sum(v) => {
                let n = self.value(*v).len();
                self.accumulate(grads, *v, self.like(*v, vec![gd[0]; n]));
            }
            Op::Mean(v) => {
                let n = self.value(*v).len();
                self.accumulate(grads, *v, self.like(*v, vec![gd[0] / n as f64; n]));
            }
            Op::Scale { input, factor } => {
                let dx = gd.iter().map(|&e| e * factor).collect();
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let dins = rule.backward(g, &values, &node.value);
                debug_assert_eq!(dins.len(), inputs.len(), "{}", rule.name());
                for (v, d) in inputs.iter().zip(dins) {
                    self.accumulate(grads, *v, d);
                }
            }
        }
    }
}

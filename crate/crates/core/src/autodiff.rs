//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation in creation order. Because inputs
//! must already exist when an operation is recorded, creation order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to the bias row of [`Graph::affine`]; every other
//! shape disagreement is reported as [`Error::Dimension`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::network::{BoundParams, ModelParams, ParamGroupMask};

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::param(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// Stacks equal-width rows into an `n x d` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![i, d],
                    right: vec![i, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, d], data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![delta.len()],
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn plain(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    LogSoftmax { x: Var, temperature: f64 },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SelectRows { x: Var, rows: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward/backward computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
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

    /// Records a leaf. It receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(
            Tensor::plain(tensor.shape.clone(), tensor.data.clone()),
            Op::Leaf,
            requires_grad,
        )
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Tensor::plain(tensor.shape, tensor.data), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a leaf by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `x · w + b` for `x: n×d`, `w: d×m`, `b: m`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Dimension {
                op: "affine",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        if bs.len() != 1 || bs[0] != ws[1] {
            return Err(Error::Dimension {
                op: "affine bias",
                left: ws.to_vec(),
                right: bs.to_vec(),
            });
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            out.extend_from_slice(bv);
            let row = &mut out[i * m..(i + 1) * m];
            for k in 0..d {
                let xik = xv[i * d + k];
                if xik == 0.0 {
                    continue;
                }
                let wrow = &wv[k * m..(k + 1) * m];
                row.iter_mut()
                    .zip(wrow)
                    .for_each(|(o, &wkj)| *o += xik * wkj);
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::plain(vec![n, m], out), Op::Affine { x, w, b }, rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| if a > 0.0 { a } else { 0.0 })
            .collect();
        let shape = v.shape().to_vec();
        let rg = self.needs(x);
        self.push(Tensor::plain(shape, data), Op::Relu(x), rg)
    }

    /// Row-wise `log softmax(x / temperature)`, max-shifted for stability.
    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let v = self.value(x);
        if v.shape().len() != 2 || v.cols() < 2 {
            return Err(Error::Dimension {
                op: "log_softmax_rows",
                left: v.shape().to_vec(),
                right: vec![2],
            });
        }
        let k = v.cols();
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(k) {
            out.extend(log_softmax(row, temperature));
        }
        let shape = v.shape().to_vec();
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::plain(shape, out),
            Op::LogSoftmax { x, temperature },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::plain(shape, data), Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::plain(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * factor).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs(a);
        self.push(Tensor::plain(shape, data), Op::Scale(a, factor), rg)
    }

    /// Sum of every element, as a single-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::plain(vec![1], vec![s]), Op::Sum(a), rg)
    }

    /// Gathers the listed rows of a matrix, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || rows.is_empty() {
            return Err(Error::Dimension {
                op: "select_rows",
                left: v.shape().to_vec(),
                right: vec![rows.len()],
            });
        }
        let (n, c) = (v.rows(), v.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Dimension {
                op: "select_rows",
                left: v.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(v.row(r));
        }
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::plain(vec![rows.len(), c], data),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Accumulates `d out / d leaf` into every gradient-carrying leaf.
    ///
    /// Repeated calls add to the stored leaf gradients.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a single-element tensor, got shape {:?}",
                self.value(out).shape()
            )));
        }
        if !self.needs(out) {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        pending[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(g),
                },
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (n, d, m) = (xv.rows(), xv.cols(), wv.cols());
                    if self.needs(*x) {
                        let mut gx = vec![0.0; n * d];
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for k in 0..d {
                                let wrow = &wv.data()[k * m..(k + 1) * m];
                                gx[r * d + k] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                            }
                        }
                        accumulate(&mut pending, *x, gx);
                    }
                    if self.needs(*w) {
                        let mut gw = vec![0.0; d * m];
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for k in 0..d {
                                let xrk = xv.data()[r * d + k];
                                if xrk == 0.0 {
                                    continue;
                                }
                                gw[k * m..(k + 1) * m]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(o, &gj)| *o += xrk * gj);
                            }
                        }
                        accumulate(&mut pending, *w, gw);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; m];
                        for grow in g.chunks(m) {
                            gb.iter_mut().zip(grow).for_each(|(o, &gj)| *o += gj);
                        }
                        accumulate(&mut pending, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    if self.needs(*x) {
                        let xv = self.nodes[x.0].value.data();
                        let gx = zip_map(&g, xv, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                        accumulate(&mut pending, *x, gx);
                    }
                }
                Op::LogSoftmax { x, temperature } => {
                    if self.needs(*x) {
                        let y = &node.value;
                        let k = y.cols();
                        let mut gx = Vec::with_capacity(g.len());
                        for (grow, yrow) in g.chunks(k).zip(y.data().chunks(k)) {
                            let total: f64 = grow.iter().sum();
                            gx.extend(
                                grow.iter()
                                    .zip(yrow)
                                    .map(|(&gj, &yj)| (gj - yj.exp() * total) / temperature),
                            );
                        }
                        accumulate(&mut pending, *x, gx);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut pending, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut pending, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    if self.needs(*a) {
                        accumulate(&mut pending, *a, zip_map(&g, bv, |x, y| x * y));
                    }
                    if self.needs(*b) {
                        accumulate(&mut pending, *b, zip_map(&g, av, |x, y| x * y));
                    }
                }
                Op::Scale(a, factor) => {
                    if self.needs(*a) {
                        accumulate(&mut pending, *a, g.iter().map(|x| x * factor).collect());
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let n = self.nodes[a.0].value.len();
                        accumulate(&mut pending, *a, vec![g[0]; n]);
                    }
                }
                Op::SelectRows { x, rows } => {
                    if self.needs(*x) {
                        let xv = &self.nodes[x.0].value;
                        let c = xv.cols();
                        let mut gx = vec![0.0; xv.len()];
                        for (grow, &r) in g.chunks(c).zip(rows) {
                            gx[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, &gj)| *o += gj);
                        }
                        accumulate(&mut pending, *x, gx);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(pending: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut pending[v.0] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `log softmax(row / temperature)` for one row.
pub fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / temperature;
    let shifted: Vec<f64> = row.iter().map(|&v| v / temperature - max).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|v| v - lse).collect()
}

/// `softmax(row / temperature)` for one row.
pub fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(row, temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Largest relative disagreement between the analytic gradient of `loss_fn`
/// and central finite differences with step `epsilon`, over every entry of
/// `params`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &ModelParams, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var> + Sync + Send,
{
    finite_diff_check_with(Exec::default(), loss_fn, params, epsilon)
}

pub fn finite_diff_check_with<F>(
    exec: Exec,
    loss_fn: F,
    params: &ModelParams,
    epsilon: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var> + Sync + Send,
{
    if !(epsilon > 0.0) {
        return Err(Error::param(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, ParamGroupMask::ALL);
    let loss = loss_fn(&mut g, &bound)?;
    g.backward(loss)?;

    let vars = bound.vars();
    let mut entries = Vec::new();
    let mut analytic = Vec::new();
    for (t, &v) in vars.iter().enumerate() {
        let n = g.value(v).len();
        let grad = g.grad(v);
        for e in 0..n {
            entries.push((t, e));
            analytic.push(grad.map_or(0.0, |gr| gr[e]));
        }
    }

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, ParamGroupMask::NONE);
        let loss = loss_fn(&mut g, &bound)?;
        g.value(loss)
            .item()
            .ok_or_else(|| Error::contract("loss function must return a scalar"))
    };

    let errors = exec.map_range(entries.len(), |i| -> Result<f64> {
        let (t, e) = entries[i];
        let mut p = params.clone();
        let orig = p.tensor_mut(t).data()[e];
        p.tensor_mut(t).data_mut()[e] = orig + epsilon;
        let plus = eval(&p)?;
        p.tensor_mut(t).data_mut()[e] = orig - epsilon;
        let minus = eval(&p)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8))
    });
    errors
        .into_iter()
        .try_fold(0.0_f64, |m, e| e.map(|e| m.max(e)))
}

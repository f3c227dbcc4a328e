//! Reverse-mode gradient tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! the recipe needed to push gradients back to its inputs. `backward` replays
//! the nodes in reverse order exactly once.

use std::collections::HashMap;

use super::gemm::gemm;
use super::param::Param;
use super::tensor::{validate_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddColumn { x: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { x: Var, index: Vec<Option<u32>> },
    LayerNormCols { x: Var, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed operations.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, Var>,
    track_grad: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            track_grad: true,
            consumed: false,
        }
    }

    /// A tape that never records gradients; parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            track_grad: false,
            ..Self::new()
        }
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
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

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a registered parameter, by name.
    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let requires_grad = requires_grad && self.track_grad;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a named parameter; repeated calls with the same name return
    /// the same handle, as does a prior [`Tape::bind_param`].
    pub fn param(&mut self, p: &Param) -> Result<Var> {
        if let Some(&v) = self.params.get(p.name()) {
            return Ok(v);
        }
        let rg = p.tensor().requires_grad();
        let v = self.push(p.tensor().clone(), Op::Leaf, rg)?;
        self.params.insert(p.name().to_string(), v);
        Ok(v)
    }

    /// Makes later `param` lookups of `name` resolve to `v`.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    fn finish(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("{op} expects a 2-D tensor"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes its argument.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), ta, self.data(b), tb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.finish("matmul", vec![m, n], out, Op::Matmul { a, b, ta, tb }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims2("transpose", x)?;
        let t = self.value(x).transposed();
        let rg = self.rg(x);
        self.push(t, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), Op::Reshape(x), rg)
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::InvalidShape {
                shape: vec![r, c],
                reason: format!("row slice {start}..{} out of range", start + len),
            });
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows { x, start }, rg)
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            data.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// `out[i] = x[index[i]]`, or 0 where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<u32>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let src = self.data(x);
        if let Some(bad) = index.iter().flatten().find(|&&i| i as usize >= src.len()) {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("gather index {bad} out of range"),
            });
        }
        let data = index.iter().map(|i| i.map_or(0.0, |j| src[j as usize])).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), Op::Gather { x, index }, rg)
    }

    /// Selects columns of a 2-D tensor in the given order.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("select_cols", x)?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidShape {
                shape: vec![r, c],
                reason: format!("column {bad} out of range"),
            });
        }
        let mut index = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            index.extend(cols.iter().map(|&j| Some((i * c + j) as u32)));
        }
        self.gather(x, index, vec![r, cols.len()])
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data(x).iter().map(|&v| f(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.finish("add", self.shape(a).to_vec(), d, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.finish("sub", self.shape(a).to_vec(), d, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.finish("mul", self.shape(a).to_vec(), d, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        self.finish("div", self.shape(a).to_vec(), d, Op::Div(a, b), rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("minimum", a, b, f64::min)?;
        let rg = self.rg(a) || self.rg(b);
        self.finish("minimum", self.shape(a).to_vec(), d, Op::Minimum(a, b), rg)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("maximum", a, b, f64::max)?;
        let rg = self.rg(a) || self.rg(b);
        self.finish("maximum", self.shape(a).to_vec(), d, Op::Maximum(a, b), rg)
    }

    /// Adds a per-row bias (`rows` or `rows×1`) to every column of `x`.
    pub fn add_column(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_column", x)?;
        if self.value(bias).len() != r {
            return Err(Error::shape("add_column", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut d = self.data(x).to_vec();
        for i in 0..r {
            for v in &mut d[i * c..(i + 1) * c] {
                *v += b[i];
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.finish("add_column", vec![r, c], d, Op::AddColumn { x, bias }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let d = self.unary(x, |v| v * s);
        let rg = self.rg(x);
        self.finish("scale", self.shape(x).to_vec(), d, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let d = self.unary(x, |v| v + s);
        let rg = self.rg(x);
        self.finish("add_scalar", self.shape(x).to_vec(), d, Op::AddScalar(x), rg)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let d = self.unary(x, |v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.finish("relu", self.shape(x).to_vec(), d, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let d = self.unary(x, sigmoid);
        let rg = self.rg(x);
        self.finish("sigmoid", self.shape(x).to_vec(), d, Op::Sigmoid(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let d = self.unary(x, f64::ln);
        let rg = self.rg(x);
        self.finish("log", self.shape(x).to_vec(), d, Op::Log(x), rg)
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let d = self.unary(x, f64::abs);
        let rg = self.rg(x);
        self.finish("abs", self.shape(x).to_vec(), d, Op::Abs(x), rg)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let d = self.unary(x, |v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.finish("clamp", self.shape(x).to_vec(), d, Op::Clamp { x, lo, hi }, rg)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        self.finish("softmax", shape, out, Op::Softmax { x, axis }, rg)
    }

    /// Normalises every column of a 2-D tensor to zero mean and unit variance.
    pub fn layer_norm_cols(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2("layer_norm_cols", x)?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; c];
        for j in 0..c {
            let mean = (0..r).map(|i| src[i * c + j]).sum::<f64>() / r as f64;
            let var = (0..r).map(|i| (src[i * c + j] - mean).powi(2)).sum::<f64>() / r as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[j] = is;
            for i in 0..r {
                out[i * c + j] = (src[i * c + j] - mean) * is;
            }
        }
        let rg = self.rg(x);
        self.finish("layer_norm_cols", vec![r, c], out, Op::LayerNormCols { x, inv_std }, rg)
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.finish("sum", vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.finish("mean", vec![1], vec![s], Op::Mean(x), rg)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Propagates gradients from the scalar `loss` to every reachable node
    /// that requires them. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let sa = self.shape(*a);
                let k = if *ta { sa[0] } else { sa[1] };
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    if *ta {
                        // stored a is k×m: da = op(b) · gᵀ
                        gemm(k, n, m, self.data(*b), *tb, g, true, 0.0, &mut da);
                    } else {
                        gemm(m, n, k, g, false, self.data(*b), !*tb, 0.0, &mut da);
                    }
                    accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        // stored b is n×k: db = gᵀ · op(a)
                        gemm(n, m, k, g, true, self.data(*a), *ta, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, self.data(*a), !*ta, g, false, 0.0, &mut db);
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, g.to_vec());
                self.acc_if(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, g.to_vec());
                self.acc_if(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc_if(grads, *a, zip_map(g, db, |gi, y| gi * y));
                self.acc_if(grads, *b, zip_map(g, da, |gi, x| gi * x));
            }
            Op::Div(a, b) => {
                let db = self.data(*b);
                self.acc_if(grads, *a, zip_map(g, db, |gi, y| gi / y));
                if self.rg(*b) {
                    let d: Vec<f64> = (0..g.len()).map(|i| -g[i] * out[i] / db[i]).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let take_a: Vec<bool> = match node.op {
                    Op::Minimum(..) => xa.iter().zip(xb).map(|(x, y)| x <= y).collect(),
                    _ => xa.iter().zip(xb).map(|(x, y)| x >= y).collect(),
                };
                self.acc_if(grads, *a, (0..g.len()).map(|i| if take_a[i] { g[i] } else { 0.0 }).collect());
                self.acc_if(grads, *b, (0..g.len()).map(|i| if take_a[i] { 0.0 } else { g[i] }).collect());
            }
            Op::AddColumn { x, bias } => {
                self.acc_if(grads, *x, g.to_vec());
                if self.rg(*bias) {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let db: Vec<f64> = (0..r).map(|i| g[i * c..(i + 1) * c].iter().sum()).collect();
                    accumulate(grads, *bias, &db);
                }
            }
            Op::Scale(x, s) => self.acc_if(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc_if(grads, *x, g.to_vec()),
            Op::Relu(x) => {
                self.acc_if(grads, *x, zip_map(g, out, |gi, y| if y > 0.0 { gi } else { 0.0 }));
            }
            Op::Sigmoid(x) => self.acc_if(grads, *x, zip_map(g, out, |gi, y| gi * y * (1.0 - y))),
            Op::Log(x) => {
                let xs = self.data(*x);
                self.acc_if(grads, *x, zip_map(g, xs, |gi, v| gi / v));
            }
            Op::Abs(x) => {
                let xs = self.data(*x);
                self.acc_if(grads, *x, zip_map(g, xs, |gi, v| if v == 0.0 { 0.0 } else { gi * v.signum() }));
            }
            Op::Clamp { x, lo, hi } => {
                let xs = self.data(*x);
                self.acc_if(grads, *x, zip_map(g, xs, |gi, v| if v >= *lo && v <= *hi { gi } else { 0.0 }));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis).expect("validated in forward");
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::LayerNormCols { x, inv_std } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    let mean_g = (0..r).map(|i| g[i * c + j]).sum::<f64>() / r as f64;
                    let mean_gy = (0..r).map(|i| g[i * c + j] * out[i * c + j]).sum::<f64>() / r as f64;
                    for i in 0..r {
                        dx[i * c + j] = inv_std[j] * (g[i * c + j] - mean_g - out[i * c + j] * mean_gy);
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, &vec![g[0] / n as f64; n]);
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let gt = Tensor::from_parts(vec![r, c], g.to_vec()).transposed();
                accumulate(grads, *x, gt.data());
            }
            Op::SliceRows { x, start } => {
                let c = node.value.shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *x, &dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc_if(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gi, i) in g.iter().zip(index) {
                    if let Some(j) = i {
                        dx[*j as usize] += gi;
                    }
                }
                accumulate(grads, *x, &dx);
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if self.rg(v) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot => *slot = Some(g),
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot => *slot = Some(g.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

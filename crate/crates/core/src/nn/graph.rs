//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the reverse pass is a single backwards sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::kernels::{gemm, normalize_rows, softmax_row, transpose};
use crate::nn::{Grads, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One weighted input row of a [`Graph::row_mix`] output row.
#[derive(Clone, Copy, Debug)]
pub struct RowSource<T> {
    pub var: Var,
    pub row: usize,
    pub weight: T,
}

impl<T> RowSource<T> {
    pub fn new(var: Var, row: usize, weight: T) -> Self {
        Self { var, row, weight }
    }
}

enum Op<T> {
    Constant,
    Param(String),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    RowMix(Vec<Vec<RowSource<T>>>),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    NormalizeCols { a: Var, eps: T },
    Broadcast { slots: Var, pos: Var },
    SlotMix { masks: Var, feats: Var },
    SqErrSum(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mat_dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Constant, false, "constant")
    }

    /// Copies the value of `v` into a new node that blocks gradients.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Binds a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = store
            .entry(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = self.push(
            entry.tensor.clone(),
            Op::Param(name.to_string()),
            entry.trainable,
            name,
        )?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = crate::nn::kernels::matmul(self.value(a), self.value(b), ta, tb)?;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).len() != cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(row).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_exact_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng, "scale")
    }

    /// Multiplies every entry of `a` by the one-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", format!("{:?} is not a scalar", self.value(s).shape())));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(a).map(|v| v * sv);
        let ng = self.ng(&[a, s]);
        self.push(out, Op::MulScalar(a, s), ng, "mul_scalar")
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| T::one() - v);
        let ng = self.ng(&[a]);
        self.push(out, Op::OneMinus(a), ng, "one_minus")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        let ng = self.ng(&[a]);
        self.push(out, Op::Tanh(a), ng, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    /// Softmax over the last axis of every row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.clone();
        let mut scratch = Vec::with_capacity(cols);
        for (src, dst) in x
            .data()
            .chunks_exact(cols)
            .zip(out.data_mut().chunks_exact_mut(cols))
        {
            softmax_row(src, dst, &mut scratch);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    xv.shape(),
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); xv.rows()];
        normalize_rows(xv.data(), cols, eps, &mut xhat, &mut inv_std);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks_exact(cols) {
            out.extend(row.iter().zip(g).zip(b).map(|((&h, &g), &b)| g * h + b));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
            "layer_norm",
        )
    }

    /// Builds a matrix whose row `i` is `Σ weight · var[row]` over `rows[i]`.
    /// An empty source list yields a zero row. Covers gather, scatter,
    /// concatenation and averaging of rows.
    pub fn row_mix(&mut self, cols: usize, rows: Vec<Vec<RowSource<T>>>) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("row_mix needs at least one output row"));
        }
        let mut out = vec![T::zero(); rows.len() * cols];
        let mut deps = Vec::new();
        for (i, srcs) in rows.iter().enumerate() {
            let dst = &mut out[i * cols..(i + 1) * cols];
            for s in srcs {
                let src = self.value(s.var);
                if src.cols() != cols || s.row >= src.rows() {
                    return Err(Error::shape(
                        "row_mix",
                        format!("row {} of {:?} into width {cols}", s.row, src.shape()),
                    ));
                }
                for (d, &v) in dst.iter_mut().zip(src.row(s.row)) {
                    *d += s.weight * v;
                }
                deps.push(s.var);
            }
        }
        let out = Tensor::new(vec![rows.len(), cols], out)?;
        let ng = self.ng(&deps);
        self.push(out, Op::RowMix(rows), ng, "row_mix")
    }

    /// Selects the given rows of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let cols = self.value(a).cols();
        let rows = idx
            .iter()
            .map(|&r| vec![RowSource::new(a, r, T::one())])
            .collect();
        self.row_mix(cols, rows)
    }

    /// Places row `i` of `a` at row `idx[i]` of an `n_rows` zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        let mut rows = vec![Vec::new(); n_rows];
        for (i, &r) in idx.iter().enumerate() {
            rows[r].push(RowSource::new(a, i, T::one()));
        }
        self.row_mix(cols, rows)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        if start + width > cols || width == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of width {cols}", start + width),
            ));
        }
        let mut out = Vec::with_capacity(x.rows() * width);
        for row in x.data().chunks_exact(cols) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let out = Tensor::new(vec![x.rows(), width], out)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceCols { a, start }, ng, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng, "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = mat_dims(self.value(a));
        let out = Tensor::new(vec![c, r], transpose(self.value(a).data(), r, c))?;
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng, "transpose")
    }

    /// Divides every column by its sum plus `eps`.
    pub fn normalize_cols(&mut self, a: Var, eps: T) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = mat_dims(x);
        let sums = col_sums(x.data(), r, c);
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, &s) in row.iter_mut().zip(&sums) {
                *v = *v / (s + eps);
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::NormalizeCols { a, eps }, ng, "normalize_cols")
    }

    /// Spatial broadcast: row `k·N + n` is `slots[k] + pos[n]`.
    pub fn broadcast(&mut self, slots: Var, pos: Var) -> Result<Var> {
        let (k, d) = mat_dims(self.value(slots));
        let (n, d2) = mat_dims(self.value(pos));
        if d != d2 {
            return Err(Error::shape("broadcast", format!("slot width {d} vs position width {d2}")));
        }
        let mut out = Vec::with_capacity(k * n * d);
        for s in self.value(slots).data().chunks_exact(d) {
            for p in self.value(pos).data().chunks_exact(d) {
                out.extend(s.iter().zip(p).map(|(&a, &b)| a + b));
            }
        }
        let out = Tensor::new(vec![k * n, d], out)?;
        let ng = self.ng(&[slots, pos]);
        self.push(out, Op::Broadcast { slots, pos }, ng, "broadcast")
    }

    /// Mask-weighted sum over slots: `out[n] = Σ_k masks[n,k] · feats[k·N+n]`.
    pub fn slot_mix(&mut self, masks: Var, feats: Var) -> Result<Var> {
        let (n, k) = mat_dims(self.value(masks));
        let (kn, d) = mat_dims(self.value(feats));
        if kn != k * n {
            return Err(Error::shape("slot_mix", format!("masks {n}x{k}, features {kn}x{d}")));
        }
        let m = self.value(masks).data();
        let f = self.value(feats).data();
        let mut out = vec![T::zero(); n * d];
        for (ni, orow) in out.chunks_exact_mut(d).enumerate() {
            for ki in 0..k {
                let w = m[ni * k + ki];
                let frow = &f[(ki * n + ni) * d..(ki * n + ni + 1) * d];
                for (o, &v) in orow.iter_mut().zip(frow) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let ng = self.ng(&[masks, feats]);
        self.push(out, Op::SlotMix { masks, feats }, ng, "slot_mix")
    }

    /// `Σ (a - b)²` as a one-element tensor.
    pub fn sq_err_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sq_err_sum")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let ng = self.ng(&[a, b]);
        self.push(Tensor::scalar(s), Op::SqErrSum(a, b), ng, "sq_err_sum")
    }

    /// Reverse sweep from a one-element `loss`. Returns gradients of every
    /// bound trainable parameter reached by the sweep.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Grads::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(name) = &node.op {
                out.insert(name.clone(), g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn acc_slice(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: &[T]) {
        self.acc(grads, v, |dst| {
            for (x, &y) in dst.iter_mut().zip(d) {
                *x += y;
            }
        });
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match op {
            Op::Constant | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                let sa = mat_dims(av);
                let sb = mat_dims(bv);
                let sg = mat_dims(g);
                if self.needs_grad(a) {
                    let (da, _, _) = if ta {
                        gemm(bv.data(), sb, tb, gd, sg, true)
                    } else {
                        gemm(gd, sg, false, bv.data(), sb, !tb)
                    };
                    self.acc_slice(grads, a, &da);
                }
                if self.needs_grad(b) {
                    let (db, _, _) = if tb {
                        gemm(gd, sg, true, av.data(), sa, ta)
                    } else {
                        gemm(av.data(), sa, !ta, gd, sg, false)
                    };
                    self.acc_slice(grads, b, &db);
                }
            }
            &Op::Add(a, b) => {
                self.acc_slice(grads, a, gd);
                self.acc_slice(grads, b, gd);
            }
            &Op::Sub(a, b) => {
                self.acc_slice(grads, a, gd);
                self.acc(grads, b, |d| {
                    for (x, &y) in d.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.acc(grads, a, |d| {
                    for ((x, &g), &o) in d.iter_mut().zip(gd).zip(bv) {
                        *x += g * o;
                    }
                });
                self.acc(grads, b, |d| {
                    for ((x, &g), &o) in d.iter_mut().zip(gd).zip(av) {
                        *x += g * o;
                    }
                });
            }
            &Op::AddRow(a, row) => {
                self.acc_slice(grads, a, gd);
                let cols = g.cols();
                self.acc(grads, row, |d| {
                    for chunk in gd.chunks_exact(cols) {
                        for (x, &v) in d.iter_mut().zip(chunk) {
                            *x += v;
                        }
                    }
                });
            }
            &Op::Scale(a, s) => self.acc(grads, a, |d| {
                for (x, &v) in d.iter_mut().zip(gd) {
                    *x += v * s;
                }
            }),
            &Op::MulScalar(a, s) => {
                let sv = self.value(s).data()[0];
                self.acc(grads, a, |d| {
                    for (x, &v) in d.iter_mut().zip(gd) {
                        *x += v * sv;
                    }
                });
                let av = self.value(a).data();
                let dot = gd.iter().zip(av).fold(T::zero(), |acc, (&g, &x)| acc + g * x);
                self.acc(grads, s, |d| d[0] += dot);
            }
            &Op::OneMinus(a) => self.acc(grads, a, |d| {
                for (x, &v) in d.iter_mut().zip(gd) {
                    *x -= v;
                }
            }),
            &Op::Sigmoid(a) => self.acc(grads, a, |d| {
                for ((x, &v), &o) in d.iter_mut().zip(gd).zip(y.data()) {
                    *x += v * o * (T::one() - o);
                }
            }),
            &Op::Tanh(a) => self.acc(grads, a, |d| {
                for ((x, &v), &o) in d.iter_mut().zip(gd).zip(y.data()) {
                    *x += v * (T::one() - o * o);
                }
            }),
            &Op::Relu(a) => self.acc(grads, a, |d| {
                for ((x, &v), &o) in d.iter_mut().zip(gd).zip(y.data()) {
                    if o > T::zero() {
                        *x += v;
                    }
                }
            }),
            &Op::SoftmaxRows(a) => {
                let cols = y.cols();
                self.acc(grads, a, |d| {
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(cols)
                        .zip(gd.chunks_exact(cols))
                        .zip(y.data().chunks_exact(cols))
                    {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&g, &y)| s + g * y);
                        for ((x, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = y.cols();
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |d| {
                    for (gr, hr) in gd.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((x, &g), &h) in d.iter_mut().zip(gr).zip(hr) {
                            *x += g * h;
                        }
                    }
                });
                self.acc(grads, *bias, |d| {
                    for gr in gd.chunks_exact(cols) {
                        for (x, &g) in d.iter_mut().zip(gr) {
                            *x += g;
                        }
                    }
                });
                let n = T::of(cols as f64);
                self.acc(grads, *x, |d| {
                    let mut dh = vec![T::zero(); cols];
                    for (r, (dr, (gr, hr))) in d
                        .chunks_exact_mut(cols)
                        .zip(gd.chunks_exact(cols).zip(xhat.chunks_exact(cols)))
                        .enumerate()
                    {
                        for ((h, &g), &w) in dh.iter_mut().zip(gr).zip(gv) {
                            *h = g * w;
                        }
                        let sum_dh = dh.iter().fold(T::zero(), |s, &v| s + v);
                        let sum_dh_h = dh.iter().zip(hr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        let scale = inv_std[r] / n;
                        for ((x, &h), &xh) in dr.iter_mut().zip(&dh).zip(hr) {
                            *x += scale * (n * h - sum_dh - xh * sum_dh_h);
                        }
                    }
                });
            }
            Op::RowMix(rows) => {
                let cols = g.cols();
                for (i, srcs) in rows.iter().enumerate() {
                    let gr = &gd[i * cols..(i + 1) * cols];
                    for s in srcs {
                        self.acc(grads, s.var, |d| {
                            let dst = &mut d[s.row * cols..(s.row + 1) * cols];
                            for (x, &v) in dst.iter_mut().zip(gr) {
                                *x += s.weight * v;
                            }
                        });
                    }
                }
            }
            &Op::SliceCols { a, start } => {
                let width = g.cols();
                let cols = self.value(a).cols();
                self.acc(grads, a, |d| {
                    for (dr, gr) in d.chunks_exact_mut(cols).zip(gd.chunks_exact(width)) {
                        for (x, &v) in dr[start..start + width].iter_mut().zip(gr) {
                            *x += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |d| {
                        for (dr, gr) in d.chunks_exact_mut(w).zip(gd.chunks_exact(total)) {
                            for (x, &v) in dr.iter_mut().zip(&gr[offset..offset + w]) {
                                *x += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::Reshape(a) => self.acc_slice(grads, a, gd),
            &Op::Transpose(a) => {
                let (r, c) = mat_dims(g);
                let back = transpose(gd, r, c);
                self.acc_slice(grads, a, &back);
            }
            &Op::NormalizeCols { a, eps } => {
                let x = self.value(a);
                let (r, c) = mat_dims(x);
                let sums = col_sums(x.data(), r, c);
                let mut cross = vec![T::zero(); c];
                for (gr, xr) in gd.chunks_exact(c).zip(x.data().chunks_exact(c)) {
                    for ((s, &g), &v) in cross.iter_mut().zip(gr).zip(xr) {
                        *s += g * v;
                    }
                }
                self.acc(grads, a, |d| {
                    for (dr, gr) in d.chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
                        for (j, (x, &g)) in dr.iter_mut().zip(gr).enumerate() {
                            let den = sums[j] + eps;
                            *x += g / den - cross[j] / (den * den);
                        }
                    }
                });
            }
            &Op::Broadcast { slots, pos } => {
                let (k, d) = mat_dims(self.value(slots));
                let n = self.value(pos).rows();
                self.acc(grads, slots, |ds| {
                    for ki in 0..k {
                        let dst = &mut ds[ki * d..(ki + 1) * d];
                        for ni in 0..n {
                            let r = ki * n + ni;
                            for (x, &v) in dst.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                                *x += v;
                            }
                        }
                    }
                });
                self.acc(grads, pos, |dp| {
                    for ki in 0..k {
                        for ni in 0..n {
                            let r = ki * n + ni;
                            let dst = &mut dp[ni * d..(ni + 1) * d];
                            for (x, &v) in dst.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                                *x += v;
                            }
                        }
                    }
                });
            }
            &Op::SlotMix { masks, feats } => {
                let (n, k) = mat_dims(self.value(masks));
                let d = g.cols();
                let m = self.value(masks).data();
                let f = self.value(feats).data();
                self.acc(grads, masks, |dm| {
                    for ni in 0..n {
                        let gr = &gd[ni * d..(ni + 1) * d];
                        for ki in 0..k {
                            let fr = &f[(ki * n + ni) * d..(ki * n + ni + 1) * d];
                            dm[ni * k + ki] += gr.iter().zip(fr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        }
                    }
                });
                self.acc(grads, feats, |df| {
                    for ni in 0..n {
                        let gr = &gd[ni * d..(ni + 1) * d];
                        for ki in 0..k {
                            let w = m[ni * k + ki];
                            let dst = &mut df[(ki * n + ni) * d..(ki * n + ni + 1) * d];
                            for (x, &v) in dst.iter_mut().zip(gr) {
                                *x += w * v;
                            }
                        }
                    }
                });
            }
            &Op::SqErrSum(a, b) => {
                let g0 = gd[0];
                let two = T::of(2.0);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.acc(grads, a, |d| {
                    for ((x, &p), &q) in d.iter_mut().zip(av).zip(bv) {
                        *x += two * g0 * (p - q);
                    }
                });
                self.acc(grads, b, |d| {
                    for ((x, &p), &q) in d.iter_mut().zip(av).zip(bv) {
                        *x -= two * g0 * (p - q);
                    }
                });
            }
        }
    }
}

fn col_sums<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); cols];
    for row in x.chunks_exact(cols).take(rows) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

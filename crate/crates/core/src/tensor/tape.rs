use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::{gemm, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnOp {
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Softplus,
    Log,
    Exp,
    Sqrt,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(BinOp, Var, Var),
    Unary(UnOp, Var),
    Scale(Var, f64),
    Shift(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    RowGather(Var, Vec<usize>),
    IndexAdd(Var, Vec<usize>),
    SumRows(Var),
    MeanRows(Var),
    SumAll(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    ClampMin(Var, f64),
    Dropout(Var, Vec<f64>),
}

struct Node {
    // `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so gradients can be pulled back through it.
///
/// A tape borrows the parameter store read-only; gradients come back as a
/// [`Gradients`] value that the caller folds into the store. One tape per
/// forward pass, confined to one thread.
pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients for every node reached by a backward pass.
pub struct NodeGrads {
    nodes: Vec<Option<Tensor>>,
    params: Gradients,
}

impl NodeGrads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl UnOp {
    fn name(self) -> &'static str {
        match self {
            UnOp::Relu => "relu",
            UnOp::Elu => "elu",
            UnOp::Tanh => "tanh",
            UnOp::Sigmoid => "sigmoid",
            UnOp::Softplus => "softplus",
            UnOp::Log => "log",
            UnOp::Exp => "exp",
            UnOp::Sqrt => "sqrt",
            UnOp::Square => "square",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnOp::Relu => x.max(0.0),
            UnOp::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            UnOp::Tanh => x.tanh(),
            UnOp::Sigmoid => sigmoid(x),
            UnOp::Softplus => softplus(x),
            UnOp::Log => x.ln(),
            UnOp::Exp => x.exp(),
            UnOp::Sqrt => x.sqrt(),
            UnOp::Square => x * x,
        }
    }

    // derivative given input x and output y
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnOp::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            UnOp::Tanh => 1.0 - y * y,
            UnOp::Sigmoid => y * (1.0 - y),
            UnOp::Softplus => sigmoid(x),
            UnOp::Log => 1.0 / x,
            UnOp::Exp => y,
            UnOp::Sqrt => 0.5 / y,
            UnOp::Square => 2.0 * x,
        }
    }
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

/// Broadcast pattern of the right operand against an `r × c` left operand.
fn rhs_index(r: usize, c: usize, rhs: &Tensor) -> Option<impl Fn(usize, usize) -> usize> {
    let (br, bc) = rhs.dims2().ok()?;
    let row_ok = br == r || br == 1;
    let col_ok = bc == c || bc == 1;
    if !(row_ok && col_ok) {
        return None;
    }
    let rs = if br == 1 { 0 } else { bc };
    let cs = if bc == 1 { 0 } else { 1 };
    Some(move |i: usize, j: usize| i * rs + j * cs)
}

fn layer_norm_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(r, c);
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row_slice(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for (o, v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (out, inv_std)
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    /// A tape with no parameters; only constants and variables.
    pub fn detached() -> Tape<'static> {
        Tape {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .store
                .expect("parameter node without a store")
                .value(*id),
            _ => unreachable!("node without a value"),
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward_full`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let store = self.store.ok_or(TensorError::NoStore)?;
        if id.0 >= store.len() {
            return Err(TensorError::UnknownParam(format!("#{}", id.0)));
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            ta.data(),
            false,
            tb.data(),
            false,
            out.data_mut(),
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = ta.dims2()?;
        let idx = rhs_index(r, c, tb).ok_or_else(|| mismatch(op.name(), ta, tb))?;
        let mut out = Tensor::zeros(r, c);
        {
            let (da, db, o) = (ta.data(), tb.data(), out.data_mut());
            for i in 0..r {
                for j in 0..c {
                    o[i * c + j] = op.apply(da[i * c + j], db[idx(i, j)]);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(op.name(), out, Op::Binary(op, a, b), rg)
    }

    /// Elementwise sum; `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    fn unary(&mut self, op: UnOp, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| op.apply(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(op.name(), out, Op::Unary(op, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Relu, x)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Elu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Softplus, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Exp, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Square, x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * k).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("scale", out, Op::Scale(x, k), rg)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, k: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v + k).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("shift", out, Op::Shift(x), rg)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.shift(neg, 1.0)
    }

    /// Concatenates along columns; all parts share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
            });
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(mismatch("concat", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            for i in 0..rows {
                out.data_mut()[i * cols + offset..i * cols + offset + pc]
                    .copy_from_slice(t.row_slice(i));
            }
            offset += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Stacks parts vertically; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidShape {
                op: "concat_rows",
                shape: vec![],
            });
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if start + len > c {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: t.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push("slice_cols", out, Op::SliceCols(x, start), rg)
    }

    /// `out[i] = x[index[i]]`.
    pub fn row_gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut out = Tensor::zeros(index.len(), c);
        for (i, &src) in index.iter().enumerate() {
            if src >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "row_gather",
                    index: src,
                    len: r,
                });
            }
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(t.row_slice(src));
        }
        let rg = self.rg(x);
        self.push("row_gather", out, Op::RowGather(x, index.to_vec()), rg)
    }

    /// Scatter-add: `out[index[i]] += x[i]` into `rows` output rows.
    pub fn index_add(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if r != index.len() {
            return Err(TensorError::ShapeMismatch {
                op: "index_add",
                left: t.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        let mut out = Tensor::zeros(rows, c);
        for (i, &dst) in index.iter().enumerate() {
            if dst >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "index_add",
                    index: dst,
                    len: rows,
                });
            }
            let src = t.row_slice(i);
            for (o, v) in out.data_mut()[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push("index_add", out, Op::IndexAdd(x, index.to_vec()), rg)
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push("sum_rows", out, Op::SumRows(x), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if r == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean_rows",
                shape: t.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o /= r as f64;
        }
        let rg = self.rg(x);
        self.push("mean_rows", out, Op::MeanRows(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push("transpose", out, Op::Transpose(x), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out.data_mut()[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (oj, v) in o.iter_mut().zip(row) {
                *oj = (v - max).exp();
                sum += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= sum;
            }
        }
        let rg = self.rg(x);
        self.push("softmax", out, Op::Softmax(x), rg)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without an
    /// affine transform.
    pub fn layer_norm_core(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = t.dims2()?;
        if c == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: t.shape().to_vec(),
            });
        }
        let (out, _) = layer_norm_rows(t, eps);
        let rg = self.rg(x);
        self.push("layer_norm", out, Op::LayerNorm(x, eps), rg)
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(min)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("clamp_min", out, Op::ClampMin(x, min), rg)
    }

    /// Inverted dropout with a caller-provided keep mask (`true` = keep).
    /// The mask is a constant for backward.
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        let t = self.value(x);
        if keep.len() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                left: t.shape().to_vec(),
                right: vec![keep.len()],
            });
        }
        let s = if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 };
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push("dropout", out, Op::Dropout(x, mask), rg)
    }

    /// Gradients of a scalar loss with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
        }
        Ok(self
            .backward_full(loss, Tensor::new(t.shape().to_vec(), vec![1.0])?)?
            .into_params())
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_full(&self, out: Var, seed: Tensor) -> Result<NodeGrads> {
        if seed.shape() != self.value(out).shape() {
            return Err(mismatch("backward", self.value(out), &seed));
        }
        let n_params = self.store.map_or(0, ParamStore::len);
        let mut params = Gradients::with_len(n_params);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        let mut kept: Vec<Option<Tensor>> = Vec::new();
        kept.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.pull_back(node, &g, &mut grads, &mut params)?;
            if matches!(node.op, Op::Leaf) {
                kept[i] = Some(g);
            }
        }
        Ok(NodeGrads {
            nodes: kept,
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn pull_back(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Gradients,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let n = tb.cols();
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        tb.data(),
                        true,
                        ga.data_mut(),
                        0.0,
                    );
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        true,
                        g.data(),
                        false,
                        gb.data_mut(),
                        0.0,
                    );
                    self.acc(grads, *b, gb);
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, c) = ta.dims2()?;
                let idx = rhs_index(r, c, tb).expect("checked in forward");
                let (da, db, dg) = (ta.data(), tb.data(), g.data());
                let mut ga = Tensor::zeros(r, c);
                let mut gb = Tensor::new(tb.shape().to_vec(), vec![0.0; tb.len()])?;
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        let bk = idx(i, j);
                        let (x, y, gk) = (da[k], db[bk], dg[k]);
                        let (dxa, dxb) = match op {
                            BinOp::Add => (gk, gk),
                            BinOp::Sub => (gk, -gk),
                            BinOp::Mul => (gk * y, gk * x),
                            BinOp::Div => (gk / y, -gk * x / (y * y)),
                        };
                        ga.data_mut()[k] = dxa;
                        gb.data_mut()[bk] += dxb;
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Unary(op, x) => {
                let tx = self.value(*x);
                let y = node.value.as_ref().expect("unary output");
                let data = tx
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| gv * op.derivative(xv, yv))
                    .collect();
                self.acc(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::Scale(x, k) => {
                let data = g.data().iter().map(|v| v * k).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Shift(x) => self.acc(grads, *x, g.clone()),
            Op::ConcatCols(parts) => {
                let (rows, cols) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(rows, pc);
                        for i in 0..rows {
                            gp.data_mut()[i * pc..(i + 1) * pc].copy_from_slice(
                                &g.data()[i * cols + offset..i * cols + offset + pc],
                            );
                        }
                        self.acc(grads, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut row = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.rg(p) {
                        let gp = Tensor::matrix(
                            pr,
                            cols,
                            g.data()[row * cols..(row + pr) * cols].to_vec(),
                        )?;
                        self.acc(grads, p, gp);
                    }
                    row += pr;
                }
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (r, c) = tx.dims2()?;
                let len = g.cols();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    gx.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(g.row_slice(i));
                }
                self.acc(grads, *x, gx);
            }
            Op::RowGather(x, index) => {
                let tx = self.value(*x);
                let (r, c) = tx.dims2()?;
                let mut gx = Tensor::zeros(r, c);
                for (i, &src) in index.iter().enumerate() {
                    for (o, v) in gx.data_mut()[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(g.row_slice(i))
                    {
                        *o += v;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::IndexAdd(x, index) => {
                let c = g.cols();
                let mut gx = Tensor::zeros(index.len(), c);
                for (i, &dst) in index.iter().enumerate() {
                    gx.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.row_slice(dst));
                }
                self.acc(grads, *x, gx);
            }
            Op::SumRows(x) | Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (r, c) = tx.dims2()?;
                let k = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / r as f64
                } else {
                    1.0
                };
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    for (o, v) in gx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.data()) {
                        *o = v * k;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                let gv = g.data()[0];
                self.acc(
                    grads,
                    *x,
                    Tensor::new(tx.shape().to_vec(), vec![gv; tx.len()])?,
                );
            }
            Op::Transpose(x) => {
                let (r, c) = g.dims2()?;
                let mut gx = Tensor::zeros(c, r);
                for i in 0..r {
                    for j in 0..c {
                        gx.data_mut()[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = node.value.as_ref().expect("softmax output");
                let (r, c) = y.dims2()?;
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm(x, eps) => {
                let tx = self.value(*x);
                let (y, inv_std) = layer_norm_rows(tx, *eps);
                let (r, c) = y.dims2()?;
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx.data_mut()[i * c + j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ClampMin(x, min) => {
                let tx = self.value(*x);
                let data = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| if *v > *min { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::Dropout(x, mask) => {
                let data = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::detached();
        let i = tape.constant(Tensor::identity(3));
        let x = tape.constant(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::detached();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::filled(1, 5, 0.7));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::detached();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward_full(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut tape = Tape::detached();
        let x = tape.variable(t(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let y = tape.mean_all(x).unwrap();
        let g = tape.backward_full(y, Tensor::scalar(1.0)).unwrap();
        for v in g.wrt(x).unwrap().data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn unreachable_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0)).unwrap();
        let b = store.add("b", Tensor::scalar(5.0)).unwrap();
        let mut tape = Tape::new(&store);
        let va = tape.param(a).unwrap();
        let _vb = tape.param(b).unwrap();
        let y = tape.square(va).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[4.0]);
        assert!(grads.get(b).is_none());
        store.accumulate(&grads);
        assert_eq!(store.grad(b).data(), &[0.0]);
    }

    #[test]
    fn broadcast_column_and_row() {
        let mut tape = Tape::detached();
        let x = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let col = tape.constant(t(2, 1, &[10.0, 100.0]));
        let row = tape.constant(t(1, 2, &[1.0, -1.0]));
        let a = tape.mul(x, col).unwrap();
        assert_eq!(tape.value(a).data(), &[10.0, 20.0, 300.0, 400.0]);
        let b = tape.add(x, row).unwrap();
        assert_eq!(tape.value(b).data(), &[2.0, 1.0, 4.0, 3.0]);
        let bad = tape.constant(t(1, 3, &[0.0; 3]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn index_add_and_gather_are_adjoint() {
        let mut tape = Tape::detached();
        let x = tape.variable(t(3, 1, &[1.0, 2.0, 3.0]));
        let s = tape.index_add(x, &[1, 1, 0], 2).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 3.0]);
        let w = tape.constant(t(2, 1, &[5.0, 7.0]));
        let p = tape.mul(s, w).unwrap();
        let l = tape.sum_all(p).unwrap();
        let g = tape.backward_full(l, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[7.0, 7.0, 5.0]);
    }
}

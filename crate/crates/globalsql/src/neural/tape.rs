//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] borrows a [`ParameterStore`] for the duration of one forward
//! pass. Every primitive pushes a node holding its value and the handles of
//! its inputs; [`Tape::backward`] walks the nodes in reverse and returns the
//! gradient of a scalar output with respect to every parameter.
//!
//! Values are stored row-major as `(rows, cols)`; vectors are `(n, 1)`.

use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use super::params::{Gradients, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatVec(Var, Var),
    Linear(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    RowsMean(Var, Vec<usize>),
    StackRows(Vec<Var>),
    Dot(Var, Var),
    Sum(Var),
    Softmax(Var),
    SoftmaxRows(Var),
    LogSoftmaxAt(Var, Option<Rc<[bool]>>, usize),
    MaxRows(Var, Vec<usize>),
    Scatter(Var, Rc<[(usize, usize)]>),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ScaleRows(Var, Var),
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p> {
    store: &'p ParameterStore,
    nodes: Vec<Node<'p>>,
    param_names: Vec<String>,
    param_vars: HashMap<String, Var>,
    grad_enabled: bool,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_names: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; used for inference.
    pub fn inference(store: &'p ParameterStore) -> Self {
        let mut t = Self::new(store);
        t.grad_enabled = false;
        t
    }

    pub fn store(&self) -> &'p ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    /// Copies the value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let shape = if n.cols == 1 { vec![n.rows] } else { vec![n.rows, n.cols] };
        Tensor {
            shape,
            data: n.value.to_vec(),
        }
    }

    /// Row `i` of a matrix node, as a plain slice.
    pub fn row_values(&self, v: Var, i: usize) -> &[f64] {
        let n = &self.nodes[v.0];
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    fn push(&mut self, value: Cow<'p, [f64]>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let requires_grad = self.grad_enabled && self.op_requires_grad(&op);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatVec(a, b)
            | Op::Linear(a, b)
            | Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::ScaleBy(a, b)
            | Op::Dot(a, b)
            | Op::ScaleRows(a, b) => rg(a) || rg(b),
            Op::AddN(vs) | Op::Concat(vs) | Op::StackRows(vs) | Op::ConcatCols(vs) => {
                vs.iter().any(rg)
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Clamp(a, _, _)
            | Op::Slice(a, _)
            | Op::Row(a, _)
            | Op::RowsMean(a, _)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxAt(a, _, _)
            | Op::MaxRows(a, _)
            | Op::Scatter(a, _)
            | Op::Reshape(a) => rg(a),
        }
    }

    // ---- leaves ----

    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "constant shape");
        self.push(Cow::Owned(data), rows, cols, Op::Leaf)
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.constant(data, n, 1)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(vec![x], 1, 1)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(vec![0.0; rows * cols], rows, cols)
    }

    pub fn tensor_const(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims();
        self.constant(t.data.clone(), r, c)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?;
        let (r, c) = t.dims();
        let idx = self.param_names.len();
        self.param_names.push(name.to_string());
        let v = self.push(Cow::Borrowed(&t.data), r, c, Op::Param(idx));
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- linear algebra ----

    /// `w (r x c) * x (c)` -> `(r)`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (r, c) = self.dims(w);
        let (xn, xc) = self.dims(x);
        if xn * xc != c {
            return Err(shape_err("matvec", self.dims(w), self.dims(x)));
        }
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = wv.chunks_exact(c).map(|row| dot(row, xv)).collect();
        Ok(self.push(Cow::Owned(out), r, 1, Op::MatVec(w, x)))
    }

    /// Row-wise affine map without bias: `x (n x in) * w^T` with `w (out x in)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, din) = self.dims(x);
        let (dout, win) = self.dims(w);
        if din != win {
            return Err(shape_err("linear", self.dims(x), self.dims(w)));
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = Vec::with_capacity(n * dout);
        for xr in xv.chunks_exact(din) {
            for wr in wv.chunks_exact(din) {
                out.push(dot(xr, wr));
            }
        }
        Ok(self.push(Cow::Owned(out), n, dout, Op::Linear(x, w)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", self.dims(a), self.dims(b)));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                orow.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
            }
        }
        Ok(self.push(Cow::Owned(out), n, m, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push(Cow::Owned(out), c, r, Op::Transpose(a))
    }

    // ---- elementwise ----

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(op, self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(Cow::Owned(out), r, c, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        self.push(Cow::Owned(out), r, c, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn add_n(&mut self, vs: &[Var]) -> Result<Var> {
        let first = *vs
            .first()
            .ok_or_else(|| Error::Invalid("add_n of nothing".into()))?;
        let (r, c) = self.dims(first);
        let mut out = vec![0.0; r * c];
        for v in vs {
            if self.dims(*v) != (r, c) {
                return Err(shape_err("add_n", (r, c), self.dims(*v)));
            }
            out.iter_mut()
                .zip(self.nodes[v.0].value.iter())
                .for_each(|(o, x)| *o += x);
        }
        Ok(self.push(Cow::Owned(out), r, c, Op::AddN(vs.to_vec())))
    }

    /// Adds vector `b` to every row of matrix `m`. For vectors this is plain addition.
    pub fn add_row_bias(&mut self, m: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(m);
        let (br, bc) = self.dims(b);
        if c == 1 && (br, bc) == (r, 1) {
            return self.add(m, b);
        }
        if br * bc != c {
            return Err(shape_err("add_row_bias", (r, c), (br, bc)));
        }
        let bv = self.nodes[b.0].value.to_vec();
        let out: Vec<f64> = self.nodes[m.0]
            .value
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        Ok(self.push(Cow::Owned(out), r, c, Op::AddRowBias(m, b)))
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(shape_err("scale_by", self.dims(a), self.dims(s)));
        }
        let k = self.scalar(s);
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        Ok(self.push(Cow::Owned(out), r, c, Op::ScaleBy(a, s)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ---- structural ----

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, vs: &[Var]) -> Var {
        let mut out = Vec::new();
        for v in vs {
            out.extend_from_slice(&self.nodes[v.0].value);
        }
        let n = out.len();
        self.push(Cow::Owned(out), n, 1, Op::Concat(vs.to_vec()))
    }

    /// Elements `[start, start + len)` of the flattened value, as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(Cow::Owned(out), len, 1, Op::Slice(a, start))
    }

    /// Rows `[start, start + n)` of a matrix.
    pub fn slice_rows(&mut self, m: Var, start: usize, n: usize) -> Var {
        let c = self.cols(m);
        let out = self.nodes[m.0].value[start * c..(start + n) * c].to_vec();
        self.push(Cow::Owned(out), n, c, Op::Slice(m, start * c))
    }

    /// Same values, new dimensions.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(shape_err("reshape", (r, c), (rows, cols)));
        }
        let out = self.nodes[a.0].value.to_vec();
        Ok(self.push(Cow::Owned(out), rows, cols, Op::Reshape(a)))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, ms: &[Var]) -> Result<Var> {
        let first = *ms
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let c = self.cols(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for m in ms {
            if self.cols(*m) != c {
                return Err(shape_err("concat_rows", self.dims(first), self.dims(*m)));
            }
            rows += self.rows(*m);
            out.extend_from_slice(&self.nodes[m.0].value);
        }
        Ok(self.push(Cow::Owned(out), rows, c, Op::Concat(ms.to_vec())))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, ms: &[Var]) -> Result<Var> {
        let first = *ms
            .first()
            .ok_or_else(|| Error::Invalid("concat_cols of nothing".into()))?;
        let r = self.rows(first);
        for m in ms {
            if self.rows(*m) != r {
                return Err(shape_err("concat_cols", self.dims(first), self.dims(*m)));
            }
        }
        let total: usize = ms.iter().map(|m| self.cols(*m)).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for m in ms {
                out.extend_from_slice(self.row_values(*m, i));
            }
        }
        Ok(self.push(Cow::Owned(out), r, total, Op::ConcatCols(ms.to_vec())))
    }

    /// Multiplies row `i` of `m` by `s[i]`.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(m);
        let (sr, sc) = self.dims(s);
        if sr * sc != r {
            return Err(shape_err("scale_rows", (r, c), (sr, sc)));
        }
        let sv = &self.nodes[s.0].value;
        let out: Vec<f64> = self.nodes[m.0]
            .value
            .chunks_exact(c)
            .zip(sv.iter())
            .flat_map(|(row, k)| row.iter().map(move |x| x * k))
            .collect();
        Ok(self.push(Cow::Owned(out), r, c, Op::ScaleRows(m, s)))
    }

    pub fn row(&mut self, m: Var, i: usize) -> Var {
        let out = self.row_values(m, i).to_vec();
        let n = out.len();
        self.push(Cow::Owned(out), n, 1, Op::Row(m, i))
    }

    /// Mean of the selected rows of `m`.
    pub fn rows_mean(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::Invalid("rows_mean over no rows".into()));
        }
        let c = self.cols(m);
        let mut out = vec![0.0; c];
        for &i in idx {
            out.iter_mut()
                .zip(self.row_values(m, i))
                .for_each(|(o, x)| *o += x);
        }
        let k = 1.0 / idx.len() as f64;
        out.iter_mut().for_each(|x| *x *= k);
        Ok(self.push(Cow::Owned(out), c, 1, Op::RowsMean(m, idx.to_vec())))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let first = *vs
            .first()
            .ok_or_else(|| Error::Invalid("stack_rows of nothing".into()))?;
        let c = self.rows(first) * self.cols(first);
        let mut out = Vec::with_capacity(c * vs.len());
        for v in vs {
            let (r, cc) = self.dims(*v);
            if r * cc != c {
                return Err(shape_err("stack_rows", (c, 1), (r, cc)));
            }
            out.extend_from_slice(&self.nodes[v.0].value);
        }
        Ok(self.push(Cow::Owned(out), vs.len(), c, Op::StackRows(vs.to_vec())))
    }

    // ---- reductions ----

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ar * ac != br * bc {
            return Err(shape_err("dot", (ar, ac), (br, bc)));
        }
        let x = dot(&self.nodes[a.0].value, &self.nodes[b.0].value);
        Ok(self.push(Cow::Owned(vec![x]), 1, 1, Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let x = self.nodes[a.0].value.iter().sum();
        self.push(Cow::Owned(vec![x]), 1, 1, Op::Sum(a))
    }

    /// Softmax over all elements of a vector; masked-out entries get exactly 0.
    pub fn softmax(&mut self, a: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let out = softmax_masked(&self.nodes[a.0].value, mask.as_deref())?;
        let n = out.len();
        Ok(self.push(Cow::Owned(out), n, 1, Op::Softmax(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.nodes[a.0].value.chunks_exact(c) {
            out.extend(softmax_masked(row, None)?);
        }
        Ok(self.push(Cow::Owned(out), r, c, Op::SoftmaxRows(a)))
    }

    /// `log softmax(a)[idx]` under an optional legality mask.
    pub fn log_softmax_at(&mut self, a: Var, mask: Option<Rc<[bool]>>, idx: usize) -> Result<Var> {
        let vals = &self.nodes[a.0].value;
        if idx >= vals.len() || mask.as_ref().is_some_and(|m| !m[idx]) {
            return Err(Error::Invalid(format!("log_softmax_at: index {idx} is not selectable")));
        }
        let lse = log_sum_exp(vals, mask.as_deref())?;
        let x = vals[idx] - lse;
        Ok(self.push(Cow::Owned(vec![x]), 1, 1, Op::LogSoftmaxAt(a, mask, idx)))
    }

    /// Per-row maximum of a matrix, as a vector.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for row in self.nodes[a.0].value.chunks_exact(c) {
            let (j, m) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bj, bm), (j, &x)| if x > bm { (j, x) } else { (bj, bm) });
            out.push(m);
            arg.push(j);
        }
        self.push(Cow::Owned(out), r, 1, Op::MaxRows(a, arg))
    }

    /// Sparse aggregation: `out[dst] += x[src]` for each `(dst, src)` pair.
    pub fn scatter_rows(&mut self, x: Var, pairs: Rc<[(usize, usize)]>, out_rows: usize) -> Var {
        let c = self.cols(x);
        let mut out = vec![0.0; out_rows * c];
        for &(dst, src) in pairs.iter() {
            let s = &self.nodes[x.0].value[src * c..(src + 1) * c];
            out[dst * c..(dst + 1) * c]
                .iter_mut()
                .zip(s)
                .for_each(|(o, v)| *o += v);
        }
        self.push(Cow::Owned(out), out_rows, c, Op::Scatter(x, pairs))
    }

    // ---- backward ----

    /// Gradients of the scalar `loss` with respect to every parameter in the
    /// store. Parameters that did not take part get zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: vec![r, c],
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: HashMap<usize, Vec<f64>> = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut param_grads);
        }

        let mut map = std::collections::BTreeMap::new();
        for (name, t) in self.store.iter() {
            map.insert(name.clone(), Tensor::zeros(&t.shape));
        }
        for (idx, g) in param_grads {
            let name = &self.param_names[idx];
            if let Some(t) = map.get_mut(name) {
                t.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(Gradients { map })
    }

    fn backprop_node(
        &self,
        node: &Node<'p>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut HashMap<usize, Vec<f64>>,
    ) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulate `f` into the gradient buffer of `v`.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {{
                let v: Var = $v;
                if needs(v) {
                    let len = self.nodes[v.0].value.len();
                    let $buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(idx) => {
                let e = param_grads
                    .entry(*idx)
                    .or_insert_with(|| vec![0.0; g.len()]);
                e.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::MatVec(w, x) => {
                let (r, c) = self.dims(*w);
                let xv = val(*x);
                let wv = val(*w);
                acc!(*w, |buf| {
                    for i in 0..r {
                        let gi = g[i];
                        if gi != 0.0 {
                            buf[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(xv)
                                .for_each(|(b, x)| *b += gi * x);
                        }
                    }
                });
                acc!(*x, |buf| {
                    for i in 0..r {
                        let gi = g[i];
                        if gi != 0.0 {
                            buf.iter_mut()
                                .zip(&wv[i * c..(i + 1) * c])
                                .for_each(|(b, w)| *b += gi * w);
                        }
                    }
                });
            }
            Op::Linear(x, w) => {
                let (n, din) = self.dims(*x);
                let dout = self.rows(*w);
                let xv = val(*x);
                let wv = val(*w);
                acc!(*x, |buf| {
                    for i in 0..n {
                        for o in 0..dout {
                            let gio = g[i * dout + o];
                            if gio != 0.0 {
                                buf[i * din..(i + 1) * din]
                                    .iter_mut()
                                    .zip(&wv[o * din..(o + 1) * din])
                                    .for_each(|(b, w)| *b += gio * w);
                            }
                        }
                    }
                });
                acc!(*w, |buf| {
                    for i in 0..n {
                        for o in 0..dout {
                            let gio = g[i * dout + o];
                            if gio != 0.0 {
                                buf[o * din..(o + 1) * din]
                                    .iter_mut()
                                    .zip(&xv[i * din..(i + 1) * din])
                                    .for_each(|(b, x)| *b += gio * x);
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.cols(*b);
                let av = val(*a);
                let bv = val(*b);
                // dA = G B^T
                acc!(*a, |buf| {
                    for i in 0..n {
                        for p in 0..k {
                            buf[i * k + p] += dot(&g[i * m..(i + 1) * m], &bv[p * m..(p + 1) * m]);
                        }
                    }
                });
                // dB = A^T G
                acc!(*b, |buf| {
                    for i in 0..n {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip != 0.0 {
                                buf[p * m..(p + 1) * m]
                                    .iter_mut()
                                    .zip(&g[i * m..(i + 1) * m])
                                    .for_each(|(b, gg)| *b += aip * gg);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                acc!(*a, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |buf| { add_into(buf, g) });
                acc!(*b, |buf| { add_into(buf, g) });
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| { add_into(buf, g) });
                acc!(*b, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, x)| *b -= x);
                });
            }
            Op::Mul(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                acc!(*a, |buf| {
                    for j in 0..g.len() {
                        buf[j] += g[j] * bv[j];
                    }
                });
                acc!(*b, |buf| {
                    for j in 0..g.len() {
                        buf[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRowBias(m, b) => {
                let c = self.cols(*m);
                acc!(*m, |buf| { add_into(buf, g) });
                acc!(*b, |buf| {
                    for row in g.chunks_exact(c) {
                        add_into(buf, row);
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                let k = val(*s)[0];
                let av = val(*a);
                acc!(*a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, x)| *b += k * x);
                });
                acc!(*s, |buf| {
                    buf[0] += dot(g, av);
                });
            }
            Op::Scale(a, k) => {
                acc!(*a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, x)| *b += k * x);
                });
            }
            Op::AddN(vs) => {
                for v in vs {
                    acc!(*v, |buf| { add_into(buf, g) });
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc!(*a, |buf| {
                    for j in 0..g.len() {
                        buf[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc!(*a, |buf| {
                    for j in 0..g.len() {
                        buf[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a);
                acc!(*a, |buf| {
                    for j in 0..g.len() {
                        buf[j] += g[j] / x[j];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc!(*a, |buf| {
                    for j in 0..g.len() {
                        if x[j] >= *lo && x[j] <= *hi {
                            buf[j] += g[j];
                        }
                    }
                });
            }
            Op::Concat(vs) => {
                let mut off = 0;
                for v in vs {
                    let n = self.nodes[v.0].value.len();
                    acc!(*v, |buf| { add_into(buf, &g[off..off + n]) });
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let n = g.len();
                acc!(*a, |buf| { add_into(&mut buf[*start..*start + n], g) });
            }
            Op::Row(m, i) => {
                let c = g.len();
                acc!(*m, |buf| { add_into(&mut buf[i * c..(i + 1) * c], g) });
            }
            Op::RowsMean(m, idx) => {
                let c = g.len();
                let k = 1.0 / idx.len() as f64;
                acc!(*m, |buf| {
                    for &i in idx {
                        buf[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(b, x)| *b += k * x);
                    }
                });
            }
            Op::StackRows(vs) => {
                let c = node.cols;
                for (i, v) in vs.iter().enumerate() {
                    acc!(*v, |buf| { add_into(buf, &g[i * c..(i + 1) * c]) });
                }
            }
            Op::Dot(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let k = g[0];
                acc!(*a, |buf| {
                    buf.iter_mut().zip(bv).for_each(|(x, y)| *x += k * y);
                });
                acc!(*b, |buf| {
                    buf.iter_mut().zip(av).for_each(|(x, y)| *x += k * y);
                });
            }
            Op::Sum(a) => {
                let k = g[0];
                acc!(*a, |buf| {
                    buf.iter_mut().for_each(|x| *x += k);
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let gy = dot(g, y);
                acc!(*a, |buf| {
                    for j in 0..y.len() {
                        buf[j] += y[j] * (g[j] - gy);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                let y = &node.value;
                acc!(*a, |buf| {
                    for (r, (yr, gr)) in y.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                        let gy = dot(gr, yr);
                        for j in 0..c {
                            buf[r * c + j] += yr[j] * (gr[j] - gy);
                        }
                    }
                });
            }
            Op::LogSoftmaxAt(a, mask, idx) => {
                let p = softmax_masked(val(*a), mask.as_deref()).expect("validated in forward");
                let k = g[0];
                acc!(*a, |buf| {
                    for j in 0..p.len() {
                        let delta = if j == *idx { 1.0 } else { 0.0 };
                        buf[j] += k * (delta - p[j]);
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                let c = self.cols(*a);
                acc!(*a, |buf| {
                    for (r, &j) in arg.iter().enumerate() {
                        buf[r * c + j] += g[r];
                    }
                });
            }
            Op::Reshape(a) => {
                acc!(*a, |buf| { add_into(buf, g) });
            }
            Op::ConcatCols(ms) => {
                let total = node.cols;
                let mut off = 0;
                for m in ms {
                    let c = self.cols(*m);
                    acc!(*m, |buf| {
                        for i in 0..node.rows {
                            add_into(&mut buf[i * c..(i + 1) * c], &g[i * total + off..i * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ScaleRows(m, s) => {
                let c = node.cols;
                let mv = val(*m);
                let sv = val(*s);
                acc!(*m, |buf| {
                    for i in 0..node.rows {
                        let k = sv[i];
                        buf[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(b, x)| *b += k * x);
                    }
                });
                acc!(*s, |buf| {
                    for i in 0..node.rows {
                        buf[i] += dot(&g[i * c..(i + 1) * c], &mv[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Scatter(x, pairs) => {
                let c = node.cols;
                acc!(*x, |buf| {
                    for &(dst, src) in pairs.iter() {
                        buf[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&g[dst * c..(dst + 1) * c])
                            .for_each(|(b, x)| *b += x);
                    }
                });
            }
        }
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        left: vec![a.0, a.1],
        right: vec![b.0, b.1],
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(b, x)| *b += x);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let legal = |j: usize| mask.is_none_or(|m| m[j]);
    let m = xs
        .iter()
        .enumerate()
        .filter(|(j, _)| legal(*j))
        .map(|(_, x)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(0..xs.len()).any(legal) {
        return Err(Error::Invalid("softmax with no selectable entries".into()));
    }
    // max ignores NaN; a non-finite logit must surface instead of vanishing
    let m = if xs.iter().enumerate().any(|(j, x)| legal(j) && !x.is_finite()) { f64::NAN } else { m };
    let s: f64 = xs
        .iter()
        .enumerate()
        .filter(|(j, _)| legal(*j))
        .map(|(_, x)| (x - m).exp())
        .sum();
    Ok(m + s.ln())
}

/// Max-subtracted softmax; masked entries are exactly zero.
pub fn softmax_masked(xs: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let legal = |j: usize| mask.is_none_or(|m| m[j]);
    let m = xs
        .iter()
        .enumerate()
        .filter(|(j, _)| legal(*j))
        .map(|(_, x)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(0..xs.len()).any(legal) {
        return Err(Error::Invalid("softmax with no selectable entries".into()));
    }
    // max ignores NaN; a non-finite logit must surface instead of vanishing
    let m = if xs.iter().enumerate().any(|(j, x)| legal(j) && !x.is_finite()) { f64::NAN } else { m };
    let mut out: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(j, x)| if legal(j) { (x - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    Ok(out)
}

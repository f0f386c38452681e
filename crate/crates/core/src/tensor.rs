//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every forward computation is recorded on a [`Tape`] as a sequence of nodes
//! drawn from a fixed operation vocabulary. [`Tape::backward`] walks the tape
//! in reverse and accumulates gradients into every node that requires them.
//! Matrix products always sum over the inner index in ascending order so a
//! naive triple loop reproduces them bit for bit.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<S: PartialEq> PartialEq for Tensor<S> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Convenience constructor from `f64` values, converted to `S`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::lit(x)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![S::zero(); n]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Tensor::matrix(n, n, data).expect("square")
    }

    /// Entries drawn independently from `U[lo, hi)`.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::lit(rng.uniform(lo, hi))).collect();
        Tensor::new(shape, data).expect("consistent shape")
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<S> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, row: usize, col: usize) -> S {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[S] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    /// Copy of the selected rows as a new `[idx.len() × cols]` matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor<S> {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            out.extend_from_slice(self.row(r));
        }
        Tensor::matrix(idx.len(), c, out).expect("row gather")
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Select {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Recording of one forward computation.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::shape(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<S>, inputs: &[Var], op: Op<S>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor {
            shape,
            data: Arc::new(data),
            requires_grad,
            grad: None,
        };
        self.push(value, op)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        let t = t.with_requires_grad(true);
        self.push(t, Op::Leaf)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    /// Leaf keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        matrix_dims(&self.nodes[v.0].value, what)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul lhs")?;
        let (k2, n) = self.dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.derived(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    /// `[m×k] · [n×k]ᵀ`, i.e. row-by-row dot products.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_nt_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.derived(vec![m, n], out, &[a, b], Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.derived(vec![n, m], out, &[a], Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, &[a, b], Op::Add(a, b)))
    }

    /// Adds a `[d]` (or `[1×d]`) row to every row of an `[n×d]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims(a, "add_row lhs")?;
        if self.value(row).numel() != d {
            return Err(Error::shape(format!(
                "add_row: {:?} + row {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let (x, r) = (self.data(a), self.data(row));
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(x[i * d + j] + r[j]);
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, &[a, row], Op::AddRow(a, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, &[a], Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .data(a)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, &[a], Op::Relu(a))
    }

    /// Row-wise softmax; entries with `allowed[i] == false` come out exactly 0.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let (n, m) = self.dims(x, "softmax_rows")?;
        if let Some(mask) = allowed {
            if mask.len() != n * m {
                return Err(Error::shape(format!(
                    "softmax mask of {} entries for {n}x{m} input",
                    mask.len()
                )));
            }
        }
        let src = self.data(x);
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let keep = |j: usize| allowed.is_none_or(|mask| mask[i * m + j]);
            let row = &src[i * m..(i + 1) * m];
            let mut max = S::neg_infinity();
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(Error::EmptyContext { row: i });
            }
            let mut total = S::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[i * m + j] = e;
                    total = total + e;
                }
            }
            for j in 0..m {
                out[i * m + j] = out[i * m + j] / total;
            }
        }
        Ok(self.derived(vec![n, m], out, &[x], Op::Softmax(x)))
    }

    /// Row-wise `gain ⊙ (x − mean)/sqrt(var + eps) + bias` with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (n, d) = self.dims(x, "layer_norm")?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(format!(
                "layer_norm over {d} features with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let dn = S::from_usize_lossy(d);
        let mut xhat = vec![S::zero(); n * d];
        let mut inv_std = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[i * d + j] = xh;
                out[i * d + j] = g[j] * xh + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.derived(
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Embedding lookup: rows `idx` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(Error::shape(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        Ok(self.derived(
            vec![idx.len(), d],
            out,
            &[table],
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[k] = x.flat[idx[k]]`, reshaped to `shape`.
    pub fn select(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::shape(format!(
                "select: {} indices for shape {shape:?}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&k| k >= n) {
            return Err(Error::shape(format!("select: index {bad} out of {n}")));
        }
        let src = self.data(x);
        let out = idx.iter().map(|&k| src[k]).collect();
        Ok(self.derived(shape, out, &[x], Op::Select { x, idx }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows of nothing"));
        };
        let (_, d) = self.dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p, "concat_rows")?;
            if c != d {
                return Err(Error::shape(format!(
                    "concat_rows: width {c} vs {d}"
                )));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.derived(vec![rows, d], out, parts, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols of nothing"));
        };
        let (n, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != n {
                return Err(Error::shape(format!("concat_cols: {r} rows vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.derived(vec![n, total], out, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.dims(x, "slice_rows")?;
        if start > end || end > n {
            return Err(Error::shape(format!(
                "slice_rows {start}..{end} of {n} rows"
            )));
        }
        let out = self.data(x)[start * d..end * d].to_vec();
        Ok(self.derived(vec![end - start, d], out, &[x], Op::SliceRows { x, start }))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims(logits, "cross_entropy")?;
        if targets.len() != n || n == 0 {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape(format!(
                "cross_entropy: target {bad} out of {v} classes"
            )));
        }
        let src = self.data(logits);
        let mut probs = vec![S::zero(); n * v];
        let mut total = S::zero();
        for i in 0..n {
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - max).exp()).sum();
            for j in 0..v {
                probs[i * v + j] = (row[j] - max).exp() / z;
            }
            total = total + (z.ln() + max - row[targets[i]]);
        }
        let loss = total / S::from_usize_lossy(n);
        Ok(self.derived(
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.derived(vec![1], vec![total], &[x], Op::Sum(x))
    }

    /// Reverse pass from a scalar. Every `requires_grad` node ends up with a
    /// populated gradient (zeros when unreachable); repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !node.value.requires_grad {
                continue;
            }
            let g = g.unwrap_or_else(|| vec![S::zero(); node.value.numel()]);
            match &mut node.value.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].value.requires_grad;
        let mut acc = |v: Var, delta: &dyn Fn(usize) -> S| {
            if !wants(v) {
                return;
            }
            let n = nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
            for (k, s) in slot.iter_mut().enumerate() {
                *s = *s + delta(k);
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(&nodes[a.0].value, "").unwrap();
                let n = out.cols();
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let da = matmul_nt_raw(g, nodes[b.0].value.data(), m, n, k);
                    acc(*a, &|q| da[q]);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(nodes[a.0].value.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    acc(*b, &|q| db[q]);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = matrix_dims(&nodes[a.0].value, "").unwrap();
                let n = out.cols();
                if wants(*a) {
                    // dA = dC · B
                    let da = matmul_raw(g, nodes[b.0].value.data(), m, n, k);
                    acc(*a, &|q| da[q]);
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    let gt = transpose_raw(g, m, n);
                    let db = matmul_raw(&gt, nodes[a.0].value.data(), n, m, k);
                    acc(*b, &|q| db[q]);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = matrix_dims(&nodes[a.0].value, "").unwrap();
                let gt = transpose_raw(g, n, m);
                acc(*a, &|q| gt[q]);
            }
            Op::Add(a, b) => {
                acc(*a, &|q| g[q]);
                acc(*b, &|q| g[q]);
            }
            Op::AddRow(a, row) => {
                acc(*a, &|q| g[q]);
                let d = nodes[row.0].value.numel();
                let n = out.numel() / d.max(1);
                acc(*row, &|j| (0..n).fold(S::zero(), |s, r| s + g[r * d + j]));
            }
            Op::Mul(a, b) => {
                let (x, y) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &|q| g[q] * y[q]);
                acc(*b, &|q| g[q] * x[q]);
            }
            Op::Scale(a, c) => acc(*a, &|q| g[q] * *c),
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &|q| if x[q] > S::zero() { g[q] } else { S::zero() });
            }
            Op::Softmax(x) => {
                let m = out.cols();
                let y = out.data();
                let dots: Vec<S> = (0..out.rows())
                    .map(|r| (0..m).fold(S::zero(), |s, j| s + y[r * m + j] * g[r * m + j]))
                    .collect();
                acc(*x, &|q| y[q] * (g[q] - dots[q / m]));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let n = out.rows();
                let gv = nodes[gain.0].value.data();
                if wants(*x) {
                    let dn = S::from_usize_lossy(d);
                    let mut dx = vec![S::zero(); n * d];
                    for r in 0..n {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            dx[r * d + j] =
                                inv_std[r] / dn * (dn * dxh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    acc(*x, &|q| dx[q]);
                }
                acc(*gain, &|j| {
                    (0..n).fold(S::zero(), |s, r| s + g[r * d + j] * xhat[r * d + j])
                });
                acc(*bias, &|j| (0..n).fold(S::zero(), |s, r| s + g[r * d + j]));
            }
            Op::GatherRows { table, idx } => {
                if wants(*table) {
                    let d = out.cols();
                    let mut dt = vec![S::zero(); nodes[table.0].value.numel()];
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[r * d + j] = dt[r * d + j] + g[k * d + j];
                        }
                    }
                    acc(*table, &|q| dt[q]);
                }
            }
            Op::Select { x, idx } => {
                if wants(*x) {
                    let mut dx = vec![S::zero(); nodes[x.0].value.numel()];
                    for (k, &src) in idx.iter().enumerate() {
                        dx[src] = dx[src] + g[k];
                    }
                    acc(*x, &|q| dx[q]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(*p, &|q| g[offset + q]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &|q| g[(q / w) * total + offset + q % w]);
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let d = out.cols();
                let (lo, hi) = (start * d, start * d + out.numel());
                acc(*x, &|q| if q >= lo && q < hi { g[q - lo] } else { S::zero() });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / S::from_usize_lossy(targets.len());
                acc(*logits, &|q| {
                    let hot = if targets[q / v] == q % v { S::one() } else { S::zero() };
                    (probs[q] - hot) * scale
                });
            }
            Op::Sum(x) => acc(*x, &|_| g[0]),
        }
    }
}

/// Naive `[m×k]·[k×n]`; each output sums `p = 0..k` in ascending order.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

/// `[m×k]·[n×k]ᵀ`.
pub fn matmul_nt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Compares tape gradients of `f` against fourth-order central differences
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
///
/// Returns `max_i |g_a − g_n| / max(1e-8, |g_a| + |g_n|)` over every element
/// of every parameter.
pub fn finite_diff_check<S, F>(f: F, params: &[Tensor<S>], h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<S>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[S]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |ps: &[Tensor<S>]| -> Result<S> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let floor = S::lit(1e-8);
    let mut worst = S::zero();
    let mut work: Vec<Tensor<S>> = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for k in 0..params[pi].numel() {
            let orig = params[pi].data()[k];
            let mut at = |step: f64| -> Result<S> {
                work[pi].data_mut()[k] = orig + h * S::lit(step);
                eval(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            work[pi].data_mut()[k] = orig;
            let numeric = (m2 - p2 + S::lit(8.0) * (p1 - m1)) / (S::lit(12.0) * h);
            let ga = grads[k];
            let err = (ga - numeric).abs() / floor.max(ga.abs() + numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Inverted dropout mask: each entry kept with probability `1 − p` and scaled
/// by `1/(1 − p)`.
pub fn dropout_mask<S: Scalar>(shape: Vec<usize>, p: f64, rng: &mut Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let scale = S::lit(1.0 / keep);
    let data = (0..n)
        .map(|_| if rng.bernoulli(keep) { scale } else { S::zero() })
        .collect();
    Tensor::new(shape, data).expect("mask shape")
}

use std::collections::HashMap;

use super::kernels;
use super::param::{ParamGrads, ParamId, ParamStore};
use super::{invalid, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

impl Axis {
    fn from_index(op: &'static str, axis: usize) -> Result<Self> {
        match axis {
            0 => Ok(Axis::Rows),
            1 => Ok(Axis::Cols),
            _ => Err(invalid(op, format!("axis {axis} out of range"))),
        }
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, T),
    ScaleBy(Var, Var),
    AddScalar(Var, Var),
    ScaleRows(Var, Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize),
    Sum(Var, Axis),
    Mean(Var, Axis),
    SumAll(Var),
    Transpose(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records differentiable operations in execution order.
///
/// Parameters are read from the [`ParamStore`] the tape was opened with;
/// each parameter enters the tape at most once, so reuse (for example a
/// weight tied between an embedding and a decoder) accumulates correctly.
pub struct Tape<'p, T> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims(op)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Non-parameter input. Its gradient is still reported by backward.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("tape opened without a parameter store");
        let v = self.push(store.value(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::zip_map("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::zip_map("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::zip_map("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = kernels::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(y, Op::AddBias(x, bias)))
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::from_f64(scale), T::from_f64(shift));
        let y = self.value(x).map(|v| a * v + b);
        self.push(y, Op::Affine(x, a))
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<T> {
        let t = self.value(s);
        if t.shape() != [1, 1] {
            return Err(invalid(op, format!("expected 1×1 scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    /// Multiplies every entry of `x` by the `1×1` value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.expect_scalar("scale_by", s)?;
        let y = self.value(x).map(|v| v * sv);
        Ok(self.push(y, Op::ScaleBy(x, s)))
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.expect_scalar("add_scalar", s)?;
        let y = self.value(x).map(|v| v + sv);
        Ok(self.push(y, Op::AddScalar(x, s)))
    }

    /// Scales row `r` of an `m×n` matrix by entry `r` of an `m×1` column.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, _) = self.dims("scale_rows", x)?;
        let (sm, sn) = self.dims("scale_rows", s)?;
        if sm != m || sn != 1 {
            return Err(self.mismatch("scale_rows", x, s));
        }
        let mut y = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (r, &f) in sv.iter().enumerate() {
            y.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(y, Op::ScaleRows(x, s)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    /// Softmax restricted, per row, to the `k` largest logits; other entries
    /// are exactly zero. The selected index sets are returned alongside and
    /// are treated as constants by backward.
    pub fn topk_softmax(&mut self, x: Var, k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
        let (_, indices) = kernels::top_k_rows(self.value(x), k)?;
        let logits = self.value(x);
        let mut y = Tensor::zeros(logits.rows(), logits.cols());
        for (r, sel) in indices.iter().enumerate() {
            let mut vals: Vec<T> = sel.iter().map(|&i| logits.at(r, i)).collect();
            kernels::softmax_in_place(&mut vals);
            let row = y.row_mut(r);
            for (&i, &w) in sel.iter().zip(&vals) {
                row[i] = w;
            }
        }
        // Off-selection entries are zero, so the softmax backward rule
        // already restricts itself to the selected set.
        Ok((self.push(y, Op::Softmax(x)), indices))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.ln());
        self.push(y, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.exp());
        self.push(y, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::gelu);
        self.push(y, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let f = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            f.output,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized: f.normalized,
                inv_std: f.inv_std,
            },
        ))
    }

    /// Rows of `x` at `indices`, in order (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims("gather_rows", x)?;
        if indices.is_empty() {
            return Err(invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(invalid("gather_rows", format!("row {bad} out of range for {m} rows")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let y = Tensor::matrix(indices.len(), n, data);
        Ok(self.push(y, Op::GatherRows(x, indices.to_vec())))
    }

    /// Inverse of gather: row `k` of `x` is added into row `indices[k]` of a
    /// zero `total×n` matrix.
    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], total: usize) -> Result<Var> {
        let (m, n) = self.dims("scatter_rows", x)?;
        if indices.len() != m {
            return Err(invalid(
                "scatter_rows",
                format!("{} indices for {m} rows", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= total) {
            return Err(invalid("scatter_rows", format!("row {bad} out of range for {total}")));
        }
        let src = self.value(x);
        let mut y = Tensor::zeros(total, n);
        for (k, &i) in indices.iter().enumerate() {
            for (o, &v) in y.row_mut(i).iter_mut().zip(src.row(k)) {
                *o += v;
            }
        }
        Ok(self.push(y, Op::ScatterRows(x, indices.to_vec())))
    }

    /// Concatenation along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let axis = Axis::from_index("concat", axis)?;
        let first = *parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let (r0, c0) = self.dims("concat", first)?;
        for &p in &parts[1..] {
            let (r, c) = self.dims("concat", p)?;
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let y = match axis {
            Axis::Rows => {
                let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(rows, c0, data)
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::matrix(r0, cols, data)
            }
        };
        Ok(self.push(y, Op::Concat(parts.to_vec(), axis)))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let axis = Axis::from_index("slice", axis)?;
        let (m, n) = self.dims("slice", x)?;
        let limit = if axis == Axis::Rows { m } else { n };
        if start >= end || end > limit {
            return Err(invalid("slice", format!("range {start}..{end} out of 0..{limit}")));
        }
        let src = self.value(x);
        let y = match axis {
            Axis::Rows => Tensor::matrix(end - start, n, src.data()[start * n..end * n].to_vec()),
            Axis::Cols => {
                let mut data = Vec::with_capacity(m * (end - start));
                for r in 0..m {
                    data.extend_from_slice(&src.row(r)[start..end]);
                }
                Tensor::matrix(m, end - start, data)
            }
        };
        Ok(self.push(y, Op::Slice(x, axis, start)))
    }

    fn reduce(&self, x: Var, axis: Axis, scale: T) -> Tensor<T> {
        let src = self.value(x);
        let (m, n) = (src.rows(), src.cols());
        match axis {
            Axis::Rows => {
                let mut out = vec![T::zero(); n];
                for r in 0..m {
                    for (o, &v) in out.iter_mut().zip(src.row(r)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o *= scale);
                Tensor::matrix(1, n, out)
            }
            Axis::Cols => {
                let out = (0..m)
                    .map(|r| src.row(r).iter().copied().sum::<T>() * scale)
                    .collect();
                Tensor::matrix(m, 1, out)
            }
        }
    }

    /// Sum over `axis`: 0 gives `1×n`, 1 gives `m×1`.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let axis = Axis::from_index("sum", axis)?;
        self.dims("sum", x)?;
        let y = self.reduce(x, axis, T::one());
        Ok(self.push(y, Op::Sum(x, axis)))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let axis = Axis::from_index("mean", axis)?;
        let (m, n) = self.dims("mean", x)?;
        let count = if axis == Axis::Rows { m } else { n };
        let y = self.reduce(x, axis, T::one() / T::from_f64(count as f64));
        Ok(self.push(y, Op::Mean(x, axis)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = kernels::transpose(self.value(x))?;
        Ok(self.push(y, Op::Transpose(x)))
    }

    /// Summed negative log-likelihood of `target` classes at the listed rows
    /// of a logit matrix. Returns a `1×1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims("cross_entropy", logits)?;
        for &(r, t) in targets {
            if r >= m || t >= n {
                return Err(invalid(
                    "cross_entropy",
                    format!("target ({r}, {t}) outside {m}×{n} logits"),
                ));
            }
        }
        let src = self.value(logits);
        let mut probs = Tensor::zeros(m, n);
        let mut log_norm = vec![T::zero(); m];
        for r in 0..m {
            let row = src.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            log_norm[r] = max + sum.ln();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_norm[r]).exp();
            }
        }
        let loss: T = targets
            .iter()
            .map(|&(r, t)| log_norm[r] - src.at(r, t))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a `1×1` loss. Gradients of parameters and inputs
    /// are returned; intermediate gradients are released as they are used.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            if keep {
                grads[i] = Some(g);
            }
        }
        let params = self
            .param_vars
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients {
            node_grads: grads,
            params,
        })
    }

    /// Runs backward and adds the parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads.into_param_grads());
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let da = kernels::matmul_nt(g, self.value(*b))?;
                let db = kernels::matmul_tn(self.value(*a), g)?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let da = kernels::matmul(g, self.value(*b))?;
                let db = kernels::matmul_tn(g, self.value(*a))?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = kernels::zip_map("mul", g, self.value(*b), |x, y| x * y)?;
                let db = kernels::zip_map("mul", g, self.value(*a), |x, y| x * y)?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, g.clone());
                acc(grads, *b, column_sums(g));
            }
            Op::Affine(x, a) => {
                let a = *a;
                acc(grads, *x, g.map(|v| v * a));
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                acc(grads, *x, g.map(|v| v * sv));
                let ds: T = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum();
                acc(grads, *s, Tensor::scalar(ds));
            }
            Op::AddScalar(x, s) => {
                acc(grads, *x, g.clone());
                acc(grads, *s, Tensor::scalar(g.data().iter().copied().sum()));
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let mut dx = g.clone();
                let mut ds = Vec::with_capacity(sv.len());
                for r in 0..g.rows() {
                    let f = sv.data()[r];
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                    ds.push(g.row(r).iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum());
                }
                acc(grads, *x, dx);
                acc(grads, *s, Tensor::column_vector(ds));
            }
            Op::Softmax(x) => {
                let mut dx = g.clone();
                for r in 0..g.rows() {
                    let yr = y.row(r);
                    let dot: T = g.row(r).iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Log(x) => {
                let dx = kernels::zip_map("log", g, self.value(*x), |a, b| a / b)?;
                acc(grads, *x, dx);
            }
            Op::Exp(x) => {
                acc(grads, *x, kernels::zip_map("exp", g, y, |a, b| a * b)?);
            }
            Op::Sigmoid(x) => {
                let dx = kernels::zip_map("sigmoid", g, y, |a, b| a * b * (T::one() - b))?;
                acc(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx =
                    kernels::zip_map("gelu", g, self.value(*x), |a, b| a * kernels::gelu_grad(b))?;
                acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (m, n) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                let nf = T::from_f64(n as f64);
                let mut dx = Tensor::zeros(m, n);
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for r in 0..m {
                    let gr = g.row(r);
                    let xr = normalized.row(r);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for c in 0..n {
                        let d = gr[c] * gam[c];
                        sum_d += d;
                        sum_dx += d * xr[c];
                        dgamma[c] += gr[c] * xr[c];
                        dbeta[c] += gr[c];
                    }
                    let is = inv_std[r];
                    let out = dx.row_mut(r);
                    for c in 0..n {
                        let d = gr[c] * gam[c];
                        out[c] = is / nf * (nf * d - sum_d - xr[c] * sum_dx);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, Tensor::row_vector(dgamma));
                acc(grads, *beta, Tensor::row_vector(dbeta));
            }
            Op::GatherRows(x, idx) => {
                let src = self.value(*x);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ScatterRows(x, idx) => {
                let n = g.cols();
                let mut data = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    data.extend_from_slice(g.row(i));
                }
                acc(grads, *x, Tensor::matrix(idx.len(), n, data));
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (self.value(p).rows(), self.value(p).cols());
                    let piece = match axis {
                        Axis::Rows => {
                            let n = g.cols();
                            Tensor::matrix(pr, pc, g.data()[offset * n..(offset + pr) * n].to_vec())
                        }
                        Axis::Cols => {
                            let mut data = Vec::with_capacity(pr * pc);
                            for r in 0..pr {
                                data.extend_from_slice(&g.row(r)[offset..offset + pc]);
                            }
                            Tensor::matrix(pr, pc, data)
                        }
                    };
                    offset += if *axis == Axis::Rows { pr } else { pc };
                    acc(grads, p, piece);
                }
            }
            Op::Slice(x, axis, start) => {
                let src = self.value(*x);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                match axis {
                    Axis::Rows => {
                        for r in 0..g.rows() {
                            dx.row_mut(start + r).copy_from_slice(g.row(r));
                        }
                    }
                    Axis::Cols => {
                        for r in 0..g.rows() {
                            dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let src = self.value(*x);
                let (m, n) = (src.rows(), src.cols());
                let scale = match (&node.op, axis) {
                    (Op::Mean(..), Axis::Rows) => T::one() / T::from_f64(m as f64),
                    (Op::Mean(..), Axis::Cols) => T::one() / T::from_f64(n as f64),
                    _ => T::one(),
                };
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    let row = dx.row_mut(r);
                    for c in 0..n {
                        row[c] = scale
                            * match axis {
                                Axis::Rows => g.data()[c],
                                Axis::Cols => g.data()[r],
                            };
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let src = self.value(*x);
                acc(grads, *x, Tensor::full(src.rows(), src.cols(), g.item()));
            }
            Op::Transpose(x) => {
                acc(grads, *x, kernels::transpose(g)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gv = g.item();
                let mut dx = Tensor::zeros(probs.rows(), probs.cols());
                for &(r, t) in targets {
                    for (d, &p) in dx.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *d += gv * p;
                    }
                    dx.row_mut(r)[t] -= gv;
                }
                acc(grads, *logits, dx);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); g.cols()];
    for r in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    node_grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to an input or parameter node; `None` when the
    /// loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn into_param_grads(mut self) -> ParamGrads<T> {
        let entries = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.node_grads[v.0].take().map(|g| (id, g)))
            .collect();
        ParamGrads::from_entries(entries)
    }
}

//! Forward kernels on plain tensors.
//!
//! The tape calls into these for its forward values; they are also usable
//! directly for inference-only code paths and telemetry.

use super::{invalid, Result, Scalar, Tensor, TensorError};

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `a · b` for `m×k` and `k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims("matmul")?;
    let (k2, n) = b.dims("matmul")?;
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// `a · bᵀ` for `m×k` and `n×k`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims("matmul_nt")?;
    let (n, k2) = b.dims("matmul_nt")?;
    if k != k2 {
        return Err(mismatch("matmul_nt", a, b));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// `aᵀ · b` for `k×m` and `k×n`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims("matmul_tn")?;
    let (k2, n) = b.dims("matmul_tn")?;
    if k != k2 {
        return Err(mismatch("matmul_tn", a, b));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims("transpose")?;
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a.at(i, j));
        }
    }
    Ok(Tensor::matrix(n, m, out))
}

pub fn zip_map<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds a `1×n` bias to every row of an `m×n` matrix.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims("add_bias")?;
    let (br, bc) = bias.dims("add_bias")?;
    if br != 1 || bc != n {
        return Err(mismatch("add_bias", x, bias));
    }
    let mut out = x.clone();
    for r in 0..m {
        for (o, &b) in out.row_mut(r).iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, _) = x.dims("softmax")?;
    let mut out = x.clone();
    for r in 0..m {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(v: T) -> T {
    let c = T::from_f64(GELU_C);
    let s = T::from_f64(SQRT_2_OVER_PI);
    let half = T::from_f64(0.5);
    half * v * (T::one() + (s * (v + c * v * v * v)).tanh())
}

pub fn gelu_grad<T: Scalar>(v: T) -> T {
    let c = T::from_f64(GELU_C);
    let s = T::from_f64(SQRT_2_OVER_PI);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (s * (v + c * v * v * v)).tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * s * (T::one() + three * c * v * v)
}

/// Per-row normalization statistics used by layer normalization.
pub struct LayerNormForward<T> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<LayerNormForward<T>> {
    let (m, n) = x.dims("layer_norm")?;
    for p in [gamma, beta] {
        let (pr, pc) = p.dims("layer_norm")?;
        if pr != 1 || pc != n {
            return Err(mismatch("layer_norm", x, p));
        }
    }
    let nf = T::from_f64(n as f64);
    let eps = T::from_f64(eps);
    let mut normalized = x.clone();
    let mut output = x.clone();
    let mut inv_std = Vec::with_capacity(m);
    for r in 0..m {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let nrow = normalized.row_mut(r);
        for (o, &v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let orow = output.row_mut(r);
        for c in 0..n {
            orow[c] = normalized.at(r, c) * gamma.data()[c] + beta.data()[c];
        }
    }
    Ok(LayerNormForward {
        output,
        normalized,
        inv_std,
    })
}

/// Indices of the `k` largest entries, ordered by descending value; ties go
/// to the lowest index.
pub fn top_k<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Values and indices of the top `k` entries of each row.
pub fn top_k_rows<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<(Vec<Vec<T>>, Vec<Vec<usize>>)> {
    let (m, n) = x.dims("top_k")?;
    if k == 0 || k > n {
        return Err(invalid("top_k", format!("k={k} out of range for {n} columns")));
    }
    let mut values = Vec::with_capacity(m);
    let mut indices = Vec::with_capacity(m);
    for r in 0..m {
        let row = x.row(r);
        let idx = top_k(row, k);
        values.push(idx.iter().map(|&i| row[i]).collect());
        indices.push(idx);
    }
    Ok((values, indices))
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims("mean")?;
    let mut out = vec![T::zero(); n];
    for r in 0..m {
        for (o, &v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let mf = T::from_f64(m as f64);
    for o in out.iter_mut() {
        *o /= mf;
    }
    Ok(Tensor::matrix(1, n, out))
}

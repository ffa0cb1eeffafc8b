//! Reference implementations written directly from the definitions, with
//! plain loops and no calls into the library's kernels.
#![allow(dead_code)]

pub mod fixtures;

use trafficmoe::init::Builder;
use trafficmoe::moe::SparseMoELayer;
use trafficmoe::tensor::{ParamStore, RngState, Tensor};

use rand::Rng;

pub fn random_matrix(rng: &mut RngState, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data)
}

pub fn moe_layer(
    seed: u64,
    dim: usize,
    hidden: usize,
    experts: usize,
    k: usize,
) -> (ParamStore<f64>, SparseMoELayer) {
    let mut store = ParamStore::new();
    let layer = {
        let mut b = Builder::new(&mut store, RngState::new(seed, 0));
        SparseMoELayer::build(&mut b, dim, hidden, experts, k).unwrap()
    };
    (store, layer)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `x·W + b` for one row.
fn affine_row(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| b.data()[j] + (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>())
        .collect()
}

/// Sparse routing weights by sorting: top-k indices (ties to the lower
/// index) and exp-normalized weights over them.
pub fn oracle_route(logits: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let chosen = &idx[..k];
    let m = chosen.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = chosen.iter().map(|&i| (logits[i] - m).exp()).sum();
    let mut w = vec![0.0; logits.len()];
    for &i in chosen {
        w[i] = (logits[i] - m).exp() / z;
    }
    w
}

pub fn oracle_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Evaluates every expert on every token, then masks with the sparse
/// routing weights.
pub fn dense_moe_oracle(store: &ParamStore<f64>, layer: &SparseMoELayer, z: &Tensor<f64>) -> Tensor<f64> {
    let (len, dim) = (z.shape()[0], z.shape()[1]);
    let gw = store.value(layer.gate.weight);
    let gb = store.value(layer.gate.bias);
    let mut out = vec![0.0; len * dim];
    for r in 0..len {
        let x = &z.data()[r * dim..(r + 1) * dim];
        let weights = oracle_route(&affine_row(x, gw, gb), layer.k);
        for (e, expert) in layer.experts.iter().enumerate() {
            let h: Vec<f64> = affine_row(x, store.value(expert.w1), store.value(expert.b1))
                .into_iter()
                .map(gelu)
                .collect();
            let y = affine_row(&h, store.value(expert.w2), store.value(expert.b2));
            for c in 0..dim {
                out[r * dim + c] += weights[e] * y[c];
            }
        }
    }
    Tensor::matrix(len, dim, out)
}

/// Cross-modal attention `softmax(F_h F_pᵀ / √D)` row by row.
pub fn oracle_interaction(fh: &Tensor<f64>, fp: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (lh, d) = (fh.shape()[0], fh.shape()[1]);
    let lp = fp.shape()[0];
    (0..lh)
        .map(|i| {
            let s: Vec<f64> = (0..lp)
                .map(|j| (0..d).map(|c| fh.data()[i * d + c] * fp.data()[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            oracle_softmax(&s)
        })
        .collect()
}

/// Shannon entropy of a probability vector, `-Σ p log(p + eps)`.
pub fn oracle_entropy(p: &[f64], eps: f64) -> f64 {
    -p.iter().map(|&v| v * (v + eps).ln()).sum::<f64>()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// Mean JS divergence over all unordered pairs.
pub fn mean_pairwise_js(dists: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            total += js_divergence(&dists[i], &dists[j]);
            n += 1;
        }
    }
    total / n as f64
}

//! Sequence blocks, Top-K sparse mixture-of-experts layers and the three
//! branch assemblies (header, payload, global).

mod attention;
mod layer;

pub use attention::SeqBlock;
pub(crate) use attention::LN_EPS;
pub use layer::{gate_logits, route, Expert, GateParams, MoeVars, SparseMoELayer};

use crate::init::Builder;
use crate::preprocess::VOCAB_SIZE;
use crate::tensor::{invalid, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

/// Materialized result of one MoE branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput<T> {
    pub features: Tensor<T>,
    pub routing_full: Tensor<T>,
    pub routing_sparse: Tensor<T>,
}

impl<T: Scalar> BranchOutput<T> {
    pub fn from_vars(tape: &Tape<'_, T>, vars: &MoeVars) -> Self {
        Self {
            features: tape.value(vars.features).clone(),
            routing_full: tape.value(vars.routing_full).clone(),
            routing_sparse: tape.value(vars.routing_sparse).clone(),
        }
    }
}

/// Dimensions shared by the blocks of one branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchDims {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub expert_hidden: usize,
    pub experts: usize,
    pub top_k: usize,
    pub max_len: usize,
    pub positional: bool,
}

/// Token branch: embedding lookup → SeqBlock → sparse MoE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBranch {
    pub embedding: ParamId,
    pub block: SeqBlock,
    pub moe: SparseMoELayer,
}

impl TokenBranch {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, d: &BranchDims) -> Result<Self> {
        Ok(Self {
            embedding: b.normal("embedding", VOCAB_SIZE, d.dim, 1.0)?,
            block: b.scope("block", |b| {
                SeqBlock::build(b, d.dim, d.heads, d.ffn_hidden, d.max_len, d.positional)
            })?,
            moe: b.scope("moe", |b| {
                SparseMoELayer::build(b, d.dim, d.expert_hidden, d.experts, d.top_k)
            })?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: &[u16]) -> Result<MoeVars> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(invalid("branch", format!("token id {bad} out of range")));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = tape.param(self.embedding);
        let x = tape.gather_rows(table, &idx)?;
        let z = self.block.forward(tape, x)?;
        self.moe.forward(tape, z)
    }
}

/// SeqBlock → sparse MoE over the fused sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalBranch {
    pub block: SeqBlock,
    pub moe: SparseMoELayer,
}

impl GlobalBranch {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, d: &BranchDims) -> Result<Self> {
        Ok(Self {
            block: b.scope("block", |b| {
                SeqBlock::build(b, d.dim, d.heads, d.ffn_hidden, d.max_len, d.positional)
            })?,
            moe: b.scope("moe", |b| {
                SparseMoELayer::build(b, d.dim, d.expert_hidden, d.experts, d.top_k)
            })?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, fused: Var) -> Result<MoeVars> {
        let z = self.block.forward(tape, fused)?;
        self.moe.forward(tape, z)
    }
}

/// Evaluates one MoE layer on a plain tensor.
pub fn moe_forward<T: Scalar>(
    store: &ParamStore<T>,
    layer: &SparseMoELayer,
    z: &Tensor<T>,
) -> Result<BranchOutput<T>> {
    let mut tape = Tape::with_params(store);
    let zv = tape.input(z.clone());
    let vars = layer.forward(&mut tape, zv)?;
    Ok(BranchOutput::from_vars(&tape, &vars))
}

/// Per-expert mean of `routing_full` over tokens.
pub fn routing_summary<T: Scalar>(out: &BranchOutput<T>) -> Vec<f64> {
    let full = &out.routing_full;
    let (rows, cols) = (full.rows(), full.cols());
    let mut r = vec![0.0; cols];
    for i in 0..rows {
        for (acc, v) in r.iter_mut().zip(full.row(i)) {
            *acc += v.as_f64();
        }
    }
    r.iter_mut().for_each(|v| *v /= rows as f64);
    r
}

/// Fraction of tokens whose highest-weight expert is each expert.
fn top1_fractions(selected: &[Vec<usize>], experts: usize) -> Vec<f64> {
    let mut f = vec![0.0; experts];
    for sel in selected {
        f[sel[0]] += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= selected.len() as f64);
    f
}

/// Switch-style balance term `coef · E · Σ_i f_i · P_i`, where `f_i` is the
/// top-1 share of expert `i` and `P_i` its mean routing probability.
pub fn load_balance_loss<T: Scalar>(out: &BranchOutput<T>, coefficient: f64) -> f64 {
    let e = out.routing_full.cols();
    let selected: Vec<Vec<usize>> = (0..out.routing_full.rows())
        .map(|r| crate::tensor::kernels::top_k(out.routing_full.row(r), 1))
        .collect();
    let f = top1_fractions(&selected, e);
    let p = routing_summary(out);
    coefficient * e as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Differentiable form of [`load_balance_loss`]; the shares are constants.
pub(crate) fn load_balance_var<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &MoeVars,
    coefficient: f64,
) -> Result<Var> {
    let e = tape.shape(vars.routing_full)[1];
    let f = top1_fractions(&vars.selected, e);
    let p = tape.mean(vars.routing_full, 0)?;
    let fv = tape.constant(Tensor::from_f64(1, e, &f));
    let prod = tape.mul(p, fv)?;
    let s = tape.sum_all(prod);
    Ok(tape.affine(s, coefficient * e as f64, 0.0))
}

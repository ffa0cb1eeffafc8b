//! Conditional aggregation: router statistics of both branches form a
//! context vector that sets a per-sample mixing weight α between the
//! projected header and payload features.

use crate::init::Builder;
use crate::moe::LN_EPS;
use crate::tensor::{invalid, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CAParams {
    /// `E×d_c` descriptor projections.
    pub wr_h: ParamId,
    pub wr_p: ParamId,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    /// `2d_c×2` logit map and its `1×2` bias.
    pub wc: ParamId,
    pub bc: ParamId,
    /// `D×D` feature projections.
    pub wf_h: ParamId,
    pub wf_p: ParamId,
}

impl CAParams {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        experts_h: usize,
        experts_p: usize,
        ctx_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            wr_h: b.xavier("wr_h", experts_h, ctx_dim)?,
            wr_p: b.xavier("wr_p", experts_p, ctx_dim)?,
            norm_gamma: b.constant("norm.gamma", 1, 2 * ctx_dim, 1.0)?,
            norm_beta: b.zeros("norm.beta", 1, 2 * ctx_dim)?,
            wc: b.xavier("wc", 2 * ctx_dim, 2)?,
            bc: b.zeros("bc", 1, 2)?,
            wf_h: b.identity("wf_h", dim)?,
            wf_p: b.identity("wf_p", dim)?,
        })
    }
}

/// `c = LayerNorm([r_h·W_h ; r_p·W_p])` as a `1×2d_c` row.
pub fn encode_context_var<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &CAParams,
    r_h: Var,
    r_p: Var,
) -> Result<Var> {
    let wr_h = tape.param(params.wr_h);
    let wr_p = tape.param(params.wr_p);
    let c_h = tape.matmul(r_h, wr_h)?;
    let c_p = tape.matmul(r_p, wr_p)?;
    let c = tape.concat(&[c_h, c_p], 1)?;
    let g = tape.param(params.norm_gamma);
    let b = tape.param(params.norm_beta);
    tape.layer_norm(c, g, b, LN_EPS)
}

/// First component of the two-way softmax of `c·W_c + b_c`, as `1×1`.
pub fn fusion_weight_var<T: Scalar>(tape: &mut Tape<'_, T>, params: &CAParams, c: Var) -> Result<Var> {
    let wc = tape.param(params.wc);
    let bc = tape.param(params.bc);
    let logits = tape.matmul(c, wc)?;
    let logits = tape.add_bias(logits, bc)?;
    let probs = tape.softmax(logits)?;
    tape.slice(probs, 1, 0, 1)
}

/// `[α·(F_ph·W_h) ; (1−α)·(F_pp·W_p)]` stacked along the sequence axis.
pub fn aggregate_var<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &CAParams,
    f_ph: Var,
    f_pp: Var,
    alpha: Var,
) -> Result<Var> {
    let wf_h = tape.param(params.wf_h);
    let wf_p = tape.param(params.wf_p);
    let h = tape.matmul(f_ph, wf_h)?;
    let p = tape.matmul(f_pp, wf_p)?;
    let beta = tape.affine(alpha, -1.0, 1.0);
    let h = tape.scale_by(h, alpha)?;
    let p = tape.scale_by(p, beta)?;
    tape.concat(&[h, p], 0)
}

/// Fused sequence plus the header/payload boundary row.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSequence<T> {
    pub features: Tensor<T>,
    pub boundary: usize,
}

fn check_probability(op: &'static str, r: &[f64]) -> Result<()> {
    let s: f64 = r.iter().sum();
    if r.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-4 {
        return Err(invalid(op, format!("not a probability vector (sum {s})")));
    }
    Ok(())
}

pub fn encode_context<T: Scalar>(
    store: &ParamStore<T>,
    params: &CAParams,
    r_h: &[f64],
    r_p: &[f64],
) -> Result<Vec<f64>> {
    check_probability("encode_context", r_h)?;
    check_probability("encode_context", r_p)?;
    let mut tape = Tape::with_params(store);
    let a = tape.input(Tensor::from_f64(1, r_h.len(), r_h));
    let b = tape.input(Tensor::from_f64(1, r_p.len(), r_p));
    let c = encode_context_var(&mut tape, params, a, b)?;
    Ok(tape.value(c).to_f64_vec())
}

pub fn fusion_weights<T: Scalar>(store: &ParamStore<T>, params: &CAParams, c: &[f64]) -> Result<f64> {
    let mut tape = Tape::with_params(store);
    let cv = tape.input(Tensor::from_f64(1, c.len(), c));
    let a = fusion_weight_var(&mut tape, params, cv)?;
    Ok(tape.value(a).item().as_f64())
}

pub fn aggregate<T: Scalar>(
    store: &ParamStore<T>,
    params: &CAParams,
    f_ph: &Tensor<T>,
    f_pp: &Tensor<T>,
    alpha: f64,
) -> Result<AggregatedSequence<T>> {
    let mut tape = Tape::with_params(store);
    let h = tape.input(f_ph.clone());
    let p = tape.input(f_pp.clone());
    let a = tape.input(Tensor::scalar(T::from_f64(alpha)));
    let out = aggregate_var(&mut tape, params, h, p, a)?;
    Ok(AggregatedSequence {
        features: tape.value(out).clone(),
        boundary: f_ph.rows(),
    })
}

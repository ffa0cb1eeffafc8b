//! Uncertainty-aware filtering: tokens whose cross-modal attention is
//! diffuse get small gates and are damped before fusion.

use crate::init::Builder;
use crate::tensor::{ParamId, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Stabilizer inside `log(A + ε)`.
pub const ENTROPY_EPS: f64 = 1e-8;

/// Learnable `(w, b)` per modality. With `shared`, both modalities use the
/// header pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterParams {
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub w_p: ParamId,
    pub b_p: ParamId,
}

impl FilterParams {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        header_len: usize,
        payload_len: usize,
        shared: bool,
    ) -> Result<Self> {
        let w_h = b.constant("w_h", 1, 1, -1.0)?;
        let b_h = b.constant("b_h", 1, 1, (payload_len as f64).ln())?;
        if shared {
            return Ok(Self {
                w_h,
                b_h,
                w_p: w_h,
                b_p: b_h,
            });
        }
        Ok(Self {
            w_h,
            b_h,
            w_p: b.constant("w_p", 1, 1, -1.0)?,
            b_p: b.constant("b_p", 1, 1, (header_len as f64).ln())?,
        })
    }
}

/// Tape handles produced by [`filter_forward`].
#[derive(Debug, Clone, Copy)]
pub struct FilterVars {
    pub interaction: Var,
    /// `L_h×1`
    pub entropy_h: Var,
    /// `L_p×1`
    pub entropy_p: Var,
    pub gate_h: Var,
    pub gate_p: Var,
    pub purified_h: Var,
    pub purified_p: Var,
}

fn interaction_var<T: Scalar>(tape: &mut Tape<'_, T>, fh: Var, fp: Var) -> Result<Var> {
    let d = tape.shape(fh)[1];
    if tape.shape(fp)[1] != d {
        return Err(TensorError::ShapeMismatch {
            op: "cross_modal_interaction",
            left: tape.shape(fh).to_vec(),
            right: tape.shape(fp).to_vec(),
        });
    }
    let s = tape.matmul_nt(fh, fp)?;
    let s = tape.affine(s, 1.0 / (d as f64).sqrt(), 0.0);
    tape.softmax(s)
}

/// Row entropies (`L_h×1`) and raw-column entropies (`L_p×1`) of `A`.
fn entropy_vars<T: Scalar>(tape: &mut Tape<'_, T>, a: Var) -> Result<(Var, Var)> {
    let shifted = tape.affine(a, 1.0, ENTROPY_EPS);
    let log = tape.log(shifted);
    let plogp = tape.mul(a, log)?;
    let rows = tape.sum(plogp, 1)?;
    let h_h = tape.affine(rows, -1.0, 0.0);
    let cols = tape.sum(plogp, 0)?;
    let cols = tape.transpose(cols)?;
    let h_p = tape.affine(cols, -1.0, 0.0);
    Ok((h_h, h_p))
}

fn gate_var<T: Scalar>(tape: &mut Tape<'_, T>, h: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.scale_by(h, w)?;
    let z = tape.add_scalar(z, b)?;
    Ok(tape.sigmoid(z))
}

pub fn filter_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &FilterParams,
    fh: Var,
    fp: Var,
) -> Result<FilterVars> {
    let interaction = interaction_var(tape, fh, fp)?;
    let (entropy_h, entropy_p) = entropy_vars(tape, interaction)?;
    let (w_h, b_h) = (tape.param(params.w_h), tape.param(params.b_h));
    let (w_p, b_p) = (tape.param(params.w_p), tape.param(params.b_p));
    let gate_h = gate_var(tape, entropy_h, w_h, b_h)?;
    let gate_p = gate_var(tape, entropy_p, w_p, b_p)?;
    let purified_h = tape.scale_rows(fh, gate_h)?;
    let purified_p = tape.scale_rows(fp, gate_p)?;
    Ok(FilterVars {
        interaction,
        entropy_h,
        entropy_p,
        gate_h,
        gate_p,
        purified_h,
        purified_p,
    })
}

/// `softmax(F_h·F_pᵀ / √D)` row-wise.
pub fn cross_modal_interaction<T: Scalar>(fh: &Tensor<T>, fp: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (a, b) = (tape.input(fh.clone()), tape.input(fp.clone()));
    let v = interaction_var(&mut tape, a, b)?;
    Ok(tape.value(v).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyVectors {
    pub header: Vec<f64>,
    pub payload: Vec<f64>,
}

pub fn token_entropy<T: Scalar>(a: &Tensor<T>) -> Result<EntropyVectors> {
    let mut tape = Tape::new();
    let av = tape.input(a.clone());
    let (h, p) = entropy_vars(&mut tape, av)?;
    Ok(EntropyVectors {
        header: tape.value(h).to_f64_vec(),
        payload: tape.value(p).to_f64_vec(),
    })
}

/// `σ(w·H + b)` elementwise.
pub fn filter_weights(entropy: &[f64], w: f64, b: f64) -> Vec<f64> {
    entropy
        .iter()
        .map(|&h| crate::tensor::kernels::sigmoid(w * h + b))
        .collect()
}

/// Scales row `ℓ` of `features` by `gates[ℓ]`.
pub fn purify<T: Scalar>(features: &Tensor<T>, gates: &[f64]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let f = tape.input(features.clone());
    let g = tape.input(Tensor::from_f64(gates.len(), 1, gates));
    let out = tape.scale_rows(f, g)?;
    Ok(tape.value(out).clone())
}

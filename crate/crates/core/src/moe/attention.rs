use crate::init::Builder;
use crate::tensor::{invalid, ParamId, Result, Scalar, Tape, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
/// An optional learned positional table is added to the input first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBlock {
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    positional: Option<ParamId>,
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl SeqBlock {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        max_len: usize,
        positional: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid("SeqBlock", format!("dim {dim} not divisible by {heads} heads")));
        }
        let positional = if positional {
            Some(b.normal("pos", max_len, dim, 0.1)?)
        } else {
            None
        };
        Ok(Self {
            dim,
            heads,
            max_len,
            positional,
            ln1: (b.constant("ln1.gamma", 1, dim, 1.0)?, b.zeros("ln1.beta", 1, dim)?),
            wq: b.xavier("attn.wq", dim, dim)?,
            wk: b.xavier("attn.wk", dim, dim)?,
            wv: b.xavier("attn.wv", dim, dim)?,
            wo: b.xavier("attn.wo", dim, dim)?,
            bo: b.zeros("attn.bo", 1, dim)?,
            ln2: (b.constant("ln2.gamma", 1, dim, 1.0)?, b.zeros("ln2.beta", 1, dim)?),
            w1: b.xavier("ffn.w1", dim, ffn_hidden)?,
            b1: b.zeros("ffn.b1", 1, ffn_hidden)?,
            w2: b.xavier("ffn.w2", ffn_hidden, dim)?,
            b2: b.zeros("ffn.b2", 1, dim)?,
        })
    }

    pub fn has_positional(&self) -> bool {
        self.positional.is_some()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let len = tape.shape(x)[0];
        let mut x = x;
        if let Some(pos) = self.positional {
            if len > self.max_len {
                return Err(invalid(
                    "SeqBlock",
                    format!("sequence of {len} exceeds positional table of {}", self.max_len),
                ));
            }
            let table = tape.param(pos);
            let p = tape.slice(table, 0, 0, len)?;
            x = tape.add(x, p)?;
        }

        let (g1, b1) = (tape.param(self.ln1.0), tape.param(self.ln1.1));
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let attn = self.attention(tape, h)?;
        let x = tape.add(x, attn)?;

        let (g2, b2) = (tape.param(self.ln2.0), tape.param(self.ln2.1));
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let w1 = tape.param(self.w1);
        let bias1 = tape.param(self.b1);
        let w2 = tape.param(self.w2);
        let bias2 = tape.param(self.b2);
        let f = tape.matmul(h, w1)?;
        let f = tape.add_bias(f, bias1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_bias(f, bias2)?;
        tape.add(x, f)
    }

    fn attention<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Var> {
        let wq = tape.param(self.wq);
        let wk = tape.param(self.wk);
        let wv = tape.param(self.wv);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let (s, e) = (i * hd, (i + 1) * hd);
            let qi = tape.slice(q, 1, s, e)?;
            let ki = tape.slice(k, 1, s, e)?;
            let vi = tape.slice(v, 1, s, e)?;
            let scores = tape.matmul_nt(qi, ki)?;
            let scores = tape.affine(scores, scale, 0.0);
            let a = tape.softmax(scores)?;
            outs.push(tape.matmul(a, vi)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        let wo = tape.param(self.wo);
        let bo = tape.param(self.bo);
        let o = tape.matmul(o, wo)?;
        tape.add_bias(o, bo)
    }
}

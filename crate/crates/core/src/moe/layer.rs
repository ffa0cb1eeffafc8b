use crate::init::Builder;
use crate::tensor::{invalid, kernels, ParamId, Result, Scalar, Tape, Tensor, Var};

/// Linear router `Z·W_g + b`, with `b` shared across positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Position-wise `D → hidden → D` network with GELU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Expert {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        tape.add_bias(h, b2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMoELayer {
    pub gate: GateParams,
    pub experts: Vec<Expert>,
    pub k: usize,
}

/// Tape handles for one MoE evaluation.
#[derive(Debug, Clone)]
pub struct MoeVars {
    pub features: Var,
    pub logits: Var,
    pub routing_full: Var,
    pub routing_sparse: Var,
    /// Selected experts per token, highest weight first.
    pub selected: Vec<Vec<usize>>,
}

impl SparseMoELayer {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        dim: usize,
        hidden: usize,
        experts: usize,
        k: usize,
    ) -> Result<Self> {
        if k == 0 || k > experts {
            return Err(invalid("SparseMoELayer", format!("need 1 ≤ K ≤ E, got K={k}, E={experts}")));
        }
        let gate = GateParams {
            weight: b.xavier("gate.weight", dim, experts)?,
            bias: b.zeros("gate.bias", 1, experts)?,
        };
        let experts = (0..experts)
            .map(|i| {
                b.scope(&format!("expert{i}"), |b| {
                    Ok(Expert {
                        w1: b.xavier("w1", dim, hidden)?,
                        b1: b.zeros("b1", 1, hidden)?,
                        w2: b.xavier("w2", hidden, dim)?,
                        b2: b.zeros("b2", 1, dim)?,
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { gate, experts, k })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<MoeVars> {
        let (len, _) = tape.value(z).dims("moe_forward")?;
        let w = tape.param(self.gate.weight);
        let b = tape.param(self.gate.bias);
        let logits = tape.matmul(z, w)?;
        let logits = tape.add_bias(logits, b)?;
        let routing_full = tape.softmax(logits)?;
        let (routing_sparse, selected) = tape.topk_softmax(logits, self.k)?;

        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..len).filter(|&r| selected[r].contains(&e)).collect();
            if rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(z, &rows)?;
            let y = expert.forward(tape, x)?;
            let col = tape.slice(routing_sparse, 1, e, e + 1)?;
            let weight = tape.gather_rows(col, &rows)?;
            let y = tape.scale_rows(y, weight)?;
            let y = tape.scatter_rows(y, &rows, len)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, y)?,
                None => y,
            });
        }
        let features = out.ok_or_else(|| invalid("moe_forward", "no expert selected"))?;
        Ok(MoeVars {
            features,
            logits,
            routing_full,
            routing_sparse,
            selected,
        })
    }
}

/// `Z·W_g + b` broadcast over rows.
pub fn gate_logits<T: Scalar>(z: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::add_bias(&kernels::matmul(z, weight)?, bias)
}

/// Top-`k` experts of one logit row (ties to the lower index) and their
/// softmax weights renormalized over the selection; zeros elsewhere.
pub fn route<T: Scalar>(logits: &[T], k: usize) -> (Vec<usize>, Vec<T>) {
    let selected = kernels::top_k(logits, k);
    let mut vals: Vec<T> = selected.iter().map(|&i| logits[i]).collect();
    kernels::softmax_in_place(&mut vals);
    let mut weights = vec![T::zero(); logits.len()];
    for (&i, &v) in selected.iter().zip(&vals) {
        weights[i] = v;
    }
    (selected, weights)
}

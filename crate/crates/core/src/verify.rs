//! Finite-difference gradient checks over every layer of the network.

use rand::Rng;

use crate::aggregation::{aggregate_var, encode_context_var, fusion_weight_var, CAParams};
use crate::filter::{filter_forward, FilterParams};
use crate::init::Builder;
use crate::model::{
    apply_mask, MaskingPlan, ModelConfig, ModelError, TrafficMoE,
};
use crate::moe::{BranchDims, GlobalBranch, SeqBlock, SparseMoELayer, TokenBranch};
use crate::preprocess::TokenizedFlow;
use crate::tensor::{
    check_gradients, GradCheckReport, ParamStore, RngState, Tape, Tensor, TensorError, Var,
};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed(GRADCHECK_TOLERANCE)
    }
}

fn random_matrix(rng: &mut RngState, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data)
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(tape: &mut Tape<'_, f64>, y: Var, r: &Tensor<f64>) -> Result<Var, TensorError> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv)?;
    Ok(tape.sum_all(prod))
}

fn run<F>(name: &'static str, store: &ParamStore<f64>, loss: F) -> Result<CheckOutcome, ModelError>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, ModelError>,
{
    let report = check_gradients(store, GRADCHECK_STEP, loss)?;
    Ok(CheckOutcome { name, report })
}

fn dims(dim: usize, experts: usize, k: usize, max_len: usize) -> BranchDims {
    BranchDims {
        dim,
        heads: 2,
        ffn_hidden: 2 * dim,
        expert_hidden: 2 * dim,
        experts,
        top_k: k,
        max_len,
        positional: true,
    }
}

fn layer_checks(seed: u64) -> Result<Vec<CheckOutcome>, ModelError> {
    let mut rng = RngState::new(seed, 0x6C4E);
    let (len, d) = (6, 8);
    let x = random_matrix(&mut rng, len, d, 1.0);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let layer = {
        let mut b = Builder::new(&mut store, RngState::new(seed, 1));
        SparseMoELayer::build(&mut b, d, 2 * d, 3, 2)?
    };
    let r_e = random_matrix(&mut rng, len, 3, 1.0);
    let r_d = random_matrix(&mut rng, len, d, 1.0 / (len * d) as f64);
    let mut only_gate = ParamStore::new();
    only_gate.add("gate.weight", store.value(layer.gate.weight).clone())?;
    only_gate.add("gate.bias", store.value(layer.gate.bias).clone())?;
    let gate_ids = (only_gate.id("gate.weight").unwrap(), only_gate.id("gate.bias").unwrap());
    out.push(run("gate", &only_gate, |t| {
        let z = t.input(x.clone());
        let (w, b) = (t.param(gate_ids.0), t.param(gate_ids.1));
        let g = t.matmul(z, w)?;
        let g = t.add_bias(g, b)?;
        let (s, _) = t.topk_softmax(g, 2)?;
        Ok(project(t, s, &r_e)?)
    })?);
    out.push(run("expert", &store, |t| {
        let z = t.input(x.clone());
        let y = layer.experts[0].forward(t, z)?;
        Ok(project(t, y, &r_d)?)
    })?);
    out.push(run("moe_layer", &store, |t| {
        let z = t.input(x.clone());
        let v = layer.forward(t, z)?;
        Ok(project(t, v.features, &r_d)?)
    })?);

    let mut store = ParamStore::new();
    let block = {
        let mut b = Builder::new(&mut store, RngState::new(seed, 2));
        SeqBlock::build(&mut b, d, 2, 2 * d, len, true)?
    };
    out.push(run("attention", &store, |t| {
        let z = t.input(x.clone());
        let y = block.forward(t, z)?;
        Ok(project(t, y, &r_d)?)
    })?);

    let mut store = ParamStore::new();
    let branch = {
        let mut b = Builder::new(&mut store, RngState::new(seed, 3));
        TokenBranch::build(&mut b, &dims(d, 3, 2, len))?
    };
    let tokens: Vec<u16> = (0..len).map(|_| rng.gen_range(0..258)).collect();
    out.push(run("token_branch", &store, |t| {
        let v = branch.forward(t, &tokens)?;
        Ok(project(t, v.features, &r_d)?)
    })?);

    let (lh, lp) = (5, 4);
    let fh = random_matrix(&mut rng, lh, d, 1.0);
    let fp = random_matrix(&mut rng, lp, d, 1.0);
    let r_h = random_matrix(&mut rng, lh, d, 0.1);
    let r_p = random_matrix(&mut rng, lp, d, 0.1);
    let mut store = ParamStore::new();
    let filter = {
        let mut b = Builder::new(&mut store, RngState::new(seed, 4));
        FilterParams::build(&mut b, lh, lp, false)?
    };
    // Features enter as parameters so their gradients are checked too.
    let fh_id = store.add("input.fh", fh.clone())?;
    let fp_id = store.add("input.fp", fp.clone())?;
    out.push(run("uncertainty_filter", &store, |t| {
        let (a, b) = (t.param(fh_id), t.param(fp_id));
        let f = filter_forward(t, &filter, a, b)?;
        let lh_ = project(t, f.purified_h, &r_h)?;
        let lp_ = project(t, f.purified_p, &r_p)?;
        Ok(t.add(lh_, lp_)?)
    })?);

    let e = 3;
    let mut store = ParamStore::new();
    let ca = {
        let mut b = Builder::new(&mut store, RngState::new(seed, 5));
        CAParams::build(&mut b, e, e, 4, d)?
    };
    let logits_h = random_matrix(&mut rng, lh, e, 1.0);
    let logits_p = random_matrix(&mut rng, lp, e, 1.0);
    let gh_id = store.add("input.routing_logits_h", logits_h)?;
    let gp_id = store.add("input.routing_logits_p", logits_p)?;
    let fh_id = store.add("input.fh", fh.clone())?;
    let fp_id = store.add("input.fp", fp.clone())?;
    let r_agg = random_matrix(&mut rng, lh + lp, d, 0.1);
    out.push(run("conditional_aggregation", &store, |t| {
        let gh = t.param(gh_id);
        let gp = t.param(gp_id);
        let rh = t.softmax(gh)?;
        let rp = t.softmax(gp)?;
        let mh = t.mean(rh, 0)?;
        let mp = t.mean(rp, 0)?;
        let c = encode_context_var(t, &ca, mh, mp)?;
        let alpha = fusion_weight_var(t, &ca, c)?;
        let (a, b) = (t.param(fh_id), t.param(fp_id));
        let agg = aggregate_var(t, &ca, a, b, alpha)?;
        Ok(project(t, agg, &r_agg)?)
    })?);

    let mut store = ParamStore::new();
    let global = {
        let mut b = Builder::new(&mut store, RngState::new(seed, 6));
        GlobalBranch::build(&mut b, &dims(d, 3, 2, len))?
    };
    out.push(run("global_branch", &store, |t| {
        let z = t.input(x.clone());
        let v = global.forward(t, z)?;
        Ok(project(t, v.features, &r_d)?)
    })?);
    Ok(out)
}

/// Configuration of the end-to-end micro model.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        packets: 2,
        header_bytes: 4,
        payload_bytes: 4,
        dim: 8,
        heads: 2,
        experts: 2,
        top_k: 1,
        expert_hidden: 8,
        ffn_hidden: 8,
        ctx_dim: 4,
        classes: 2,
        ..ModelConfig::default()
    }
}

fn model_checks(seed: u64) -> Result<Vec<CheckOutcome>, ModelError> {
    let model = TrafficMoE::<f64>::new(micro_config(), seed)?;
    let cfg = model.config().clone();
    let mut rng = RngState::new(seed, 0x3D);
    let flow = TokenizedFlow {
        header_tokens: (0..cfg.header_len()).map(|_| rng.gen_range(0..256)).collect(),
        payload_tokens: (0..cfg.payload_len()).map(|_| rng.gen_range(0..256)).collect(),
        label: Some(1),
    };
    let plan = MaskingPlan::with_ratio(0.25);
    let mh = apply_mask(&flow.header_tokens, &plan, &mut rng);
    let mp = apply_mask(&flow.payload_tokens, &plan, &mut rng);
    let store = model.params();
    let pre = run("end_to_end_mlm", store, |t| model.mlm_loss(t, &mh, &mp))?;
    let cls = run("end_to_end_classification", store, |t| model.cls_loss(t, &flow, 1))?;
    Ok(vec![pre, cls])
}

/// Every layer check followed by the two end-to-end checks.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>, ModelError> {
    let mut out = layer_checks(seed)?;
    out.extend(model_checks(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for c in gradient_suite(7).unwrap() {
            let (rel, worst) = (c.report.max_rel_error(), c.report.worst());
            println!("{:<28} {:.3e} {:?}", c.name, rel, worst);
            assert!(c.passed(), "{} failed: {:?}", c.name, c.report);
        }
    }
}

//! The full classifier: modality branches, filtering, aggregation, the
//! global branch, masked-token heads and the class head; plus training,
//! evaluation and checkpoints.

mod checkpoint;
mod masking;
mod metrics;
mod train;

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate_var, encode_context_var, fusion_weight_var, CAParams};
use crate::filter::{filter_forward, FilterParams, FilterVars};
use crate::init::Builder;
use crate::moe::{self, BranchDims, BranchOutput, GlobalBranch, MoeVars, TokenBranch};
use crate::preprocess::{TokenizedFlow, VOCAB_SIZE};
use crate::tensor::{kernels, ParamId, ParamStore, RngState, Scalar, Tape, Tensor, TensorError, Var};

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use masking::{apply_mask, MaskedSequence, MaskingPlan};
pub use metrics::Metrics;
pub use train::{
    train_finetune, train_finetune_with, train_pretrain, train_pretrain_with, EpochRecord,
    Precision, TrainConfig, TrainLog,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {0} outside vocabulary")]
    TokenOutOfRange(u16),
    #[error("{modality} sequence has {got} tokens, model expects {expected}")]
    LengthMismatch {
        modality: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("model has no classifier head")]
    MissingClassifier,
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("sample {0} has no label")]
    MissingLabel(usize),
    #[error("no masked positions to score")]
    EmptyMaskSet,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Both,
    HeaderOnly,
    PayloadOnly,
}

/// Which sequence the class head pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Global,
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub packets: usize,
    pub header_bytes: usize,
    pub payload_bytes: usize,
    pub dim: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub ffn_hidden: usize,
    pub ctx_dim: usize,
    /// Number of classes; 0 builds a model without a class head.
    pub classes: usize,
    pub positional: bool,
    pub modality: Modality,
    /// One shared branch (embedding, attention, experts) processes the
    /// concatenated header and payload tokens.
    pub homogeneous: bool,
    pub use_filter: bool,
    pub use_aggregation: bool,
    /// Both modalities share one filter `(w, b)` pair.
    pub shared_filter: bool,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            packets: 5,
            header_bytes: 32,
            payload_bytes: 32,
            dim: 64,
            heads: 4,
            experts: 8,
            top_k: 2,
            expert_hidden: 128,
            ffn_hidden: 128,
            ctx_dim: 16,
            classes: 0,
            positional: true,
            modality: Modality::Both,
            homogeneous: false,
            use_filter: true,
            use_aggregation: true,
            shared_filter: false,
            pooling: Pooling::Global,
        }
    }
}

impl ModelConfig {
    pub fn header_len(&self) -> usize {
        self.packets * self.header_bytes
    }

    pub fn payload_len(&self) -> usize {
        self.packets * self.payload_bytes
    }

    /// Rows of the fused sequence fed to the global branch.
    pub fn fused_len(&self) -> usize {
        match self.modality {
            Modality::Both => self.header_len() + self.payload_len(),
            Modality::HeaderOnly => self.header_len(),
            Modality::PayloadOnly => self.payload_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.header_len() == 0 || self.payload_len() == 0 {
            return bad("sequence lengths must be positive".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return bad(format!("need 1 ≤ top_k ≤ experts, got {} and {}", self.top_k, self.experts));
        }
        if self.expert_hidden == 0 || self.ffn_hidden == 0 || self.ctx_dim == 0 {
            return bad("hidden sizes must be positive".into());
        }
        Ok(())
    }

    fn dims(&self, max_len: usize) -> BranchDims {
        BranchDims {
            dim: self.dim,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            expert_hidden: self.expert_hidden,
            experts: self.experts,
            top_k: self.top_k,
            max_len,
            positional: self.positional,
        }
    }
}

/// Parameter handles of every sub-module present in a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub header: Option<TokenBranch>,
    pub payload: Option<TokenBranch>,
    pub filter: Option<FilterParams>,
    pub aggregation: Option<CAParams>,
    pub global: GlobalBranch,
    pub mlm_bias_h: Option<ParamId>,
    pub mlm_bias_p: Option<ParamId>,
    pub classifier: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct TrafficMoE<T> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<T>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub header: Option<MoeVars>,
    pub payload: Option<MoeVars>,
    pub filter: Option<FilterVars>,
    pub alpha: Option<Var>,
    pub fused: Var,
    pub global: MoeVars,
    /// Rows of the fused/global sequence holding header and payload tokens.
    pub header_rows: Option<Range<usize>>,
    pub payload_rows: Option<Range<usize>>,
}

/// Everything telemetry needs from one sample.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub header: Option<BranchOutput<f64>>,
    pub payload: Option<BranchOutput<f64>>,
    pub global: BranchOutput<f64>,
    pub filter: Option<FilterTrace>,
    pub alpha: Option<f64>,
    pub probabilities: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FilterTrace {
    pub entropy_h: Vec<f64>,
    pub entropy_p: Vec<f64>,
    pub gate_h: Vec<f64>,
    pub gate_p: Vec<f64>,
    pub pre_norm_h: Vec<f64>,
    pub pre_norm_p: Vec<f64>,
    pub post_norm_h: Vec<f64>,
    pub post_norm_p: Vec<f64>,
}

fn row_norms<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Rows `start..end` of every per-token output of a branch.
fn split_rows<T: Scalar>(tape: &mut Tape<'_, T>, v: &MoeVars, start: usize, end: usize) -> Result<MoeVars> {
    Ok(MoeVars {
        features: tape.slice(v.features, 0, start, end)?,
        logits: tape.slice(v.logits, 0, start, end)?,
        routing_full: tape.slice(v.routing_full, 0, start, end)?,
        routing_sparse: tape.slice(v.routing_sparse, 0, start, end)?,
        selected: v.selected[start..end].to_vec(),
    })
}

const INIT_STREAM: u64 = 0x1417;
const CLASSIFIER_STREAM: u64 = 0xC1A5;

impl<T: Scalar> TrafficMoE<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = {
            let mut b = Builder::new(&mut params, RngState::new(seed, INIT_STREAM));
            let (lh, lp) = (config.header_len(), config.payload_len());
            let want_h = config.modality != Modality::PayloadOnly;
            let want_p = config.modality != Modality::HeaderOnly;
            let mixed = config.homogeneous && want_h && want_p;
            let header = if want_h || config.homogeneous {
                let len = if mixed { lh + lp } else if want_h { lh } else { lp };
                Some(b.scope("header", |b| TokenBranch::build(b, &config.dims(len)))?)
            } else {
                None
            };
            let payload = if !want_p {
                None
            } else if config.homogeneous {
                header.clone()
            } else {
                Some(b.scope("payload", |b| TokenBranch::build(b, &config.dims(lp)))?)
            };
            let header = if want_h { header } else { None };
            let both = config.modality == Modality::Both;
            let filter = if both && config.use_filter {
                Some(b.scope("filter", |b| FilterParams::build(b, lh, lp, config.shared_filter))?)
            } else {
                None
            };
            let aggregation = if both {
                Some(b.scope("aggregation", |b| {
                    CAParams::build(b, config.experts, config.experts, config.ctx_dim, config.dim)
                })?)
            } else {
                None
            };
            let global =
                b.scope("global", |b| GlobalBranch::build(b, &config.dims(config.fused_len())))?;
            let mlm_bias_h = if want_h { Some(b.zeros("mlm.bias_h", 1, VOCAB_SIZE)?) } else { None };
            let mlm_bias_p = if want_p { Some(b.zeros("mlm.bias_p", 1, VOCAB_SIZE)?) } else { None };
            Layout {
                header,
                payload,
                filter,
                aggregation,
                global,
                mlm_bias_h,
                mlm_bias_p,
                classifier: None,
            }
        };
        let mut model = Self {
            config,
            layout,
            params,
        };
        if model.config.classes > 0 {
            let c = model.config.classes;
            model.config.classes = 0;
            model.attach_classifier(c, seed)?;
        }
        Ok(model)
    }

    /// Adds a fresh `D×C` class head (replacing the class count).
    pub fn attach_classifier(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes == 0 {
            return Err(ModelError::InvalidConfig("classes must be positive".into()));
        }
        if self.layout.classifier.is_some() {
            if self.config.classes == classes {
                return Ok(());
            }
            return Err(ModelError::InvalidConfig(format!(
                "classifier already attached with {} classes",
                self.config.classes
            )));
        }
        let mut b = Builder::new(&mut self.params, RngState::new(seed, CLASSIFIER_STREAM));
        self.layout.classifier = Some(b.xavier("classifier.weight", self.config.dim, classes)?);
        self.config.classes = classes;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> TrafficMoE<U> {
        TrafficMoE {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    fn check_tokens(&self, modality: &'static str, tokens: &[u16], expected: usize) -> Result<()> {
        if tokens.len() != expected {
            return Err(ModelError::LengthMismatch {
                modality,
                expected,
                got: tokens.len(),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(ModelError::TokenOutOfRange(bad));
        }
        Ok(())
    }

    /// Records the full pipeline on `tape`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, header: &[u16], payload: &[u16]) -> Result<ForwardVars> {
        let cfg = &self.config;
        let mixed = cfg.homogeneous && cfg.modality == Modality::Both;
        let (h, p) = if mixed {
            self.check_tokens("header", header, cfg.header_len())?;
            self.check_tokens("payload", payload, cfg.payload_len())?;
            let branch = self.layout.header.as_ref().expect("shared branch");
            let tokens: Vec<u16> = header.iter().chain(payload).copied().collect();
            let joint = branch.forward(tape, &tokens)?;
            let lh = cfg.header_len();
            let hv = split_rows(tape, &joint, 0, lh)?;
            let pv = split_rows(tape, &joint, lh, tokens.len())?;
            (Some(hv), Some(pv))
        } else {
            self.separate_branches(tape, header, payload)?
        };

        let (fused, filter, alpha, header_rows, payload_rows) = match (&h, &p) {
            (Some(hv), Some(pv)) => {
                let filter = match &self.layout.filter {
                    Some(fp) => Some(filter_forward(tape, fp, hv.features, pv.features)?),
                    None => None,
                };
                let (f_ph, f_pp) = match &filter {
                    Some(f) => (f.purified_h, f.purified_p),
                    None => (hv.features, pv.features),
                };
                let ca = self.layout.aggregation.as_ref().expect("both modalities");
                let alpha = if cfg.use_aggregation {
                    let r_h = tape.mean(hv.routing_full, 0)?;
                    let r_p = tape.mean(pv.routing_full, 0)?;
                    let c = encode_context_var(tape, ca, r_h, r_p)?;
                    fusion_weight_var(tape, ca, c)?
                } else {
                    tape.constant(Tensor::scalar(T::from_f64(0.5)))
                };
                let fused = aggregate_var(tape, ca, f_ph, f_pp, alpha)?;
                let lh = cfg.header_len();
                (fused, filter, Some(alpha), Some(0..lh), Some(lh..lh + cfg.payload_len()))
            }
            (Some(hv), None) => (hv.features, None, None, Some(0..cfg.header_len()), None),
            (None, Some(pv)) => (pv.features, None, None, None, Some(0..cfg.payload_len())),
            (None, None) => unreachable!("at least one modality"),
        };
        let global = self.layout.global.forward(tape, fused)?;
        Ok(ForwardVars {
            header: h,
            payload: p,
            filter,
            alpha,
            fused,
            global,
            header_rows,
            payload_rows,
        })
    }

    fn separate_branches(
        &self,
        tape: &mut Tape<'_, T>,
        header: &[u16],
        payload: &[u16],
    ) -> Result<(Option<MoeVars>, Option<MoeVars>)> {
        let cfg = &self.config;
        let h = match &self.layout.header {
            Some(branch) => {
                self.check_tokens("header", header, cfg.header_len())?;
                Some(branch.forward(tape, header)?)
            }
            None => None,
        };
        let p = match &self.layout.payload {
            Some(branch) => {
                self.check_tokens("payload", payload, cfg.payload_len())?;
                Some(branch.forward(tape, payload)?)
            }
            None => None,
        };
        Ok((h, p))
    }

    fn mlm_part(
        &self,
        tape: &mut Tape<'_, T>,
        fv: &ForwardVars,
        rows: &Option<Range<usize>>,
        table: Option<ParamId>,
        bias: Option<ParamId>,
        masked: &MaskedSequence,
    ) -> Result<Option<Var>> {
        let (Some(rows), Some(table), Some(bias)) = (rows, table, bias) else {
            return Ok(None);
        };
        if masked.positions.is_empty() {
            return Ok(None);
        }
        let idx: Vec<usize> = masked.positions.iter().map(|&p| rows.start + p).collect();
        let h = tape.gather_rows(fv.global.features, &idx)?;
        let w = tape.param(table);
        let b = tape.param(bias);
        let logits = tape.matmul_nt(h, w)?;
        let logits = tape.add_bias(logits, b)?;
        let targets: Vec<(usize, usize)> = masked
            .targets
            .iter()
            .enumerate()
            .map(|(k, &t)| (k, t as usize))
            .collect();
        Ok(Some(tape.cross_entropy(logits, &targets)?))
    }

    /// Summed masked-token NLL over both modalities and the number of
    /// scored positions.
    pub fn mlm_nll(
        &self,
        tape: &mut Tape<'_, T>,
        masked_h: &MaskedSequence,
        masked_p: &MaskedSequence,
    ) -> Result<(Var, ForwardVars, usize)> {
        let fv = self.forward(tape, &masked_h.tokens, &masked_p.tokens)?;
        let emb_h = self.layout.header.as_ref().map(|b| b.embedding);
        let emb_p = self.layout.payload.as_ref().map(|b| b.embedding);
        let lh = self.mlm_part(tape, &fv, &fv.header_rows, emb_h, self.layout.mlm_bias_h, masked_h)?;
        let lp = self.mlm_part(tape, &fv, &fv.payload_rows, emb_p, self.layout.mlm_bias_p, masked_p)?;
        let mut count = 0;
        if lh.is_some() {
            count += masked_h.positions.len();
        }
        if lp.is_some() {
            count += masked_p.positions.len();
        }
        let loss = match (lh, lp) {
            (Some(a), Some(b)) => tape.add(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => return Err(ModelError::EmptyMaskSet),
        };
        Ok((loss, fv, count))
    }

    /// Masked-token loss normalized by the number of scored positions.
    pub fn mlm_loss(
        &self,
        tape: &mut Tape<'_, T>,
        masked_h: &MaskedSequence,
        masked_p: &MaskedSequence,
    ) -> Result<Var> {
        let (nll, _, count) = self.mlm_nll(tape, masked_h, masked_p)?;
        Ok(tape.affine(nll, 1.0 / count as f64, 0.0))
    }

    /// Decoder logits at every position: `(L_h×258, L_p×258)`; a missing
    /// modality yields `None`.
    pub fn pretrain_logits(
        &self,
        header: &[u16],
        payload: &[u16],
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let mut tape = Tape::with_params(&self.params);
        let fv = self.forward(&mut tape, header, payload)?;
        let mut part = |rows: &Option<Range<usize>>, branch: &Option<TokenBranch>, bias: Option<ParamId>| -> Result<Option<Tensor<T>>> {
            let (Some(rows), Some(branch), Some(bias)) = (rows, branch, bias) else {
                return Ok(None);
            };
            let h = tape.slice(fv.global.features, 0, rows.start, rows.end)?;
            let w = tape.param(branch.embedding);
            let b = tape.param(bias);
            let l = tape.matmul_nt(h, w)?;
            let l = tape.add_bias(l, b)?;
            Ok(Some(tape.value(l).clone()))
        };
        let lh = part(&fv.header_rows, &self.layout.header, self.layout.mlm_bias_h)?;
        let lp = part(&fv.payload_rows, &self.layout.payload, self.layout.mlm_bias_p)?;
        Ok((lh, lp))
    }

    /// `1×C` class logits from the pooled representation.
    pub fn class_logits(&self, tape: &mut Tape<'_, T>, fv: &ForwardVars) -> Result<Var> {
        let theta = self.layout.classifier.ok_or(ModelError::MissingClassifier)?;
        let seq = match self.config.pooling {
            Pooling::Global => fv.global.features,
            Pooling::Aggregated => fv.fused,
        };
        let pooled = tape.mean(seq, 0)?;
        let w = tape.param(theta);
        Ok(tape.matmul(pooled, w)?)
    }

    /// Negative log-probability of `label`.
    pub fn cls_loss(&self, tape: &mut Tape<'_, T>, flow: &TokenizedFlow, label: usize) -> Result<Var> {
        if label >= self.config.classes {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: self.config.classes,
            });
        }
        let fv = self.forward(tape, &flow.header_tokens, &flow.payload_tokens)?;
        let logits = self.class_logits(tape, &fv)?;
        Ok(tape.cross_entropy(logits, &[(0, label)])?)
    }

    pub fn forward_classify(&self, flow: &TokenizedFlow) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.params);
        let fv = self.forward(&mut tape, &flow.header_tokens, &flow.payload_tokens)?;
        let logits = self.class_logits(&mut tape, &fv)?;
        let probs = kernels::softmax_rows(tape.value(logits))?;
        Ok(probs.to_f64_vec())
    }

    /// Class probabilities for every flow, shape `(n, C)` as nested rows.
    pub fn predict_proba(&self, flows: &[TokenizedFlow]) -> Result<Vec<Vec<f64>>> {
        flows.par_iter().map(|f| self.forward_classify(f)).collect()
    }

    pub fn predict(&self, flows: &[TokenizedFlow]) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(flows)?
            .iter()
            .map(|p| kernels::argmax(p))
            .collect())
    }

    pub fn evaluate(&self, flows: &[TokenizedFlow]) -> Result<Metrics> {
        if flows.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let truth = labels(flows, self.config.classes)?;
        let predicted = self.predict(flows)?;
        Metrics::from_predictions(self.config.classes, &truth, &predicted).ok_or(ModelError::EmptyDataset)
    }

    /// Forward pass with every intermediate telemetry needs.
    pub fn trace(&self, flow: &TokenizedFlow) -> Result<SampleTrace> {
        let mut tape = Tape::with_params(&self.params);
        let fv = self.forward(&mut tape, &flow.header_tokens, &flow.payload_tokens)?;
        let out = |v: &MoeVars| {
            let b = BranchOutput::from_vars(&tape, v);
            BranchOutput {
                features: b.features.cast(),
                routing_full: b.routing_full.cast(),
                routing_sparse: b.routing_sparse.cast(),
            }
        };
        let header = fv.header.as_ref().map(out);
        let payload = fv.payload.as_ref().map(out);
        let global = out(&fv.global);
        let filter = fv.filter.map(|f| FilterTrace {
            entropy_h: tape.value(f.entropy_h).to_f64_vec(),
            entropy_p: tape.value(f.entropy_p).to_f64_vec(),
            gate_h: tape.value(f.gate_h).to_f64_vec(),
            gate_p: tape.value(f.gate_p).to_f64_vec(),
            pre_norm_h: row_norms(&header.as_ref().expect("header").features),
            pre_norm_p: row_norms(&payload.as_ref().expect("payload").features),
            post_norm_h: row_norms(tape.value(f.purified_h)),
            post_norm_p: row_norms(tape.value(f.purified_p)),
        });
        let alpha = fv.alpha.map(|a| tape.value(a).item().as_f64());
        let probabilities = match self.layout.classifier {
            Some(_) => {
                let logits = self.class_logits(&mut tape, &fv)?;
                Some(kernels::softmax_rows(tape.value(logits))?.to_f64_vec())
            }
            None => None,
        };
        Ok(SampleTrace {
            header,
            payload,
            global,
            filter,
            alpha,
            probabilities,
        })
    }

    /// Per-class mean of the routing summaries of each branch present, as
    /// `(branch name, class → expert distribution)`.
    pub fn class_routing(&self, flows: &[TokenizedFlow]) -> Result<Vec<(&'static str, Vec<Vec<f64>>)>> {
        let classes = self.config.classes.max(1);
        let truth = labels(flows, classes)?;
        let traces: Vec<SampleTrace> = flows.par_iter().map(|f| self.trace(f)).collect::<Result<_>>()?;
        let e = self.config.experts;
        let mut out = Vec::new();
        let branches: [(&'static str, fn(&SampleTrace) -> Option<&BranchOutput<f64>>); 3] = [
            ("header", |t| t.header.as_ref()),
            ("payload", |t| t.payload.as_ref()),
            ("global", |t| Some(&t.global)),
        ];
        for (name, pick) in branches {
            if traces.first().and_then(pick).is_none() {
                continue;
            }
            let mut sums = vec![vec![0.0; e]; classes];
            let mut counts = vec![0usize; classes];
            for (t, &y) in traces.iter().zip(&truth) {
                let r = moe::routing_summary(pick(t).expect("branch present"));
                sums[y].iter_mut().zip(&r).for_each(|(s, v)| *s += v);
                counts[y] += 1;
            }
            for (s, &n) in sums.iter_mut().zip(&counts) {
                if n > 0 {
                    s.iter_mut().for_each(|v| *v /= n as f64);
                }
            }
            out.push((name, sums));
        }
        Ok(out)
    }
}

/// Labels of every flow, checked against `classes`.
pub fn labels(flows: &[TokenizedFlow], classes: usize) -> Result<Vec<usize>> {
    flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let y = f.label.ok_or(ModelError::MissingLabel(i))?;
            if y >= classes {
                return Err(ModelError::LabelOutOfRange { label: y, classes });
            }
            Ok(y)
        })
        .collect()
}

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::masking::{apply_mask, MaskedSequence, MaskingPlan};
use super::{labels, ModelError, Result, TrafficMoE};
use crate::moe::load_balance_var;
use crate::preprocess::TokenizedFlow;
use crate::tensor::{Adam, AdamConfig, ParamGrads, RngState, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mask_ratio: f64,
    pub load_balance: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            mask_ratio: 0.15,
            load_balance: 0.0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "learning_rate and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || self.load_balance < 0.0 {
            return Err(ModelError::InvalidConfig(
                "mask_ratio must lie in [0, 1] and load_balance be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss of the first batch before any update.
    pub initial_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Mean loss of every optimizer step, in order.
    pub steps: Vec<f64>,
}

const SHUFFLE_STREAM: u64 = 0x5AFF;
const MASK_STREAM: u64 = 0x3A5C;

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngState::derive(seed, &[SHUFFLE_STREAM, epoch as u64]));
    order
}

/// Masks of one sample for one epoch; independent of batching.
pub(crate) fn sample_masks(
    flow: &TokenizedFlow,
    plan: &MaskingPlan,
    seed: u64,
    epoch: usize,
    index: usize,
) -> (MaskedSequence, MaskedSequence) {
    let mut rng = RngState::derive(seed, &[MASK_STREAM, epoch as u64, index as u64]);
    let h = apply_mask(&flow.header_tokens, plan, &mut rng);
    let p = apply_mask(&flow.payload_tokens, plan, &mut rng);
    (h, p)
}

/// Per-sample gradients merged in batch order, so the result does not
/// depend on thread scheduling.
fn batch_step<T, F>(model: &mut TrafficMoE<T>, adam: &mut Adam<T>, batch: &[usize], loss: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&TrafficMoE<T>, &mut Tape<'_, T>, usize) -> Result<Var> + Sync,
{
    let shared = &*model;
    let results: Vec<(f64, ParamGrads<T>)> = batch
        .par_iter()
        .map(|&i| {
            let mut tape = Tape::with_params(&shared.params);
            let l = loss(shared, &mut tape, i)?;
            let value = tape.value(l).item().as_f64();
            let grads = tape.backward(l)?.into_param_grads();
            Ok((value, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut merged = ParamGrads::default();
    for (v, g) in &results {
        total += v;
        merged.merge(g);
    }
    model.params.zero_grad();
    model.params.accumulate(&merged);
    adam.step(&mut model.params);
    Ok(total)
}

fn flows_ok(flows: &[TokenizedFlow], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if flows.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    Ok(())
}

pub fn train_pretrain<T: Scalar>(model: &mut TrafficMoE<T>, corpus: &[TokenizedFlow], cfg: &TrainConfig) -> Result<TrainLog> {
    train_pretrain_with(model, corpus, cfg, |_, _| ControlFlow::Continue(()))
}

/// Masked-token pretraining. `on_epoch` sees each epoch's record and may
/// stop training early.
pub fn train_pretrain_with<T: Scalar>(
    model: &mut TrafficMoE<T>,
    corpus: &[TokenizedFlow],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrafficMoE<T>) -> ControlFlow<()>,
) -> Result<TrainLog> {
    flows_ok(corpus, cfg)?;
    let plan = MaskingPlan::with_ratio(cfg.mask_ratio);
    let mut adam = Adam::new(cfg.adam());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, epoch);
        let mut epoch_nll = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let masks: Vec<(usize, MaskedSequence, MaskedSequence)> = batch
                .iter()
                .map(|&i| {
                    let (h, p) = sample_masks(&corpus[i], &plan, cfg.seed, epoch, i);
                    (i, h, p)
                })
                .collect();
            let scored = |h: &MaskedSequence, p: &MaskedSequence| {
                let lay = model.layout();
                let mut n = 0;
                if lay.header.is_some() {
                    n += h.positions.len();
                }
                if lay.payload.is_some() {
                    n += p.positions.len();
                }
                n
            };
            let count: usize = masks.iter().map(|(_, h, p)| scored(h, p)).sum();
            if count == 0 {
                return Err(ModelError::EmptyMaskSet);
            }
            let positions: Vec<usize> = (0..batch.len()).collect();
            let lb = cfg.load_balance;
            let nb = batch.len() as f64;
            let norm = 1.0 / count as f64;
            let masks_ref = &masks;
            let total = batch_step(model, &mut adam, &positions, move |m, tape, k| {
                let (_, h, p) = &masks_ref[k];
                let (nll, fv, _) = match m.mlm_nll(tape, h, p) {
                    Err(ModelError::EmptyMaskSet) => {
                        let z = tape.constant(crate::tensor::Tensor::scalar(T::zero()));
                        return Ok(z);
                    }
                    other => other?,
                };
                let mut loss = tape.affine(nll, norm, 0.0);
                if lb > 0.0 {
                    for v in [&fv.header, &fv.payload].into_iter().flatten().chain([&fv.global]) {
                        let term = load_balance_var(tape, v, lb / nb)?;
                        loss = tape.add(loss, term)?;
                    }
                }
                Ok(loss)
            })?;
            if log.initial_loss.is_none() {
                log.initial_loss = Some(total);
            }
            log.steps.push(total);
            epoch_nll += total * count as f64;
            epoch_count += count;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            split: "pretrain".into(),
            loss: epoch_nll / epoch_count as f64,
            accuracy: None,
        };
        log.epochs.push(record.clone());
        if on_epoch(&record, model).is_break() {
            break;
        }
    }
    Ok(log)
}

pub fn train_finetune<T: Scalar>(model: &mut TrafficMoE<T>, data: &[TokenizedFlow], cfg: &TrainConfig) -> Result<TrainLog> {
    train_finetune_with(model, data, cfg, |_, _| ControlFlow::Continue(()))
}

/// Supervised training of every parameter with the class head.
pub fn train_finetune_with<T: Scalar>(
    model: &mut TrafficMoE<T>,
    data: &[TokenizedFlow],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrafficMoE<T>) -> ControlFlow<()>,
) -> Result<TrainLog> {
    flows_ok(data, cfg)?;
    if model.layout().classifier.is_none() {
        return Err(ModelError::MissingClassifier);
    }
    let truth = labels(data, model.config().classes)?;
    let mut adam = Adam::new(cfg.adam());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let nb = batch.len() as f64;
            let lb = cfg.load_balance;
            let truth = &truth;
            let total = batch_step(model, &mut adam, batch, move |m, tape, i| {
                let fv = m.forward(tape, &data[i].header_tokens, &data[i].payload_tokens)?;
                let logits = m.class_logits(tape, &fv)?;
                let nll = tape.cross_entropy(logits, &[(0, truth[i])])?;
                let mut loss = tape.affine(nll, 1.0 / nb, 0.0);
                if lb > 0.0 {
                    for v in [&fv.header, &fv.payload].into_iter().flatten().chain([&fv.global]) {
                        let term = load_balance_var(tape, v, lb / nb)?;
                        loss = tape.add(loss, term)?;
                    }
                }
                Ok(loss)
            })?;
            if log.initial_loss.is_none() {
                log.initial_loss = Some(total);
            }
            log.steps.push(total);
            epoch_loss += total * nb;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            split: "train".into(),
            loss: epoch_loss / data.len() as f64,
            accuracy: None,
        };
        log.epochs.push(record.clone());
        if on_epoch(&record, model).is_break() {
            break;
        }
    }
    Ok(log)
}

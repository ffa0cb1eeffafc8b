use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde_json::json;
use trafficmoe::capture::{read_pcap, split_flows, Flow};
use trafficmoe::model::{
    train_finetune_with, train_pretrain_with, Checkpoint, EpochRecord, ModelConfig, Precision, TrafficMoE,
};
use trafficmoe::preprocess::{read_dataset, tokenize_flows, write_dataset, DatasetStats, TokenizedFlow};
use trafficmoe::synth::{generate_corpus, generate_flows, SyntheticSample, SyntheticSpec};
use trafficmoe::tensor::Scalar;
use trafficmoe::verify::{gradient_suite, GRADCHECK_TOLERANCE};

use crate::config::{sidecar, write_json, RunConfig};
use crate::error::CliError;

fn write_config(out: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    write_json(&sidecar(out, ".config.json"), value)
}

pub fn ingest(pcap: &Path, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let records = read_pcap(pcap)?;
    let flows: Vec<Flow> = split_flows(&records).into_values().collect();
    let (tokens, stats) = tokenize_flows(&flows, &cfg.preprocess, cfg.label);
    write_dataset(out, &tokens)?;
    write_json(&sidecar(out, ".stats.json"), &stats)?;
    write_config(out, &json!({ "pcap": pcap, "out": out, "run": cfg }))
}

fn write_random_masks(path: &Path, samples: &[SyntheticSample]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let bits: Vec<u8> = s.payload_random.iter().map(|&r| r as u8).collect();
        writeln!(w, "{}", serde_json::to_string(&bits).expect("serializable"))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the train split to `out` and the test split to `<stem>.test.jsonl`,
/// each with a mask file marking uniformly random payload tokens.
pub fn synth(spec_path: &Path, out: &Path, corpus: Option<usize>) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::Usage(format!("{}: {e}", spec_path.display())))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", spec_path.display())))?;
    let data = generate_flows(&spec)?;
    let test_path = out.with_extension("test.jsonl");
    write_dataset(out, &data.train_flows())?;
    write_dataset(&test_path, &data.test_flows())?;
    write_random_masks(&sidecar(out, ".random.jsonl"), &data.train)?;
    write_random_masks(&sidecar(&test_path, ".random.jsonl"), &data.test)?;
    write_json(&sidecar(out, ".stats.json"), &DatasetStats::from_tokenized(&data.train_flows()))?;
    let mut corpus_path = None;
    if let Some(n) = corpus {
        let path = out.with_extension("corpus.jsonl");
        write_dataset(&path, &generate_corpus(&spec, n)?)?;
        corpus_path = Some(path);
    }
    write_config(
        out,
        &json!({ "spec": spec, "train": out, "test": test_path, "corpus": corpus_path }),
    )
}

struct LogWriter(BufWriter<File>);

impl LogWriter {
    fn create(out: &Path) -> Result<Self, CliError> {
        Ok(Self(BufWriter::new(File::create(sidecar(out, ".log.jsonl"))?)))
    }

    fn record(&mut self, r: &EpochRecord) -> std::io::Result<()> {
        writeln!(self.0, "{}", serde_json::to_string(r).expect("serializable"))
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.0.flush()?;
        Ok(())
    }
}

fn load_flows(path: &Path) -> Result<Vec<TokenizedFlow>, CliError> {
    Ok(read_dataset(path)?)
}

fn pretrain_typed<T: Scalar>(cfg: &RunConfig, corpus: &[TokenizedFlow], out: &Path) -> Result<(), CliError> {
    let model_cfg = ModelConfig { classes: 0, ..cfg.model.clone() };
    let mut model = TrafficMoE::<T>::new(model_cfg, cfg.train.seed)?;
    let mut log = LogWriter::create(out)?;
    let mut io_err = None;
    train_pretrain_with(&mut model, corpus, &cfg.train, |r, _| match log.record(r) {
        Ok(()) => ControlFlow::Continue(()),
        Err(e) => {
            io_err = Some(e);
            ControlFlow::Break(())
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.finish()?;
    model.save(out)?;
    Ok(())
}

pub fn pretrain(data: &Path, config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let corpus = load_flows(data)?;
    match cfg.train.precision {
        Precision::F32 => pretrain_typed::<f32>(&cfg, &corpus, out)?,
        Precision::F64 => pretrain_typed::<f64>(&cfg, &corpus, out)?,
    }
    write_config(out, &json!({ "data": data, "out": out, "run": cfg }))
}

/// Model for fine-tuning: fresh, or the `init` checkpoint with a class head
/// attached when it has none.
fn finetune_model<T: Scalar>(cfg: &RunConfig, init: Option<&Path>) -> Result<TrafficMoE<T>, CliError> {
    if cfg.model.classes == 0 {
        return Err(CliError::Usage("fine-tuning needs model.classes > 0".into()));
    }
    let Some(path) = init else {
        return Ok(TrafficMoE::new(cfg.model.clone(), cfg.train.seed)?);
    };
    let ck = Checkpoint::load(path)?;
    let want = ModelConfig { classes: ck.config.classes, ..cfg.model.clone() };
    if ck.config != want {
        return Err(CliError::Usage(format!(
            "{} was trained with a different architecture than the run config",
            path.display()
        )));
    }
    let mut model = TrafficMoE::<T>::from_checkpoint(&ck)?;
    if ck.config.classes == 0 {
        model.attach_classifier(cfg.model.classes, cfg.train.seed)?;
    } else if ck.config.classes != cfg.model.classes {
        return Err(CliError::Usage(format!(
            "{} has {} classes, run config asks for {}",
            path.display(),
            ck.config.classes,
            cfg.model.classes
        )));
    }
    Ok(model)
}

fn finetune_typed<T: Scalar>(
    cfg: &RunConfig,
    data: &[TokenizedFlow],
    valid: Option<&[TokenizedFlow]>,
    init: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let mut model = finetune_model::<T>(cfg, init)?;
    let mut log = LogWriter::create(out)?;
    let mut failure: Option<CliError> = None;
    train_finetune_with(&mut model, data, &cfg.train, |r, m| {
        let mut step = || -> Result<(), CliError> {
            log.record(r)?;
            if let Some(v) = valid {
                let acc = m.evaluate(v)?.accuracy;
                log.record(&EpochRecord { epoch: r.epoch, split: "valid".into(), loss: r.loss, accuracy: Some(acc) })?;
            }
            Ok(())
        };
        match step() {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    log.finish()?;
    model.save(out)?;
    Ok(())
}

pub fn finetune(
    data: &Path,
    config: Option<&Path>,
    init: Option<&Path>,
    valid: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let train = load_flows(data)?;
    let valid_flows = valid.map(load_flows).transpose()?;
    let v = valid_flows.as_deref();
    match cfg.train.precision {
        Precision::F32 => finetune_typed::<f32>(&cfg, &train, v, init, out)?,
        Precision::F64 => finetune_typed::<f64>(&cfg, &train, v, init, out)?,
    }
    write_config(out, &json!({ "data": data, "init": init, "valid": valid, "out": out, "run": cfg }))
}

fn load_model(ckpt: &Path) -> Result<TrafficMoE<f32>, CliError> {
    Ok(TrafficMoE::<f32>::from_checkpoint(&Checkpoint::load(ckpt)?)?)
}

fn inspect_config(out: &Path, data: &Path, ckpt: &Path, model: &TrafficMoE<f32>) -> Result<(), CliError> {
    write_config(out, &json!({ "data": data, "ckpt": ckpt, "out": out, "model": model.config() }))
}

pub fn evaluate(data: &Path, ckpt: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(ckpt)?;
    let metrics = model.evaluate(&load_flows(data)?)?;
    write_json(out, &metrics)?;
    inspect_config(out, data, ckpt, &model)
}

pub fn inspect_routing(data: &Path, ckpt: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(ckpt)?;
    let routing = model.class_routing(&load_flows(data)?)?;
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "branch,class,expert,mean_probability")?;
    for (branch, per_class) in &routing {
        for (class, dist) in per_class.iter().enumerate() {
            for (expert, p) in dist.iter().enumerate() {
                writeln!(w, "{branch},{class},{expert},{p}")?;
            }
        }
    }
    w.flush()?;
    inspect_config(out, data, ckpt, &model)
}

/// Per-token filter telemetry (feature norms before and after gating), plus
/// `<out>.alpha.csv` with the fusion weight of every sample when the model
/// aggregates.
pub fn inspect_uf(data: &Path, ckpt: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(ckpt)?;
    if model.layout().filter.is_none() {
        return Err(CliError::Usage(format!("{} has no uncertainty filter", ckpt.display())));
    }
    let flows = load_flows(data)?;
    let mut w = BufWriter::new(File::create(out)?);
    let mut alpha_path: Option<PathBuf> = None;
    let mut alphas = Vec::new();
    writeln!(w, "sample,position,modality,pre_norm,post_norm,entropy,gate")?;
    for (i, flow) in flows.iter().enumerate() {
        let trace = model.trace(flow)?;
        let f = trace.filter.expect("filter present");
        let sides = [
            ("header", &f.entropy_h, &f.gate_h, &f.pre_norm_h, &f.post_norm_h),
            ("payload", &f.entropy_p, &f.gate_p, &f.pre_norm_p, &f.post_norm_p),
        ];
        for (name, ent, gate, pre, post) in sides {
            for t in 0..ent.len() {
                writeln!(w, "{i},{t},{name},{},{},{},{}", pre[t], post[t], ent[t], gate[t])?;
            }
        }
        if let Some(a) = trace.alpha {
            let class = flow.label.map(|c| c.to_string()).unwrap_or_default();
            alphas.push((i, class, a));
        }
    }
    w.flush()?;
    if !alphas.is_empty() {
        let path = out.with_extension("alpha.csv");
        let mut a = BufWriter::new(File::create(&path)?);
        writeln!(a, "sample,class,alpha")?;
        for (i, class, v) in alphas {
            writeln!(a, "{i},{class},{v}")?;
        }
        a.flush()?;
        alpha_path = Some(path);
    }
    write_config(
        out,
        &json!({ "data": data, "ckpt": ckpt, "out": out, "alpha": alpha_path, "model": model.config() }),
    )
}

pub fn gradcheck(seed: u64) -> Result<(), CliError> {
    let outcomes = gradient_suite(seed)?;
    let mut failed = Vec::new();
    for c in &outcomes {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:28} max rel error {:.3e}", c.name, c.report.max_rel_error());
        if !c.passed() {
            failed.push(c.name);
        }
    }
    println!("tolerance {GRADCHECK_TOLERANCE:e}, {} of {} checks passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

use proptest::prelude::*;
use rand::Rng;
use trafficmoe::model::{
    apply_mask, train_finetune, train_pretrain, Checkpoint, CheckpointError, MaskingPlan, ModelConfig, ModelError,
    Modality, Pooling, TrafficMoE, TrainConfig,
};
use trafficmoe::preprocess::{TokenizedFlow, MASK_TOKEN, VOCAB_SIZE};
use trafficmoe::tensor::{RngState, Tape, Tensor};

fn micro(classes: usize) -> ModelConfig {
    ModelConfig {
        packets: 2,
        header_bytes: 4,
        payload_bytes: 4,
        dim: 8,
        heads: 2,
        experts: 3,
        top_k: 2,
        expert_hidden: 8,
        ffn_hidden: 8,
        ctx_dim: 4,
        classes,
        ..ModelConfig::default()
    }
}

fn flows(n: usize, classes: usize, seed: u64) -> Vec<TokenizedFlow> {
    let mut rng = RngState::new(seed, 0);
    (0..n)
        .map(|i| TokenizedFlow {
            header_tokens: (0..8).map(|_| rng.gen_range(0..256)).collect(),
            payload_tokens: (0..8).map(|_| rng.gen_range(0..256)).collect(),
            label: Some(i % classes.max(1)),
        })
        .collect()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn mask_count_rounds_and_keeps_one() {
    assert_eq!(MaskingPlan::default().mask_count(160), 24);
    assert_eq!(MaskingPlan::default().mask_count(3), 1);
    assert_eq!(MaskingPlan::with_ratio(0.0).mask_count(10), 1);
    let plan = MaskingPlan { min_one: false, ..MaskingPlan::with_ratio(0.0) };
    assert_eq!(plan.mask_count(10), 0);
    assert_eq!(MaskingPlan::default().mask_count(0), 0);
}

proptest! {
    #[test]
    fn masking_conserves_unmasked_tokens(tokens in prop::collection::vec(0u16..256, 0..200), ratio in 0.0f64..1.0, seed in any::<u64>()) {
        let plan = MaskingPlan::with_ratio(ratio);
        let m = apply_mask(&tokens, &plan, &mut RngState::new(seed, 0));
        prop_assert_eq!(m.positions.len(), plan.mask_count(tokens.len()));
        prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(m.tokens.len(), tokens.len());
        for (k, &p) in m.positions.iter().enumerate() {
            prop_assert_eq!(m.targets[k], tokens[p]);
        }
        for i in 0..tokens.len() {
            if m.positions.binary_search(&i).is_err() {
                prop_assert_eq!(m.tokens[i], tokens[i]);
            }
            prop_assert!((m.tokens[i] as usize) < VOCAB_SIZE);
        }
    }
}

#[test]
fn mask_token_dominates_corruption() {
    let tokens: Vec<u16> = (0..10_000).map(|i| (i % 256) as u16).collect();
    let m = apply_mask(&tokens, &MaskingPlan::default(), &mut RngState::new(4, 0));
    let masked = m.positions.iter().filter(|&&p| m.tokens[p] == MASK_TOKEN).count();
    let share = masked as f64 / m.positions.len() as f64;
    assert!((share - 0.8).abs() < 0.03, "{share}");
}

#[test]
fn zero_decoder_gives_log_vocab_loss() {
    let mut model = TrafficMoE::<f64>::new(micro(0), 1).unwrap();
    for name in ["header.embedding", "payload.embedding", "mlm.bias_h", "mlm.bias_p"] {
        let id = model.params().id(name).unwrap();
        let p = model.params_mut().get_mut(id);
        p.value = p.value.map(|_| 0.0);
    }
    let f = &flows(1, 1, 0)[0];
    let mut rng = RngState::new(0, 0);
    let plan = MaskingPlan::default();
    let (mh, mp) = (apply_mask(&f.header_tokens, &plan, &mut rng), apply_mask(&f.payload_tokens, &plan, &mut rng));
    let mut tape = Tape::with_params(model.params());
    let l = model.mlm_loss(&mut tape, &mh, &mp).unwrap();
    assert!((tape.value(l).item() - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
}

#[test]
fn zero_classifier_is_uniform() {
    let mut model = TrafficMoE::<f64>::new(micro(5), 2).unwrap();
    let id = model.layout().classifier.unwrap();
    let p = model.params_mut().get_mut(id);
    p.value = p.value.map(|_| 0.0);
    for probs in model.predict_proba(&flows(3, 5, 1)).unwrap() {
        assert_eq!(probs.len(), 5);
        for v in probs {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let corpus = flows(10, 1, 3);
    let run = |seed| {
        let mut m = TrafficMoE::<f32>::new(micro(0), seed).unwrap();
        train_pretrain(&mut m, &corpus, &quick(2, seed)).unwrap();
        m.checkpoint().to_bytes()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn one_flow_corpus_trains() {
    let mut m = TrafficMoE::<f32>::new(micro(0), 0).unwrap();
    let log = train_pretrain(&mut m, &flows(1, 1, 0), &quick(3, 0)).unwrap();
    assert_eq!(log.epochs.len(), 3);
    assert_eq!(log.steps.len(), 3);
    assert!(log.steps.iter().all(|v| v.is_finite()));
}

#[test]
fn pretraining_lowers_masked_loss() {
    // Constant tokens are trivially predictable.
    let corpus: Vec<TokenizedFlow> = (0..16)
        .map(|_| TokenizedFlow { header_tokens: vec![7; 8], payload_tokens: vec![9; 8], label: None })
        .collect();
    let mut m = TrafficMoE::<f32>::new(micro(0), 0).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-2, ..quick(10, 0) };
    let log = train_pretrain(&mut m, &corpus, &cfg).unwrap();
    assert!(log.epochs.last().unwrap().loss < 0.5 * log.epochs[0].loss);
}

#[test]
fn finetune_fits_a_separable_toy_set() {
    let data: Vec<TokenizedFlow> = (0..24)
        .map(|i| TokenizedFlow {
            header_tokens: vec![(i % 2) as u16 * 200; 8],
            payload_tokens: vec![(i * 37 % 256) as u16; 8],
            label: Some(i % 2),
        })
        .collect();
    let mut m = TrafficMoE::<f32>::new(micro(2), 0).unwrap();
    train_finetune(&mut m, &data, &TrainConfig { learning_rate: 1e-2, ..quick(15, 0) }).unwrap();
    assert_eq!(m.evaluate(&data).unwrap().accuracy, 1.0);
}

#[test]
fn finetune_rejects_bad_inputs() {
    let mut m = TrafficMoE::<f32>::new(micro(0), 0).unwrap();
    assert!(matches!(train_finetune(&mut m, &flows(4, 2, 0), &quick(1, 0)), Err(ModelError::MissingClassifier)));
    m.attach_classifier(2, 0).unwrap();
    assert!(matches!(train_finetune(&mut m, &flows(4, 3, 0), &quick(1, 0)), Err(ModelError::LabelOutOfRange { .. })));
    let mut unlabeled = flows(4, 2, 0);
    unlabeled[1].label = None;
    assert!(matches!(train_finetune(&mut m, &unlabeled, &quick(1, 0)), Err(ModelError::MissingLabel(1))));
    assert!(matches!(train_finetune(&mut m, &[], &quick(1, 0)), Err(ModelError::EmptyDataset)));
    assert!(m.attach_classifier(3, 0).is_err());
    let mut short = flows(1, 2, 0);
    short[0].header_tokens.pop();
    assert!(matches!(m.forward_classify(&short[0]), Err(ModelError::LengthMismatch { .. })));
    short[0].header_tokens.push(300);
    assert!(matches!(m.forward_classify(&short[0]), Err(ModelError::TokenOutOfRange(300))));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = flows(12, 3, 4);
    let mut m = TrafficMoE::<f32>::new(micro(3), 0).unwrap();
    train_finetune(&mut m, &data, &quick(2, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = TrafficMoE::<f32>::load(&path).unwrap();
    assert_eq!(back.checkpoint(), m.checkpoint());
    assert_eq!(back.predict_proba(&data).unwrap(), m.predict_proba(&data).unwrap());
    assert_eq!(back.evaluate(&data).unwrap(), m.evaluate(&data).unwrap());
}

#[test]
fn checkpoint_errors() {
    let m = TrafficMoE::<f32>::new(micro(2), 0).unwrap();
    let bytes = m.checkpoint().to_bytes();
    assert!(matches!(Checkpoint::from_bytes(b"NOPE...."), Err(CheckpointError::BadMagic)));
    for cut in [0, 3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated | CheckpointError::BadMagic), "{cut}: {err}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::Corrupt(_))));
    let mut other = TrafficMoE::<f32>::new(ModelConfig { experts: 4, ..micro(2) }, 0).unwrap();
    assert!(matches!(other.load_weights(&m.checkpoint()), Err(CheckpointError::IncompatibleCheckpoint(_))));
}

#[test]
fn precisions_agree() {
    let m = TrafficMoE::<f64>::new(micro(3), 8).unwrap();
    let f = &flows(1, 3, 8)[0];
    let a = m.forward_classify(f).unwrap();
    let b = m.cast::<f32>().forward_classify(f).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn every_variant_runs_and_normalizes() {
    let base = micro(3);
    let variants = [
        ModelConfig { modality: Modality::HeaderOnly, ..base.clone() },
        ModelConfig { modality: Modality::PayloadOnly, ..base.clone() },
        ModelConfig { homogeneous: true, ..base.clone() },
        ModelConfig { use_filter: false, ..base.clone() },
        ModelConfig { use_aggregation: false, ..base.clone() },
        ModelConfig { shared_filter: true, ..base.clone() },
        ModelConfig { pooling: Pooling::Aggregated, ..base.clone() },
        ModelConfig { positional: false, ..base.clone() },
    ];
    let data = flows(4, 3, 2);
    for cfg in variants {
        let m = TrafficMoE::<f64>::new(cfg.clone(), 0).unwrap();
        for p in m.predict_proba(&data).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{cfg:?}");
        }
        let t = m.trace(&data[0]).unwrap();
        assert_eq!(t.filter.is_some(), cfg.use_filter && cfg.modality == Modality::Both);
        assert_eq!(t.alpha.is_some(), cfg.modality == Modality::Both);
        let rows = t.global.features.rows();
        let expected = match cfg.modality {
            Modality::Both => 16,
            _ => 8,
        };
        assert_eq!(rows, expected);
    }
}

#[test]
fn branch_parameters_follow_the_structure() {
    let count = |cfg: ModelConfig, prefix: &str| {
        let m = TrafficMoE::<f32>::new(cfg, 0).unwrap();
        m.params().iter().filter(|(_, p)| p.name.starts_with(prefix)).count()
    };
    assert_eq!(count(micro(2), "payload."), count(micro(2), "header."));
    assert_eq!(count(ModelConfig { homogeneous: true, ..micro(2) }, "payload."), 0);
    assert_eq!(count(ModelConfig { modality: Modality::HeaderOnly, ..micro(2) }, "payload."), 0);
    assert_eq!(count(ModelConfig { modality: Modality::PayloadOnly, ..micro(2) }, "filter."), 0);
    let shared = TrafficMoE::<f32>::new(ModelConfig { shared_filter: true, ..micro(2) }, 0).unwrap();
    assert!(shared.params().id("filter.w_p").is_none());
}

#[test]
fn homogeneous_branch_sees_both_modalities_jointly() {
    // Changing a payload token moves header features only when attention
    // spans the concatenated sequence.
    let m = TrafficMoE::<f64>::new(ModelConfig { homogeneous: true, use_filter: false, ..micro(2) }, 0).unwrap();
    let sep = TrafficMoE::<f64>::new(ModelConfig { use_filter: false, ..micro(2) }, 0).unwrap();
    let mut f = flows(1, 2, 0).remove(0);
    let header_feats = |m: &TrafficMoE<f64>, f: &TokenizedFlow| -> Tensor<f64> {
        m.trace(f).unwrap().header.unwrap().features
    };
    let (a_joint, a_sep) = (header_feats(&m, &f), header_feats(&sep, &f));
    f.payload_tokens[0] = (f.payload_tokens[0] + 1) % 256;
    assert!(header_feats(&m, &f).max_abs_diff(&a_joint) > 0.0);
    assert_eq!(header_feats(&sep, &f), a_sep);
}

#[test]
fn load_balance_term_trains() {
    let mut m = TrafficMoE::<f32>::new(micro(2), 0).unwrap();
    let cfg = TrainConfig { load_balance: 0.01, ..quick(1, 0) };
    let log = train_finetune(&mut m, &flows(8, 2, 0), &cfg).unwrap();
    assert!(log.steps.iter().all(|v| v.is_finite()));
}

#[test]
fn config_validation() {
    assert!(TrafficMoE::<f32>::new(ModelConfig { heads: 3, ..micro(0) }, 0).is_err());
    assert!(TrafficMoE::<f32>::new(ModelConfig { top_k: 4, ..micro(0) }, 0).is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { mask_ratio: 1.5, ..TrainConfig::default() }.validate().is_err());
    let json = serde_json::to_string(&micro(2)).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), micro(2));
    assert!(serde_json::from_str::<ModelConfig>("{\"dimm\": 3}").is_err());
}

mod common;

use common::{dense_moe_oracle, moe_layer, oracle_route, oracle_softmax, random_matrix};
use proptest::prelude::*;
use trafficmoe::moe::{load_balance_loss, moe_forward, route, routing_summary};
use trafficmoe::tensor::{RngState, Tensor};

#[test]
fn route_of_known_logits() {
    let (sel, w) = route(&[1.0f64, 2.0, 3.0, 0.0], 2);
    assert_eq!(sel, vec![2, 1]);
    // e^3 / (e^2 + e^3) and its complement.
    assert!((w[2] - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert!((w[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    assert_eq!(w[0], 0.0);
    assert_eq!(w[3], 0.0);
}

#[test]
fn k_equal_e_reproduces_full_softmax() {
    let logits = [0.3f64, -1.2, 2.0, 0.7];
    let (_, w) = route(&logits, 4);
    for (a, b) in w.iter().zip(oracle_softmax(&logits)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ties_prefer_lower_index() {
    let (sel, w) = route(&[1.0f64, 1.0, 1.0], 2);
    assert_eq!(sel, vec![0, 1]);
    assert_eq!(w, vec![0.5, 0.5, 0.0]);
}

#[test]
fn unselected_expert_parameters_do_not_matter() {
    let (mut store, layer) = moe_layer(3, 6, 12, 4, 1);
    let mut rng = RngState::new(9, 0);
    let z = random_matrix(&mut rng, 1, 6, 1.0);
    let before = moe_forward(&store, &layer, &z).unwrap();
    let chosen = (0..4).find(|&e| before.routing_sparse.at(0, e) > 0.0).unwrap();
    for (e, expert) in layer.experts.iter().enumerate() {
        if e != chosen {
            for id in [expert.w1, expert.b1, expert.w2, expert.b2] {
                store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v += 3.0);
            }
        }
    }
    let after = moe_forward(&store, &layer, &z).unwrap();
    assert_eq!(before.features, after.features);
}

#[test]
fn summary_and_balance_of_uniform_routing() {
    let out = trafficmoe::moe::BranchOutput {
        features: Tensor::<f64>::zeros(4, 2),
        routing_full: Tensor::full(4, 4, 0.25),
        routing_sparse: Tensor::full(4, 4, 0.25),
    };
    assert_eq!(routing_summary(&out), vec![0.25; 4]);
    // Every token's top-1 is expert 0 under ties: coef·E·(1·0.25).
    assert!((load_balance_loss(&out, 0.01) - 0.01).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sparse_rows_have_k_nonzeros_summing_to_one(
        seed in 0u64..1000,
        e_k in prop::sample::select(vec![(2usize, 1usize), (2, 2), (4, 1), (4, 2), (4, 4), (8, 1), (8, 2), (8, 4)]),
        len in 1usize..12,
    ) {
        let (e, k) = e_k;
        let (store, layer) = moe_layer(seed, 8, 8, e, k);
        let z = random_matrix(&mut RngState::new(seed, 1), len, 8, 2.0);
        let out = moe_forward(&store, &layer, &z).unwrap();
        for r in 0..len {
            let row = out.routing_sparse.row(r);
            prop_assert_eq!(row.iter().filter(|v| **v > 0.0).count(), k);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let full = out.routing_full.row(r);
            prop_assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // Renormalization preserves ratios among selected experts.
            let sel: Vec<usize> = (0..e).filter(|&i| row[i] > 0.0).collect();
            let mass: f64 = sel.iter().map(|&i| full[i]).sum();
            for &i in &sel {
                prop_assert!((row[i] - full[i] / mass).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn moe_matches_dense_oracle(seed in 0u64..1000, len in 1usize..10, e in 2usize..6, k_raw in 1usize..6) {
        let k = k_raw.min(e);
        let (store, layer) = moe_layer(seed, 6, 10, e, k);
        let z = random_matrix(&mut RngState::new(seed, 2), len, 6, 1.5);
        let out = moe_forward(&store, &layer, &z).unwrap();
        prop_assert!(out.features.max_abs_diff(&dense_moe_oracle(&store, &layer, &z)) < 1e-9);
    }

    #[test]
    fn route_matches_sorting_oracle(logits in prop::collection::vec(-5.0f64..5.0, 1..10), k_raw in 1usize..10) {
        let k = k_raw.min(logits.len());
        let (_, w) = route(&logits, k);
        for (a, b) in w.iter().zip(oracle_route(&logits, k)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

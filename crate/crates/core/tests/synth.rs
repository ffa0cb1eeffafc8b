use trafficmoe::preprocess::TokenizedFlow;
use trafficmoe::synth::{generate_corpus, generate_flows, SyntheticSpec};

/// 99th percentile of χ² with 255 degrees of freedom.
const CHI2_255_P01: f64 = 310.457_388;

fn hamming(a: &[u16], b: &[u16]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn one_nn(train: &[TokenizedFlow], x: &TokenizedFlow) -> usize {
    train
        .iter()
        .min_by_key(|t| hamming(&t.header_tokens, &x.header_tokens))
        .and_then(|t| t.label)
        .unwrap()
}

#[test]
fn full_entropy_payload_is_uniform() {
    let spec = SyntheticSpec { entropy: 1.0, flows_per_class: 157, ..SyntheticSpec::default() };
    let data = generate_flows(&spec).unwrap();
    let bytes: Vec<u16> = data
        .train
        .iter()
        .chain(&data.test)
        .flat_map(|s| s.flow.payload_tokens.iter().copied())
        .take(100_000)
        .collect();
    assert_eq!(bytes.len(), 100_000);
    let mut hist = [0usize; 256];
    for b in &bytes {
        hist[*b as usize] += 1;
    }
    let expected = bytes.len() as f64 / 256.0;
    let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_255_P01, "χ² = {chi2}");
    assert!(data.train.iter().all(|s| s.payload_random.iter().all(|&r| r)));
}

#[test]
fn nearest_neighbor_separates_templated_headers() {
    let data = generate_flows(&SyntheticSpec { entropy: 0.0, ..SyntheticSpec::default() }).unwrap();
    let train = data.train_flows();
    let test = data.test_flows();
    let correct = test.iter().filter(|x| one_nn(&train, x) == x.label.unwrap()).count();
    assert_eq!(correct, test.len());
}

#[test]
fn zero_entropy_payload_is_templated() {
    let spec = SyntheticSpec { entropy: 0.0, signature_values: 1, flows_per_class: 20, ..SyntheticSpec::default() };
    let data = generate_flows(&spec).unwrap();
    for c in 0..4 {
        let of_class: Vec<_> = data.train.iter().filter(|s| s.flow.label == Some(c)).collect();
        assert!(of_class.iter().all(|s| s.flow.payload_tokens == of_class[0].flow.payload_tokens));
        assert!(of_class.iter().all(|s| s.payload_random.iter().all(|&r| !r)));
    }
}

#[test]
fn class_templates_differ_somewhere_in_the_header() {
    let spec = SyntheticSpec { flows_per_class: 30, ..SyntheticSpec::default() };
    let data = generate_flows(&spec).unwrap();
    let flows = data.train_flows();
    let of = |c| flows.iter().filter(move |f| f.label == Some(c));
    let len = flows[0].header_tokens.len();
    // Positions constant within a class.
    let constant = |c| -> Vec<Option<u16>> {
        (0..len)
            .map(|i| {
                let v = of(c).next().unwrap().header_tokens[i];
                of(c).all(|f| f.header_tokens[i] == v).then_some(v)
            })
            .collect()
    };
    for a in 0..4 {
        for b in a + 1..4 {
            let (ca, cb) = (constant(a), constant(b));
            assert!(ca.iter().zip(&cb).any(|(x, y)| matches!((x, y), (Some(u), Some(v)) if u != v)));
        }
    }
}

#[test]
fn grouped_headers_are_shared_within_a_group() {
    let spec = SyntheticSpec { header_group: 2, noise_bytes: 0, flows_per_class: 10, ..SyntheticSpec::default() };
    let data = generate_flows(&spec).unwrap();
    let first = |c| data.train.iter().find(|s| s.flow.label == Some(c)).unwrap().flow.header_tokens.clone();
    assert_eq!(first(0), first(1));
    assert_eq!(first(2), first(3));
    assert_ne!(first(0), first(2));
}

#[test]
fn split_and_corpus_shapes() {
    let spec = SyntheticSpec::default();
    let data = generate_flows(&spec).unwrap();
    assert_eq!(data.train.len() + data.test.len(), 2000);
    for c in 0..4 {
        assert_eq!(data.test.iter().filter(|s| s.flow.label == Some(c)).count(), 100);
    }
    let corpus = generate_corpus(&spec, 50).unwrap();
    assert_eq!(corpus.len(), 50);
    assert!(corpus.iter().all(|f| f.label.is_none()));
    assert_eq!(corpus, generate_corpus(&spec, 50).unwrap());
    let train = data.train_flows();
    assert!(corpus.iter().all(|f| !train.iter().any(|t| t.header_tokens == f.header_tokens && t.payload_tokens == f.payload_tokens)));
    assert!(generate_flows(&SyntheticSpec { entropy: 1.5, ..spec.clone() }).is_err());
    assert!(generate_flows(&SyntheticSpec { signature_values: 100, ..spec }).is_err());
}

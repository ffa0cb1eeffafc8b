use std::net::{IpAddr, Ipv4Addr};

use proptest::prelude::*;
use trafficmoe::capture::{parse_pcap, split_flows, Endpoint, Flow, FlowKey, SplitPacket};
use trafficmoe::preprocess::{
    anonymize, assemble_flow, read_dataset, stride_cut, tokenize, tokenize_flows, write_dataset, DatasetError,
    PreprocessConfig, TokenizedFlow,
};
use trafficmoe::synth::{craft_pcap, PacketSpec, Transport, DEFAULT_SNAPLEN};

fn raw_flow(packets: Vec<(Vec<u8>, Vec<u8>)>) -> Flow {
    let ep = Endpoint { ip: vec![0; 4], port: 0 };
    Flow {
        key: FlowKey::new(ep.clone(), ep, 6),
        packets: packets
            .into_iter()
            .map(|(header, payload)| SplitPacket {
                header,
                payload,
                timestamp_us: 0,
                transport_offset: 0,
            })
            .collect(),
    }
}

fn packets() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    prop::collection::vec(
        (prop::collection::vec(any::<u8>(), 0..50), prop::collection::vec(any::<u8>(), 0..50)),
        1..8,
    )
}

fn ts_option(val: u32, ecr: u32) -> Vec<u8> {
    let mut o = vec![1, 1, 8, 10];
    o.extend_from_slice(&val.to_be_bytes());
    o.extend_from_slice(&ecr.to_be_bytes());
    o
}

fn tcp_flow(n: usize, seed: u32) -> Flow {
    let a = IpAddr::V4(Ipv4Addr::new(192, 168, 1, 7));
    let b = IpAddr::V4(Ipv4Addr::new(172, 16, 0, 9));
    let specs: Vec<PacketSpec> = (0..n)
        .map(|i| {
            let fwd = i % 2 == 0;
            let (src, dst, sp, dp) = if fwd { (a, b, 51000, 443) } else { (b, a, 443, 51000) };
            let val = if fwd { 1000 + seed + i as u32 } else { 777_000 + i as u32 };
            let ecr = if i == 0 { 0 } else if fwd { 777_000 + i as u32 - 1 } else { 1000 + seed + i as u32 - 1 };
            PacketSpec::Ip {
                timestamp_us: i as u64,
                src,
                dst,
                transport: Transport::Tcp {
                    src_port: sp,
                    dst_port: dp,
                    seq: 99 + i as u32,
                    flags: 0x18,
                    options: ts_option(val, ecr),
                },
                payload: vec![i as u8; 6],
            }
        })
        .collect();
    let flows = split_flows(&parse_pcap(&craft_pcap(&specs, DEFAULT_SNAPLEN).unwrap()).unwrap());
    flows.into_values().next().unwrap()
}

fn changed_bytes(a: &[u8], b: &[u8]) -> Vec<usize> {
    a.iter().zip(b).enumerate().filter(|(_, (x, y))| x != y).map(|(i, _)| i).collect()
}

#[test]
fn timestamps_rebase_per_direction() {
    let flow = tcp_flow(4, 5);
    let anon = anonymize(&flow, 11);
    // Option block starts at 20 + 20; TS value sits after two NOPs and kind/len.
    let ts = |p: &SplitPacket| {
        let off = p.transport_offset + 24;
        let r = |o: usize| u32::from_be_bytes(p.header[o..o + 4].try_into().unwrap());
        (r(off), r(off + 4))
    };
    assert_eq!(ts(&anon.packets[0]), (0, 0));
    assert_eq!(ts(&anon.packets[1]), (0, 0));
    assert_eq!(ts(&anon.packets[2]), (2, 0));
    assert_eq!(ts(&anon.packets[3]), (2, 2));
}

#[test]
fn anonymization_touches_only_identifiers() {
    let flow = tcp_flow(6, 0);
    let anon = anonymize(&flow, 3);
    assert_eq!(anon, anonymize(&flow, 3));
    assert_ne!(anon, anonymize(&flow, 4));
    let allowed: Vec<usize> = (12..20).chain(20..24).chain(44..52).collect();
    for (p, q) in flow.packets.iter().zip(&anon.packets) {
        assert_eq!(p.payload, q.payload);
        assert_eq!(p.header.len(), q.header.len());
        for i in changed_bytes(&p.header, &q.header) {
            assert!(allowed.contains(&i), "byte {i} changed");
        }
        assert_eq!(q.flow_key(), anon.key);
    }
    // Consistent mapping: both directions still form one flow.
    let src0 = anon.packets[0].endpoints().0;
    let dst1 = anon.packets[1].endpoints().1;
    assert_eq!(src0, dst1);
    assert_ne!(src0, flow.packets[0].endpoints().0);
}

#[test]
fn tokenize_flows_labels_and_counts() {
    let flows = vec![tcp_flow(2, 0), tcp_flow(7, 1)];
    let cfg = PreprocessConfig::default();
    let (tok, stats) = tokenize_flows(&flows, &cfg, Some(3));
    assert_eq!(tok.len(), 2);
    assert!(tok.iter().all(|t| t.label == Some(3)));
    assert_eq!(stats.flows, 2);
    assert_eq!(stats.short_flows, 1);
    assert_eq!(stats.per_class.get(&3), Some(&2));
    let (again, _) = tokenize_flows(&flows, &cfg, Some(3));
    assert_eq!(tok, again);
}

#[test]
fn dataset_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let flows = vec![
        TokenizedFlow { header_tokens: vec![1, 2], payload_tokens: vec![257], label: Some(0) },
        TokenizedFlow { header_tokens: vec![0, 255], payload_tokens: vec![3], label: None },
    ];
    write_dataset(&path, &flows).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), flows);

    std::fs::write(&path, "{\"label\":1,\"h\":[1],\"p\":[2]}\n{\"label\":1,\"h\":[300],\"p\":[2]}\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(DatasetError::MalformedRecord { line: 2, .. })));
    std::fs::write(&path, "{\"label\":1,\"h\":[1],\"p\":[2],\"extra\":0}\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(DatasetError::MalformedRecord { line: 1, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn strides_reassemble_the_flow(pk in packets(), m in 1usize..6, nh in 1usize..20, np in 1usize..20, pick in any::<prop::sample::Index>()) {
        let flow = raw_flow(pk);
        let cfg = PreprocessConfig { packets: m, header_bytes: nh, payload_bytes: np, stride: 1, ..Default::default() };
        let seq = assemble_flow(&flow, &cfg);
        prop_assert_eq!(seq.bytes.len(), m * (nh + np));
        let divisors: Vec<usize> = (1..=seq.bytes.len()).filter(|d| seq.bytes.len() % d == 0).collect();
        let stride = divisors[pick.index(divisors.len())];
        let parts = stride_cut(&seq, stride).unwrap();
        prop_assert!(parts.iter().all(|p| p.len() == stride));
        prop_assert_eq!(parts.concat(), seq.bytes.clone());
    }

    #[test]
    fn tokens_follow_the_shape_law_with_zero_extension(pk in packets(), m in 1usize..6, nh in 1usize..20, np in 1usize..20) {
        let flow = raw_flow(pk.clone());
        let cfg = PreprocessConfig { packets: m, header_bytes: nh, payload_bytes: np, stride: 1, ..Default::default() };
        let t = tokenize(&flow, &cfg);
        prop_assert_eq!(t.header_tokens.len(), m * nh);
        prop_assert_eq!(t.payload_tokens.len(), m * np);
        for i in 0..m {
            for k in 0..nh {
                let want = pk.get(i).and_then(|(h, _)| h.get(k)).copied().unwrap_or(0) as u16;
                prop_assert_eq!(t.header_tokens[i * nh + k], want);
            }
            for k in 0..np {
                let want = pk.get(i).and_then(|(_, p)| p.get(k)).copied().unwrap_or(0) as u16;
                prop_assert_eq!(t.payload_tokens[i * np + k], want);
            }
        }
    }
}

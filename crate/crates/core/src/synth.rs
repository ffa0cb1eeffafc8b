//! Seeded generators: crafted pcap captures for ingest tests, and labeled
//! token datasets whose header and payload signal strengths are set
//! independently.

use std::net::IpAddr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{PROTO_TCP, PROTO_UDP};
use crate::preprocess::TokenizedFlow;
use crate::tensor::RngState;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("frame of {frame} bytes exceeds snaplen {snaplen}")]
    ExceedsSnaplen { frame: usize, snaplen: u32 },
    #[error("source and destination address families differ")]
    MixedAddressFamily,
    #[error("TCP options must be at most 40 bytes, got {0}")]
    OptionsTooLong(usize),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transport {
    Tcp {
        src_port: u16,
        dst_port: u16,
        seq: u32,
        flags: u8,
        /// Raw option bytes; zero-padded to a multiple of 4.
        options: Vec<u8>,
    },
    Udp {
        src_port: u16,
        dst_port: u16,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PacketSpec {
    Ip {
        timestamp_us: u64,
        src: IpAddr,
        dst: IpAddr,
        transport: Transport,
        payload: Vec<u8>,
    },
    /// An ARP request frame (non-IP traffic).
    Arp { timestamp_us: u64 },
}

const SRC_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 1];
const DST_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 2];

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn transport_bytes(t: &Transport, payload_len: usize) -> Result<(u8, Vec<u8>), SynthError> {
    match t {
        Transport::Tcp {
            src_port,
            dst_port,
            seq,
            flags,
            options,
        } => {
            if options.len() > 40 {
                return Err(SynthError::OptionsTooLong(options.len()));
            }
            let opt_len = options.len().div_ceil(4) * 4;
            let mut h = Vec::with_capacity(20 + opt_len);
            h.extend_from_slice(&src_port.to_be_bytes());
            h.extend_from_slice(&dst_port.to_be_bytes());
            h.extend_from_slice(&seq.to_be_bytes());
            h.extend_from_slice(&0u32.to_be_bytes());
            h.push((((20 + opt_len) / 4) as u8) << 4);
            h.push(*flags);
            h.extend_from_slice(&65535u16.to_be_bytes());
            h.extend_from_slice(&[0, 0, 0, 0]);
            h.extend_from_slice(options);
            h.resize(20 + opt_len, 0);
            Ok((PROTO_TCP, h))
        }
        Transport::Udp { src_port, dst_port } => {
            let mut h = Vec::with_capacity(8);
            h.extend_from_slice(&src_port.to_be_bytes());
            h.extend_from_slice(&dst_port.to_be_bytes());
            h.extend_from_slice(&((8 + payload_len) as u16).to_be_bytes());
            h.extend_from_slice(&[0, 0]);
            Ok((PROTO_UDP, h))
        }
    }
}

/// Full Ethernet frame for one packet description.
pub fn craft_frame(spec: &PacketSpec) -> Result<Vec<u8>, SynthError> {
    let mut frame = Vec::new();
    frame.extend_from_slice(&DST_MAC);
    frame.extend_from_slice(&SRC_MAC);
    match spec {
        PacketSpec::Arp { .. } => {
            frame.extend_from_slice(&0x0806u16.to_be_bytes());
            frame.extend_from_slice(&[0, 1, 0x08, 0, 6, 4, 0, 1]);
            frame.extend_from_slice(&SRC_MAC);
            frame.extend_from_slice(&[10, 0, 0, 1]);
            frame.extend_from_slice(&[0; 6]);
            frame.extend_from_slice(&[10, 0, 0, 2]);
        }
        PacketSpec::Ip {
            src,
            dst,
            transport,
            payload,
            ..
        } => {
            let (proto, th) = transport_bytes(transport, payload.len())?;
            match (src, dst) {
                (IpAddr::V4(s), IpAddr::V4(d)) => {
                    frame.extend_from_slice(&0x0800u16.to_be_bytes());
                    let total = (20 + th.len() + payload.len()) as u16;
                    let mut ip = vec![0x45, 0];
                    ip.extend_from_slice(&total.to_be_bytes());
                    ip.extend_from_slice(&[0, 1, 0x40, 0, 64, proto, 0, 0]);
                    ip.extend_from_slice(&s.octets());
                    ip.extend_from_slice(&d.octets());
                    let c = ipv4_checksum(&ip);
                    ip[10..12].copy_from_slice(&c.to_be_bytes());
                    frame.extend_from_slice(&ip);
                }
                (IpAddr::V6(s), IpAddr::V6(d)) => {
                    frame.extend_from_slice(&0x86DDu16.to_be_bytes());
                    frame.extend_from_slice(&[0x60, 0, 0, 0]);
                    frame.extend_from_slice(&((th.len() + payload.len()) as u16).to_be_bytes());
                    frame.extend_from_slice(&[proto, 64]);
                    frame.extend_from_slice(&s.octets());
                    frame.extend_from_slice(&d.octets());
                }
                _ => return Err(SynthError::MixedAddressFamily),
            }
            frame.extend_from_slice(&th);
            frame.extend_from_slice(payload);
        }
    }
    Ok(frame)
}

pub const DEFAULT_SNAPLEN: u32 = 65535;

/// Little-endian classic pcap with an Ethernet link type.
pub fn craft_pcap(packets: &[PacketSpec], snaplen: u32) -> Result<Vec<u8>, SynthError> {
    let mut out = Vec::new();
    out.extend_from_slice(&0xa1b2c3d4u32.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&snaplen.to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    for p in packets {
        let frame = craft_frame(p)?;
        if frame.len() > snaplen as usize {
            return Err(SynthError::ExceedsSnaplen {
                frame: frame.len(),
                snaplen,
            });
        }
        let ts = match p {
            PacketSpec::Ip { timestamp_us, .. } | PacketSpec::Arp { timestamp_us } => *timestamp_us,
        };
        out.extend_from_slice(&((ts / 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&((ts % 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&frame);
    }
    Ok(out)
}

/// Parameters of a labeled synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub flows_per_class: usize,
    pub packets: usize,
    pub header_bytes: usize,
    pub payload_bytes: usize,
    /// Header offsets (per packet) whose template byte depends on the class.
    pub discriminative_bytes: usize,
    /// Header offsets (per packet) drawn uniformly for every flow.
    pub noise_bytes: usize,
    /// Consecutive classes sharing one header template; 1 gives every class
    /// its own template.
    pub header_group: usize,
    /// Probability that a flow carries another class's header template.
    pub header_confusion: f64,
    /// Draw header template bytes from the payload alphabets of classes in
    /// other header groups, so one byte value means different things in
    /// the two modalities.
    pub cross_modal_values: bool,
    /// Probability that a payload byte is uniform random instead of a
    /// class signature byte.
    pub entropy: f64,
    /// Size of each class's signature alphabet. Signature bytes are drawn
    /// from it at any payload position; with 1 the payload is a constant
    /// per-class template.
    pub signature_values: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            flows_per_class: 500,
            packets: 5,
            header_bytes: 32,
            payload_bytes: 32,
            discriminative_bytes: 4,
            noise_bytes: 8,
            header_group: 1,
            header_confusion: 0.0,
            cross_modal_values: false,
            entropy: 0.5,
            signature_values: 4,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.classes == 0 || self.flows_per_class == 0 {
            return bad("classes and flows_per_class must be positive");
        }
        if self.packets == 0 || self.header_bytes == 0 || self.payload_bytes == 0 {
            return bad("packets, header_bytes and payload_bytes must be positive");
        }
        if self.header_group == 0 {
            return bad("header_group must be positive");
        }
        if self.signature_values == 0 || self.signature_values * self.classes > 256 {
            return bad("signature_values × classes must lie in 1..=256");
        }
        if self.discriminative_bytes + self.noise_bytes > self.header_bytes {
            return bad("discriminative_bytes + noise_bytes exceeds header_bytes");
        }
        for (name, v) in [
            ("header_confusion", self.header_confusion),
            ("entropy", self.entropy),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One generated flow plus which payload bytes were drawn at random.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSample {
    pub flow: TokenizedFlow,
    pub payload_random: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticDataset {
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn train_flows(&self) -> Vec<TokenizedFlow> {
        self.train.iter().map(|s| s.flow.clone()).collect()
    }

    pub fn test_flows(&self) -> Vec<TokenizedFlow> {
        self.test.iter().map(|s| s.flow.clone()).collect()
    }
}

struct Templates {
    /// `[class][header position]`
    header: Vec<Vec<u8>>,
    noise: Vec<bool>,
    /// `[class]` signature alphabet, disjoint across classes.
    payload: Vec<Vec<u8>>,
}

const TEMPLATE_STREAM: u64 = 0x7E3A;
const FLOW_STREAM: u64 = 0xF10E;
const SPLIT_STREAM: u64 = 0x5B11;

fn templates(spec: &SyntheticSpec) -> Templates {
    let mut rng = RngState::new(spec.seed, TEMPLATE_STREAM);
    let mut offsets: Vec<usize> = (0..spec.header_bytes).collect();
    offsets.shuffle(&mut rng);
    let disc = &offsets[..spec.discriminative_bytes];
    let noise_offsets = &offsets[spec.discriminative_bytes..spec.discriminative_bytes + spec.noise_bytes];
    let lh = spec.packets * spec.header_bytes;
    let common: Vec<u8> = (0..lh).map(|_| rng.gen()).collect();

    let mut alphabet: Vec<u8> = (0..=255).collect();
    alphabet.shuffle(&mut rng);
    let payload: Vec<Vec<u8>> = alphabet
        .chunks(spec.signature_values)
        .take(spec.classes)
        .map(|c| c.to_vec())
        .collect();

    // Template bytes at discriminative offsets differ between header groups.
    let groups = spec.classes.div_ceil(spec.header_group);
    let mut header = vec![common.clone(); spec.classes];
    for pkt in 0..spec.packets {
        for &off in disc {
            let mut taken: Vec<u8> = Vec::with_capacity(groups);
            for g in 0..groups {
                let pool: Vec<u8> = if spec.cross_modal_values && groups > 1 {
                    (0..spec.classes)
                        .filter(|&c| c / spec.header_group != g)
                        .flat_map(|c| payload[c].iter().copied())
                        .filter(|v| !taken.contains(v))
                        .collect()
                } else {
                    Vec::new()
                };
                let value = match pool.choose(&mut rng) {
                    Some(&v) => v,
                    None => loop {
                        let v: u8 = rng.gen();
                        if !taken.contains(&v) || taken.len() >= 256 {
                            break v;
                        }
                    },
                };
                taken.push(value);
            }
            for (c, h) in header.iter_mut().enumerate() {
                h[pkt * spec.header_bytes + off] = taken[c / spec.header_group];
            }
        }
    }
    let mut noise = vec![false; lh];
    for pkt in 0..spec.packets {
        for &off in noise_offsets {
            noise[pkt * spec.header_bytes + off] = true;
        }
    }
    Templates {
        header,
        noise,
        payload,
    }
}

fn sample_flow(spec: &SyntheticSpec, t: &Templates, class: usize, index: usize) -> SyntheticSample {
    let mut rng = RngState::derive(spec.seed, &[FLOW_STREAM, class as u64, index as u64]);
    let source = if spec.classes > 1 && rng.gen_bool(spec.header_confusion) {
        let other = rng.gen_range(0..spec.classes - 1);
        if other >= class {
            other + 1
        } else {
            other
        }
    } else {
        class
    };
    let header_tokens = t.header[source]
        .iter()
        .zip(&t.noise)
        .map(|(&b, &noisy)| (if noisy { rng.gen::<u8>() } else { b }) as u16)
        .collect();
    let lp = spec.packets * spec.payload_bytes;
    let signature = &t.payload[class];
    let mut payload_random = Vec::with_capacity(lp);
    let payload_tokens = (0..lp)
        .map(|_| {
            let random = rng.gen_bool(spec.entropy);
            payload_random.push(random);
            let b: u8 = if random {
                rng.gen()
            } else {
                *signature.choose(&mut rng).expect("non-empty alphabet")
            };
            b as u16
        })
        .collect();
    SyntheticSample {
        flow: TokenizedFlow {
            header_tokens,
            payload_tokens,
            label: Some(class),
        },
        payload_random,
    }
}

/// Labeled flows with a per-class stratified train/test split.
pub fn generate_flows(spec: &SyntheticSpec) -> Result<SyntheticDataset, SynthError> {
    spec.validate()?;
    let t = templates(spec);
    let per_class: Vec<Vec<SyntheticSample>> = (0..spec.classes)
        .into_par_iter()
        .map(|c| {
            let mut samples: Vec<SyntheticSample> =
                (0..spec.flows_per_class).map(|i| sample_flow(spec, &t, c, i)).collect();
            samples.shuffle(&mut RngState::derive(spec.seed, &[SPLIT_STREAM, c as u64]));
            samples
        })
        .collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for samples in per_class {
        let n_test = (spec.test_fraction * samples.len() as f64).round() as usize;
        let mut it = samples.into_iter();
        test.extend(it.by_ref().take(n_test));
        train.extend(it);
    }
    Ok(SyntheticDataset { train, test })
}

/// Unlabeled flows drawn from the same templates, for pretraining.
pub fn generate_corpus(spec: &SyntheticSpec, flows: usize) -> Result<Vec<TokenizedFlow>, SynthError> {
    spec.validate()?;
    let t = templates(spec);
    Ok((0..flows)
        .into_par_iter()
        .map(|i| {
            // Index space disjoint from the labeled draws.
            let class = i % spec.classes;
            let mut s = sample_flow(spec, &t, class, spec.flows_per_class + i);
            s.flow.label = None;
            s.flow
        })
        .collect())
}

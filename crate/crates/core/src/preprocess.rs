//! Flow → fixed-shape token sequences, and the JSON-lines dataset format.
//!
//! Each flow is cut to its first `packets` packets; every packet contributes
//! exactly `header_bytes` header bytes and `payload_bytes` payload bytes
//! (cropped or zero-padded). Header and payload bytes become two separate
//! token sequences. Token ids 0–255 are byte values, [`PAD_TOKEN`] and
//! [`MASK_TOKEN`] are reserved for batching and masked pretraining.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{Flow, PROTO_TCP};
use crate::tensor::RngState;

pub const PAD_TOKEN: u16 = 256;
pub const MASK_TOKEN: u16 = 257;
pub const VOCAB_SIZE: usize = 258;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("stride {stride} does not divide flow length {length}")]
    NonDivisibleStride { stride: usize, length: usize },
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Packets kept per flow.
    pub packets: usize,
    /// Header bytes kept per packet.
    pub header_bytes: usize,
    /// Payload bytes kept per packet.
    pub payload_bytes: usize,
    /// Stride length for segmentation of the flow byte sequence.
    pub stride: usize,
    pub anonymize: bool,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            packets: 5,
            header_bytes: 32,
            payload_bytes: 32,
            stride: 8,
            anonymize: true,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn flow_length(&self) -> usize {
        self.packets * (self.header_bytes + self.payload_bytes)
    }

    pub fn header_len(&self) -> usize {
        self.packets * self.header_bytes
    }

    pub fn payload_len(&self) -> usize {
        self.packets * self.payload_bytes
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.packets == 0 || self.header_bytes == 0 || self.payload_bytes == 0 {
            return Err(PreprocessError::InvalidConfig(
                "packets, header_bytes and payload_bytes must be at least 1".into(),
            ));
        }
        if self.stride == 0 || self.flow_length() % self.stride != 0 {
            return Err(PreprocessError::NonDivisibleStride {
                stride: self.stride,
                length: self.flow_length(),
            });
        }
        Ok(())
    }
}

/// First `n` bytes of `bytes`, zero-extended to exactly `n`.
pub fn crop_pad(bytes: &[u8], n: usize) -> Vec<u8> {
    let mut out = vec![0u8; n];
    let k = bytes.len().min(n);
    out[..k].copy_from_slice(&bytes[..k]);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPacket {
    pub header_fixed: Vec<u8>,
    pub payload_fixed: Vec<u8>,
}

/// Fixed packets of a flow, zero-extended to `cfg.packets` entries.
pub fn fixed_packets(flow: &Flow, cfg: &PreprocessConfig) -> Vec<FixedPacket> {
    (0..cfg.packets)
        .map(|i| match flow.packets.get(i) {
            Some(p) => FixedPacket {
                header_fixed: crop_pad(&p.header, cfg.header_bytes),
                payload_fixed: crop_pad(&p.payload, cfg.payload_bytes),
            },
            None => FixedPacket {
                header_fixed: vec![0; cfg.header_bytes],
                payload_fixed: vec![0; cfg.payload_bytes],
            },
        })
        .collect()
}

/// Header/payload interleaved byte sequence of one flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowByteSequence {
    pub bytes: Vec<u8>,
}

pub fn assemble_flow(flow: &Flow, cfg: &PreprocessConfig) -> FlowByteSequence {
    let mut bytes = Vec::with_capacity(cfg.flow_length());
    for fp in fixed_packets(flow, cfg) {
        bytes.extend_from_slice(&fp.header_fixed);
        bytes.extend_from_slice(&fp.payload_fixed);
    }
    FlowByteSequence { bytes }
}

/// Non-overlapping segments of length `stride`; concatenating them in order
/// reproduces the sequence.
pub fn stride_cut(seq: &FlowByteSequence, stride: usize) -> Result<Vec<&[u8]>, PreprocessError> {
    let length = seq.bytes.len();
    if stride == 0 || length % stride != 0 {
        return Err(PreprocessError::NonDivisibleStride { stride, length });
    }
    Ok(seq.bytes.chunks(stride).collect())
}

/// Model input for one flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedFlow {
    pub header_tokens: Vec<u16>,
    pub payload_tokens: Vec<u16>,
    pub label: Option<usize>,
}

pub fn tokenize(flow: &Flow, cfg: &PreprocessConfig) -> TokenizedFlow {
    let mut header_tokens = Vec::with_capacity(cfg.header_len());
    let mut payload_tokens = Vec::with_capacity(cfg.payload_len());
    for fp in fixed_packets(flow, cfg) {
        header_tokens.extend(fp.header_fixed.iter().map(|&b| b as u16));
        payload_tokens.extend(fp.payload_fixed.iter().map(|&b| b as u16));
    }
    TokenizedFlow {
        header_tokens,
        payload_tokens,
        label: None,
    }
}

fn tcp_timestamp_offset(header: &[u8], transport_offset: usize) -> Option<usize> {
    let t = transport_offset;
    if header.len() < t + 20 {
        return None;
    }
    let end = (t + (header[t + 12] >> 4) as usize * 4).min(header.len());
    let mut off = t + 20;
    while off < end {
        match header[off] {
            0 => return None,
            1 => off += 1,
            kind => {
                let len = *header.get(off + 1)? as usize;
                if len < 2 || off + len > end {
                    return None;
                }
                if kind == 8 && len == 10 {
                    return Some(off + 2);
                }
                off += len;
            }
        }
    }
    None
}

fn read_u32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Randomizes addresses and ports, and rebases TCP timestamp options so that
/// each direction's first timestamp reads zero. Deterministic in `seed`;
/// every other byte is left untouched.
pub fn anonymize(flow: &Flow, seed: u64) -> Flow {
    let mut rng = RngState::new(seed, 0xA707);
    let mut ip_map: HashMap<Vec<u8>, Vec<u8>> = HashMap::new();
    let mut port_map: HashMap<u16, u16> = HashMap::new();

    // First TSval per sender, keyed by the sender's original endpoint.
    let mut ts_base: HashMap<(Vec<u8>, u16), u32> = HashMap::new();
    for p in &flow.packets {
        if p.protocol() != PROTO_TCP {
            continue;
        }
        if let Some(off) = tcp_timestamp_offset(&p.header, p.transport_offset) {
            let (src, _) = p.endpoints();
            ts_base
                .entry((src.ip, src.port))
                .or_insert_with(|| read_u32(&p.header, off));
        }
    }

    let mut packets = Vec::with_capacity(flow.packets.len());
    for p in &flow.packets {
        let mut q = p.clone();
        let (src, dst) = p.endpoints();
        let (ip_ranges, width) = match p.ip_version() {
            4 => ([(12, &src.ip), (16, &dst.ip)], 4),
            _ => ([(8, &src.ip), (24, &dst.ip)], 16),
        };
        for (off, ip) in ip_ranges {
            let taken: Vec<Vec<u8>> = ip_map.values().cloned().collect();
            let replacement = ip_map.entry(ip.clone()).or_insert_with(|| loop {
                let cand: Vec<u8> = (0..width).map(|_| rng.gen::<u8>()).collect();
                if !taken.contains(&cand) {
                    break cand;
                }
            });
            q.header[off..off + width].copy_from_slice(replacement);
        }
        let t = p.transport_offset;
        for (off, port) in [(t, src.port), (t + 2, dst.port)] {
            let taken: Vec<u16> = port_map.values().copied().collect();
            let replacement = *port_map.entry(port).or_insert_with(|| loop {
                let cand: u16 = rng.gen();
                if !taken.contains(&cand) {
                    break cand;
                }
            });
            q.header[off..off + 2].copy_from_slice(&replacement.to_be_bytes());
        }
        if p.protocol() == PROTO_TCP {
            if let Some(off) = tcp_timestamp_offset(&p.header, t) {
                let ts_val = read_u32(&p.header, off);
                let ts_ecr = read_u32(&p.header, off + 4);
                let own = ts_base.get(&(src.ip.clone(), src.port)).copied().unwrap_or(0);
                let val = ts_val.wrapping_sub(own);
                let ecr = match ts_base.get(&(dst.ip.clone(), dst.port)) {
                    Some(&peer) if ts_ecr != 0 => ts_ecr.wrapping_sub(peer),
                    _ => ts_ecr,
                };
                q.header[off..off + 4].copy_from_slice(&val.to_be_bytes());
                q.header[off + 4..off + 8].copy_from_slice(&ecr.to_be_bytes());
            }
        }
        packets.push(q);
    }
    let key = packets
        .first()
        .map(|p| p.flow_key())
        .unwrap_or_else(|| flow.key.clone());
    Flow { key, packets }
}

/// Summary written beside every dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub flows: usize,
    pub unlabeled: usize,
    pub per_class: BTreeMap<usize, usize>,
    /// Flows with fewer packets than the configured count (zero-extended).
    pub short_flows: usize,
}

impl DatasetStats {
    pub fn from_tokenized(flows: &[TokenizedFlow]) -> Self {
        let mut stats = DatasetStats {
            flows: flows.len(),
            ..Default::default()
        };
        for f in flows {
            match f.label {
                Some(c) => *stats.per_class.entry(c).or_default() += 1,
                None => stats.unlabeled += 1,
            }
        }
        stats
    }
}

/// Anonymizes (when enabled) and tokenizes flows. Flow `i` uses seed
/// `cfg.seed ^ i`, so the output does not depend on scheduling.
pub fn tokenize_flows(
    flows: &[Flow],
    cfg: &PreprocessConfig,
    label: Option<usize>,
) -> (Vec<TokenizedFlow>, DatasetStats) {
    let tokenized: Vec<TokenizedFlow> = flows
        .par_iter()
        .enumerate()
        .map(|(i, flow)| {
            let mut t = if cfg.anonymize {
                tokenize(&anonymize(flow, cfg.seed ^ i as u64), cfg)
            } else {
                tokenize(flow, cfg)
            };
            t.label = label;
            t
        })
        .collect();
    let mut stats = DatasetStats::from_tokenized(&tokenized);
    stats.short_flows = flows.iter().filter(|f| f.packets.len() < cfg.packets).count();
    (tokenized, stats)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    label: Option<usize>,
    h: Vec<u16>,
    p: Vec<u16>,
}

pub fn write_dataset(path: impl AsRef<Path>, flows: &[TokenizedFlow]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in flows {
        let rec = Record {
            label: f.label,
            h: f.header_tokens.clone(),
            p: f.payload_tokens.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TokenizedFlow>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        if let Some(&bad) = rec.h.iter().chain(&rec.p).find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(DatasetError::MalformedRecord {
                line: line_no,
                reason: format!("token {bad} outside vocabulary of {VOCAB_SIZE}"),
            });
        }
        out.push(TokenizedFlow {
            header_tokens: rec.h,
            payload_tokens: rec.p,
            label: rec.label,
        });
    }
    Ok(out)
}

//! Classic pcap ingestion, packet decomposition and bidirectional flow
//! aggregation.
//!
//! Frames are parsed as Ethernet; the link layer is stripped and each
//! IPv4/IPv6 TCP or UDP packet becomes a [`SplitPacket`] holding the
//! network+transport header bytes and the application payload. Packets are
//! grouped by a canonical 5-tuple so both directions of a session share a
//! [`FlowKey`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const LINKTYPE_ETHERNET: u32 = 1;

const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
const PCAP_MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("not a classic pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("truncated pcap: {0}")]
    TruncatedRecord(String),
    #[error("malformed packet: {0}")]
    MalformedPacket(String),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CaptureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub timestamp_us: u64,
    pub link_type: u32,
    pub raw: Vec<u8>,
}

/// One side of a conversation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub ip: Vec<u8>,
    pub port: u16,
}

/// Canonical 5-tuple: the lexicographically smaller endpoint comes first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    endpoint_a: Endpoint,
    endpoint_b: Endpoint,
    protocol: u8,
}

impl FlowKey {
    pub fn new(a: Endpoint, b: Endpoint, protocol: u8) -> Self {
        let (endpoint_a, endpoint_b) = if a <= b { (a, b) } else { (b, a) };
        Self {
            endpoint_a,
            endpoint_b,
            protocol,
        }
    }

    pub fn endpoints(&self) -> (&Endpoint, &Endpoint) {
        (&self.endpoint_a, &self.endpoint_b)
    }

    pub fn protocol(&self) -> u8 {
        self.protocol
    }
}

/// Packet with the link layer removed and split at the end of the
/// transport header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPacket {
    /// Network-layer plus transport-layer header bytes.
    pub header: Vec<u8>,
    /// Bytes after the transport header.
    pub payload: Vec<u8>,
    pub timestamp_us: u64,
    /// Offset of the transport header inside `header`.
    pub transport_offset: usize,
}

impl SplitPacket {
    pub fn ip_version(&self) -> u8 {
        self.header[0] >> 4
    }

    pub fn protocol(&self) -> u8 {
        match self.ip_version() {
            4 => self.header[9],
            // Resolved during splitting; extension headers are skipped.
            _ => self.ipv6_transport_protocol(),
        }
    }

    fn ipv6_transport_protocol(&self) -> u8 {
        let mut next = self.header[6];
        let mut off = 40;
        while off < self.transport_offset {
            let ext = &self.header[off..];
            let len = if next == 44 { 8 } else { (ext[1] as usize + 1) * 8 };
            next = ext[0];
            off += len;
        }
        next
    }

    /// `(source, destination)` addresses and ports as they appear on the wire.
    pub fn endpoints(&self) -> (Endpoint, Endpoint) {
        let (src_ip, dst_ip) = match self.ip_version() {
            4 => (self.header[12..16].to_vec(), self.header[16..20].to_vec()),
            _ => (self.header[8..24].to_vec(), self.header[24..40].to_vec()),
        };
        let t = self.transport_offset;
        let sport = u16::from_be_bytes([self.header[t], self.header[t + 1]]);
        let dport = u16::from_be_bytes([self.header[t + 2], self.header[t + 3]]);
        (
            Endpoint {
                ip: src_ip,
                port: sport,
            },
            Endpoint {
                ip: dst_ip,
                port: dport,
            },
        )
    }

    pub fn flow_key(&self) -> FlowKey {
        let (a, b) = self.endpoints();
        FlowKey::new(a, b, self.protocol())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flow {
    pub key: FlowKey,
    /// Packets in capture order.
    pub packets: Vec<SplitPacket>,
}

pub fn read_pcap(path: impl AsRef<Path>) -> Result<Vec<PacketRecord>> {
    let bytes = fs::read(path)?;
    parse_pcap(&bytes)
}

/// Parses an in-memory classic pcap capture, honoring either byte order.
pub fn parse_pcap(bytes: &[u8]) -> Result<Vec<PacketRecord>> {
    if bytes.len() < 4 {
        return Err(CaptureError::TruncatedRecord(format!(
            "{} bytes is shorter than the magic number",
            bytes.len()
        )));
    }
    let magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let little = match magic {
        PCAP_MAGIC => true,
        PCAP_MAGIC_SWAPPED => false,
        other => return Err(CaptureError::BadMagic(other)),
    };
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(CaptureError::TruncatedRecord(
            "global header shorter than 24 bytes".into(),
        ));
    }
    let u32_at = |off: usize| {
        let b = [bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]];
        if little {
            u32::from_le_bytes(b)
        } else {
            u32::from_be_bytes(b)
        }
    };
    let link_type = u32_at(20);

    let mut records = Vec::new();
    let mut off = GLOBAL_HEADER_LEN;
    while off < bytes.len() {
        if bytes.len() - off < RECORD_HEADER_LEN {
            return Err(CaptureError::TruncatedRecord(format!(
                "record header at offset {off} has only {} bytes",
                bytes.len() - off
            )));
        }
        let ts_sec = u32_at(off) as u64;
        let ts_usec = u32_at(off + 4) as u64;
        let incl_len = u32_at(off + 8) as usize;
        let start = off + RECORD_HEADER_LEN;
        if bytes.len() - start < incl_len {
            return Err(CaptureError::TruncatedRecord(format!(
                "record at offset {off} claims {incl_len} bytes, {} remain",
                bytes.len() - start
            )));
        }
        records.push(PacketRecord {
            timestamp_us: ts_sec * 1_000_000 + ts_usec,
            link_type,
            raw: bytes[start..start + incl_len].to_vec(),
        });
        off = start + incl_len;
    }
    Ok(records)
}

fn malformed(msg: impl Into<String>) -> CaptureError {
    CaptureError::MalformedPacket(msg.into())
}

fn is_dhcp(sport: u16, dport: u16) -> bool {
    matches!(sport, 67 | 68) || matches!(dport, 67 | 68)
}

/// Strips the link layer and separates header from payload.
///
/// Returns `Ok(None)` for traffic that is not kept: non-IP ethertypes,
/// transports other than TCP/UDP, non-initial IPv4 fragments and DHCP.
pub fn split_packet(record: &PacketRecord) -> Result<Option<SplitPacket>> {
    if record.link_type != LINKTYPE_ETHERNET {
        return Err(CaptureError::UnsupportedLinkType(record.link_type));
    }
    let raw = &record.raw;
    if raw.len() < 14 {
        return Err(malformed(format!("{}-byte frame shorter than Ethernet header", raw.len())));
    }
    let mut ethertype = u16::from_be_bytes([raw[12], raw[13]]);
    let mut net_off = 14;
    if ethertype == ETHERTYPE_VLAN {
        if raw.len() < 18 {
            return Err(malformed("truncated VLAN tag"));
        }
        ethertype = u16::from_be_bytes([raw[16], raw[17]]);
        net_off = 18;
    }
    let ip = &raw[net_off..];
    let (ip_end, transport_offset, protocol) = match ethertype {
        ETHERTYPE_IPV4 => match ipv4_layout(ip)? {
            Some(v) => v,
            None => return Ok(None),
        },
        ETHERTYPE_IPV6 => match ipv6_layout(ip)? {
            Some(v) => v,
            None => return Ok(None),
        },
        _ => return Ok(None),
    };
    let ip = &ip[..ip_end];
    let transport = &ip[transport_offset..];
    let transport_len = match protocol {
        PROTO_TCP => {
            if transport.len() < 20 {
                return Err(malformed("truncated TCP header"));
            }
            let len = (transport[12] >> 4) as usize * 4;
            if len < 20 || len > transport.len() {
                return Err(malformed(format!("TCP data offset {len} inconsistent")));
            }
            len
        }
        PROTO_UDP => {
            if transport.len() < 8 {
                return Err(malformed("truncated UDP header"));
            }
            let sport = u16::from_be_bytes([transport[0], transport[1]]);
            let dport = u16::from_be_bytes([transport[2], transport[3]]);
            if is_dhcp(sport, dport) {
                return Ok(None);
            }
            8
        }
        _ => return Ok(None),
    };
    let split = transport_offset + transport_len;
    Ok(Some(SplitPacket {
        header: ip[..split].to_vec(),
        payload: ip[split..].to_vec(),
        timestamp_us: record.timestamp_us,
        transport_offset,
    }))
}

/// `(end of IP datagram, transport offset, protocol)` for IPv4.
fn ipv4_layout(ip: &[u8]) -> Result<Option<(usize, usize, u8)>> {
    if ip.len() < 20 {
        return Err(malformed(format!("{}-byte IPv4 header", ip.len())));
    }
    if ip[0] >> 4 != 4 {
        return Err(malformed(format!("IPv4 ethertype with version {}", ip[0] >> 4)));
    }
    let ihl = (ip[0] & 0x0f) as usize * 4;
    if ihl < 20 || ihl > ip.len() {
        return Err(malformed(format!(
            "IHL {ihl} inconsistent with {} captured bytes",
            ip.len()
        )));
    }
    let total = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    if total < ihl {
        return Err(malformed(format!("total length {total} below IHL {ihl}")));
    }
    let frag_offset = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff;
    if frag_offset != 0 {
        return Ok(None);
    }
    // Trailing Ethernet padding is not part of the datagram.
    let end = total.min(ip.len());
    Ok(Some((end, ihl, ip[9])))
}

fn ipv6_layout(ip: &[u8]) -> Result<Option<(usize, usize, u8)>> {
    if ip.len() < 40 {
        return Err(malformed(format!("{}-byte IPv6 header", ip.len())));
    }
    if ip[0] >> 4 != 6 {
        return Err(malformed(format!("IPv6 ethertype with version {}", ip[0] >> 4)));
    }
    let payload_len = u16::from_be_bytes([ip[4], ip[5]]) as usize;
    let end = (40 + payload_len).min(ip.len());
    let mut next = ip[6];
    let mut off = 40;
    loop {
        match next {
            PROTO_TCP | PROTO_UDP => return Ok(Some((end, off, next))),
            // hop-by-hop, routing, destination options, fragment
            0 | 43 | 60 | 44 => {
                if off + 8 > end {
                    return Err(malformed("truncated IPv6 extension header"));
                }
                let len = if next == 44 {
                    8
                } else {
                    (ip[off + 1] as usize + 1) * 8
                };
                if next == 44 {
                    let frag = u16::from_be_bytes([ip[off + 2], ip[off + 3]]) >> 3;
                    if frag != 0 {
                        return Ok(None);
                    }
                }
                next = ip[off];
                off += len;
                if off > end {
                    return Err(malformed("IPv6 extension header overruns packet"));
                }
            }
            _ => return Ok(None),
        }
    }
}

/// Groups packets into bidirectional flows keyed by canonical 5-tuple.
/// Packets that fail to parse or are filtered out are skipped.
pub fn split_flows(records: &[PacketRecord]) -> BTreeMap<FlowKey, Flow> {
    let mut flows: BTreeMap<FlowKey, Flow> = BTreeMap::new();
    for record in records {
        let Ok(Some(packet)) = split_packet(record) else {
            continue;
        };
        let key = packet.flow_key();
        flows
            .entry(key.clone())
            .or_insert_with(|| Flow {
                key,
                packets: Vec::new(),
            })
            .packets
            .push(packet);
    }
    flows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ethernet(ethertype: u16, body: &[u8]) -> Vec<u8> {
        let mut f = vec![0u8; 12];
        f.extend_from_slice(&ethertype.to_be_bytes());
        f.extend_from_slice(body);
        f
    }

    fn ipv4_tcp(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16, payload: &[u8]) -> Vec<u8> {
        let total = (20 + 20 + payload.len()) as u16;
        let mut p = vec![0x45, 0, 0, 0, 0, 0, 0x40, 0, 64, PROTO_TCP, 0, 0];
        p[2..4].copy_from_slice(&total.to_be_bytes());
        p.extend_from_slice(&src);
        p.extend_from_slice(&dst);
        p.extend_from_slice(&sport.to_be_bytes());
        p.extend_from_slice(&dport.to_be_bytes());
        p.extend_from_slice(&[0; 8]);
        p.extend_from_slice(&[0x50, 0x18, 0, 0, 0, 0, 0, 0]);
        p.extend_from_slice(payload);
        p
    }

    fn record(raw: Vec<u8>) -> PacketRecord {
        PacketRecord {
            timestamp_us: 0,
            link_type: LINKTYPE_ETHERNET,
            raw,
        }
    }

    #[test]
    fn arp_is_dropped() {
        let r = record(ethernet(0x0806, &[0u8; 28]));
        assert_eq!(split_packet(&r).unwrap(), None);
    }

    #[test]
    fn tcp_split_lengths_follow_header_fields() {
        let body = ipv4_tcp([10, 0, 0, 1], [10, 0, 0, 2], 1234, 443, &[1, 2, 3, 4, 5, 6, 7, 8]);
        let p = split_packet(&record(ethernet(ETHERTYPE_IPV4, &body)))
            .unwrap()
            .unwrap();
        assert_eq!(p.header.len(), 40);
        assert_eq!(p.payload, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(p.header[0], 0x45);
        assert_eq!(p.transport_offset, 20);
    }

    #[test]
    fn ethernet_padding_is_trimmed() {
        let mut body = ipv4_tcp([1, 1, 1, 1], [2, 2, 2, 2], 5, 6, &[]);
        body.extend_from_slice(&[0u8; 6]);
        let p = split_packet(&record(ethernet(ETHERTYPE_IPV4, &body)))
            .unwrap()
            .unwrap();
        assert!(p.payload.is_empty());
    }

    #[test]
    fn inconsistent_ihl_is_malformed() {
        let mut body = ipv4_tcp([1, 1, 1, 1], [2, 2, 2, 2], 5, 6, &[]);
        body[0] = 0x4f; // 60-byte header claimed
        body.truncate(30);
        assert!(matches!(
            split_packet(&record(ethernet(ETHERTYPE_IPV4, &body))),
            Err(CaptureError::MalformedPacket(_))
        ));
    }

    #[test]
    fn non_ethernet_link_rejected() {
        let r = PacketRecord {
            timestamp_us: 0,
            link_type: 101,
            raw: vec![0x45; 40],
        };
        assert!(matches!(
            split_packet(&r),
            Err(CaptureError::UnsupportedLinkType(101))
        ));
    }

    #[test]
    fn both_directions_share_a_key() {
        let a = Endpoint {
            ip: vec![10, 0, 0, 9],
            port: 80,
        };
        let b = Endpoint {
            ip: vec![10, 0, 0, 1],
            port: 5555,
        };
        assert_eq!(
            FlowKey::new(a.clone(), b.clone(), 6),
            FlowKey::new(b.clone(), a.clone(), 6)
        );
        assert_eq!(FlowKey::new(a.clone(), b.clone(), 6).endpoints().0, &b);
    }

    #[test]
    fn pcapng_magic_rejected() {
        let mut bytes = vec![0x0a, 0x0d, 0x0d, 0x0a];
        bytes.extend_from_slice(&[0u8; 20]);
        assert!(matches!(parse_pcap(&bytes), Err(CaptureError::BadMagic(0x0a0d0d0a))));
    }

    #[test]
    fn truncated_record_detected() {
        let mut bytes = PCAP_MAGIC.to_le_bytes().to_vec();
        bytes.extend_from_slice(&[2, 0, 4, 0]);
        bytes.extend_from_slice(&[0u8; 8]);
        bytes.extend_from_slice(&65535u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        // record claiming 100 bytes with only 10 present
        bytes.extend_from_slice(&[0u8; 8]);
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 10]);
        assert!(matches!(parse_pcap(&bytes), Err(CaptureError::TruncatedRecord(_))));
    }

    #[test]
    fn ipv6_udp_is_keyed() {
        let mut ip = vec![0x60, 0, 0, 0, 0, 12, PROTO_UDP, 64];
        ip.extend_from_slice(&[0xfe; 16]);
        ip.extend_from_slice(&[0xfd; 16]);
        ip.extend_from_slice(&[0x13, 0x88, 0x00, 0x35, 0, 12, 0, 0]);
        ip.extend_from_slice(&[9, 9, 9, 9]);
        let p = split_packet(&record(ethernet(ETHERTYPE_IPV6, &ip)))
            .unwrap()
            .unwrap();
        assert_eq!(p.header.len(), 48);
        assert_eq!(p.payload, vec![9, 9, 9, 9]);
        let key = p.flow_key();
        assert_eq!(key.protocol(), PROTO_UDP);
        assert_eq!(key.endpoints().0.ip.len(), 16);
    }
}

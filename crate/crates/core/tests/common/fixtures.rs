//! Crafted capture with an expected decomposition worked out by hand.

use std::net::{IpAddr, Ipv4Addr};

use trafficmoe::synth::{craft_pcap, PacketSpec, Transport, DEFAULT_SNAPLEN};

pub fn v4(d: u8) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(10, 0, 0, d))
}

#[allow(clippy::too_many_arguments)]
pub fn tcp(ts: u64, src: u8, dst: u8, sport: u16, dport: u16, flags: u8, seq: u32, payload: &[u8]) -> PacketSpec {
    PacketSpec::Ip {
        timestamp_us: ts,
        src: v4(src),
        dst: v4(dst),
        transport: Transport::Tcp {
            src_port: sport,
            dst_port: dport,
            seq,
            flags,
            options: vec![],
        },
        payload: payload.to_vec(),
    }
}

pub fn fixture() -> Vec<u8> {
    craft_pcap(
        &[
            tcp(1_000_000, 1, 2, 40000, 443, 0x02, 1, b""),
            PacketSpec::Arp { timestamp_us: 1_000_200 },
            tcp(1_000_500, 2, 1, 443, 40000, 0x12, 7, &[0xaa; 4]),
            PacketSpec::Ip {
                timestamp_us: 1_001_000,
                src: v4(3),
                dst: v4(1),
                transport: Transport::Udp {
                    src_port: 53,
                    dst_port: 5353,
                },
                payload: b"hello".to_vec(),
            },
        ],
        DEFAULT_SNAPLEN,
    )
    .unwrap()
}

pub const SYN_HEADER: [u8; 40] = [
    0x45, 0x00, 0x00, 0x28, 0x00, 0x01, 0x40, 0x00, 0x40, 0x06, 0x26, 0xcd, 10, 0, 0, 1, 10, 0, 0, 2, //
    0x9c, 0x40, 0x01, 0xbb, 0, 0, 0, 1, 0, 0, 0, 0, 0x50, 0x02, 0xff, 0xff, 0, 0, 0, 0,
];
pub const SYNACK_IP: [u8; 20] = [
    0x45, 0x00, 0x00, 0x2c, 0x00, 0x01, 0x40, 0x00, 0x40, 0x06, 0x26, 0xc9, 10, 0, 0, 2, 10, 0, 0, 1,
];
pub const UDP_HEADER: [u8; 28] = [
    0x45, 0x00, 0x00, 0x21, 0x00, 0x01, 0x40, 0x00, 0x40, 0x11, 0x26, 0xc8, 10, 0, 0, 3, 10, 0, 0, 1, //
    0x00, 0x35, 0x14, 0xe9, 0x00, 0x0d, 0x00, 0x00,
];

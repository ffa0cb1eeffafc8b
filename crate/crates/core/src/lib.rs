//! Encrypted-traffic classification with heterogeneous sparse
//! mixture-of-experts branches over packet headers and payloads.

pub mod aggregation;
pub mod capture;
pub mod filter;
pub mod init;
pub mod model;
pub mod moe;
pub mod preprocess;
pub mod synth;
pub mod tensor;
pub mod verify;

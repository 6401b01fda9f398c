//! Emulated timing-leaky neural-network inference, the timing attacks that
//! recover weights and inputs from it, and constant-time countermeasures.

#![allow(clippy::needless_range_loop)]

pub mod arith;
pub mod attack;
pub mod error;
pub mod hardened;
pub mod network;
pub mod oracle;
pub mod report;

pub use error::{Error, Result};

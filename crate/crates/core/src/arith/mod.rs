//! Bit-exact device arithmetic with cycle accounting.

pub mod float;
pub mod kernels;
pub mod profile;

pub use float::{exponent_of, round7, trunc7, FloatRepr, Mantissa7};
pub use kernels::*;
pub use profile::{CostProfile, BUILTIN_PROFILES};

/// Signed fixed-point value `raw / 2^frac_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedQ {
    pub raw: i64,
    pub frac_bits: u32,
}

impl FixedQ {
    pub fn new(raw: i64, frac_bits: u32) -> Self {
        FixedQ { raw, frac_bits }
    }

    /// Output of the /255 normalization, Q0.15.
    pub fn q15(raw: u16) -> Self {
        FixedQ {
            raw: i64::from(raw),
            frac_bits: 15,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 / 2f64.powi(self.frac_bits as i32)
    }
}

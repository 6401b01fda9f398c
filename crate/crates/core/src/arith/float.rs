//! Sign/exponent/fraction view of a 32-bit float and the 7-bit device rounding.

use std::fmt;

use crate::error::Error;

/// Number of fraction bits the device keeps after operand truncation.
pub const DEVICE_FRAC_BITS: u32 = 7;

/// A normal single-precision value or zero. NaN, infinities and denormals
/// cannot be represented.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FloatRepr {
    pub sign: bool,
    pub biased_exponent: u8,
    pub mantissa_frac: u32,
}

/// Top 7 fraction bits of a significand: `1.m = 1 + frac7 / 128`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mantissa7(pub u8);

impl Mantissa7 {
    pub fn new(frac7: u8) -> Self {
        assert!(frac7 < 128, "frac7 out of range: {frac7}");
        Mantissa7(frac7)
    }

    /// Significand value `1 + frac7/128`.
    pub fn value(self) -> f64 {
        1.0 + f64::from(self.0) / 128.0
    }

    /// 8-bit significand `128 + frac7`.
    pub fn significand(self) -> u32 {
        128 + u32::from(self.0)
    }
}

impl FloatRepr {
    pub const ZERO: FloatRepr = FloatRepr {
        sign: false,
        biased_exponent: 0,
        mantissa_frac: 0,
    };

    pub fn from_bits(bits: u32) -> Result<Self, Error> {
        let sign = bits >> 31 == 1;
        let biased_exponent = ((bits >> 23) & 0xff) as u8;
        let mantissa_frac = bits & 0x7f_ffff;
        match biased_exponent {
            0 if mantissa_frac == 0 => Ok(FloatRepr::ZERO),
            0 => Err(Error::Encoding(format!("denormal encoding {bits:#010x}"))),
            255 => Err(Error::Encoding(format!("NaN/Inf encoding {bits:#010x}"))),
            _ => Ok(FloatRepr {
                sign,
                biased_exponent,
                mantissa_frac,
            }),
        }
    }

    pub fn to_bits(self) -> u32 {
        (u32::from(self.sign) << 31) | (u32::from(self.biased_exponent) << 23) | self.mantissa_frac
    }

    /// Exact conversion from an `f64` that is representable as a normal f32.
    pub fn from_f64(x: f64) -> Result<Self, Error> {
        if x == 0.0 {
            return Ok(FloatRepr::ZERO);
        }
        let f = x as f32;
        if f64::from(f) != x {
            return Err(Error::Encoding(format!(
                "{x} is not exactly representable as f32"
            )));
        }
        FloatRepr::from_bits(f.to_bits())
    }

    /// Rounds an arbitrary finite value to the nearest f32 first.
    pub fn from_f64_lossy(x: f64) -> Result<Self, Error> {
        FloatRepr::from_bits((x as f32).to_bits())
    }

    pub fn to_f64(self) -> f64 {
        f64::from(f32::from_bits(self.to_bits()))
    }

    pub fn is_zero(self) -> bool {
        self.biased_exponent == 0
    }

    /// Unbiased exponent; meaningless for zero.
    pub fn exponent(self) -> i32 {
        i32::from(self.biased_exponent) - 127
    }

    pub fn mantissa7(self) -> Mantissa7 {
        Mantissa7((self.mantissa_frac >> 16) as u8)
    }

    /// Operand truncation performed by the device before every kernel.
    pub fn truncate7(self) -> FloatRepr {
        if self.is_zero() {
            return FloatRepr::ZERO;
        }
        FloatRepr {
            mantissa_frac: self.mantissa_frac & !0xffff,
            ..self
        }
    }

    /// Builds `(-1)^sign * (sig / 2^7) * 2^exp` for an 8-bit significand.
    pub(crate) fn from_parts(sign: bool, exp: i32, frac7: u32) -> FloatRepr {
        debug_assert!(frac7 < 128);
        if exp < -126 {
            return FloatRepr::ZERO;
        }
        if exp > 127 {
            return FloatRepr {
                sign,
                biased_exponent: 254,
                mantissa_frac: 0x7f_0000,
            };
        }
        FloatRepr {
            sign,
            biased_exponent: (exp + 127) as u8,
            mantissa_frac: frac7 << 16,
        }
    }
}

impl fmt::Debug for FloatRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FloatRepr({} = {:#010x})", self.to_f64(), self.to_bits())
    }
}

impl fmt::Display for FloatRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let s = if self.sign { "-" } else { "" };
        let m = 1.0 + f64::from(self.mantissa_frac) / f64::from(1u32 << 23);
        write!(f, "{s}{m:.4}x2^{}", self.exponent())
    }
}

/// Rounds `x` to 8 significant bits, nearest-even. Zero stays zero;
/// results outside the normal f32 range flush to zero or saturate.
pub fn round7(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return 0.0;
    }
    let e = exponent_of(x.abs());
    let scale = 2f64.powi(e - DEVICE_FRAC_BITS as i32);
    let q = x.abs() / scale;
    let mut fl = q.floor();
    let r = q - fl;
    if r > 0.5 || (r == 0.5 && fl % 2.0 == 1.0) {
        fl += 1.0;
    }
    let mut v = fl * scale;
    if exponent_of(v) > 127 {
        v = (2.0 - 1.0 / 128.0) * 2f64.powi(127);
    }
    if exponent_of(v) < -126 {
        return 0.0;
    }
    v.copysign(x)
}

/// Truncates `x` to 8 significant bits.
pub fn trunc7(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let e = exponent_of(x.abs());
    let scale = 2f64.powi(e - DEVICE_FRAC_BITS as i32);
    ((x.abs() / scale).floor() * scale).copysign(x)
}

/// `floor(log2(a))` for positive finite `a`, exact.
pub fn exponent_of(a: f64) -> i32 {
    debug_assert!(a > 0.0);
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal; far below anything the device produces.
        return -1075 + (64 - (bits & ((1 << 52) - 1)).leading_zeros() as i32);
    }
    biased - 1023
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_roundtrip_and_rejects() {
        let x = FloatRepr::from_f64(-1.5).unwrap();
        assert_eq!(FloatRepr::from_bits(x.to_bits()).unwrap(), x);
        assert!(FloatRepr::from_bits(0x7f80_0000).is_err());
        assert!(FloatRepr::from_bits(0x0000_0001).is_err());
        assert!(FloatRepr::from_bits(0x8000_0000).unwrap().is_zero());
    }

    #[test]
    fn mantissa7_truncates() {
        let w = FloatRepr::from_f64_lossy(1.0390 * 0.25).unwrap();
        assert_eq!(w.mantissa7(), Mantissa7(4));
        let w = FloatRepr::from_f64_lossy(1.0391 * 0.25).unwrap();
        assert_eq!(w.mantissa7(), Mantissa7(5));
        assert_eq!(w.exponent(), -2);
    }

    #[test]
    fn round7_ties_to_even() {
        // 1 + 1/256 is halfway between 1 and 1 + 1/128.
        assert_eq!(round7(1.0 + 1.0 / 256.0), 1.0);
        assert_eq!(round7(1.0 + 3.0 / 256.0), 1.0 + 2.0 / 128.0);
        assert_eq!(round7(-255.5), -256.0);
        assert_eq!(round7(255.0), 255.0);
        assert_eq!(trunc7(1.0 + 1.9 / 128.0), 1.0 + 1.0 / 128.0);
    }
}

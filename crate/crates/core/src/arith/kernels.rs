//! Leaky device kernels. Each returns the exact device value together with
//! the cycle count the emulated firmware would spend.

use super::float::FloatRepr;
use super::profile::CostProfile;

/// Three-way sign class shared by every activation and compare kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SignClass {
    Negative,
    Zero,
    Positive,
}

impl SignClass {
    pub fn of_f64(x: f64) -> Self {
        if x > 0.0 {
            SignClass::Positive
        } else if x < 0.0 {
            SignClass::Negative
        } else {
            SignClass::Zero
        }
    }

    pub fn of_i64(x: i64) -> Self {
        SignClass::of_f64(x as f64)
    }

    pub fn signum(self) -> i32 {
        match self {
            SignClass::Negative => -1,
            SignClass::Zero => 0,
            SignClass::Positive => 1,
        }
    }
}

/// Soft-float multiply. The multiplier `a` (the layer input) is scanned bit by
/// bit; every set bit adds the shifted multiplicand `b` (the weight) into the
/// 16-bit accumulator at a cost that grows with the number of carries. A
/// post-normalize shift and a round-up step are paid only when taken.
pub fn leaky_float_mul(a: FloatRepr, b: FloatRepr, p: &CostProfile) -> (FloatRepr, u32) {
    if a.is_zero() || b.is_zero() {
        return (FloatRepr::ZERO, p.float_mul_zero);
    }
    let (a, b) = (a.truncate7(), b.truncate7());
    let multiplier = a.mantissa7().significand();
    let multiplicand = b.mantissa7().significand();

    let mut cycles = p.float_mul_base;
    let mut acc: u32 = 0;
    for i in 0..8 {
        if (multiplier >> i) & 1 == 1 {
            let x = multiplicand << i;
            let carries = ((acc ^ x ^ (acc + x)) >> 1).count_ones();
            cycles += p.float_mul_add + p.float_mul_carry * carries;
            acc += x;
        }
    }

    let mut exp = a.exponent() + b.exponent();
    let shift = if acc >= 1 << 15 {
        cycles += p.float_mul_normalize;
        exp += 1;
        8
    } else {
        7
    };
    let mut q = acc >> shift;
    let rem = acc & ((1 << shift) - 1);
    let half = 1 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        cycles += p.float_mul_round;
        q += 1;
        if q == 256 {
            q = 128;
            exp += 1;
        }
    }
    let v = FloatRepr::from_parts(a.sign != b.sign, exp, q - 128);
    (v, cycles)
}

/// Soft-float add, correctly rounded to 8 significant bits. Cost grows with
/// the exponent-alignment shift, capped at 25 positions.
pub fn leaky_float_add(a: FloatRepr, b: FloatRepr, p: &CostProfile) -> (FloatRepr, u32) {
    if a.is_zero() {
        return (b.truncate7(), p.float_add_base);
    }
    if b.is_zero() {
        return (a.truncate7(), p.float_add_base);
    }
    let (a, b) = (a.truncate7(), b.truncate7());
    let gap = (a.exponent() - b.exponent()).unsigned_abs();
    let cycles = p.float_add_base + p.float_add_shift * gap.min(25);
    (exact_add(a, b), cycles)
}

/// Integer-aligned addition with guard and sticky bits.
fn exact_add(a: FloatRepr, b: FloatRepr) -> FloatRepr {
    const GUARD: u32 = 40;
    let (hi, lo) = if a.exponent() >= b.exponent() {
        (a, b)
    } else {
        (b, a)
    };
    let gap = (hi.exponent() - lo.exponent()) as u32;
    let x = i128::from(hi.mantissa7().significand()) << GUARD;
    let lo_full = i128::from(lo.mantissa7().significand()) << GUARD;
    let y = if gap >= GUARD + 9 {
        1
    } else {
        let kept = lo_full >> gap;
        if kept << gap != lo_full {
            kept | 1
        } else {
            kept
        }
    };
    let sx = if hi.sign { -x } else { x };
    let sy = if lo.sign { -y } else { y };
    let s = sx + sy;
    if s == 0 {
        return FloatRepr::ZERO;
    }
    let neg = s < 0;
    let mag = s.unsigned_abs();
    // value = mag * 2^(hi.exp - 7 - GUARD)
    let msb = 127 - mag.leading_zeros() as i32;
    let drop = msb - 7;
    let base_exp = hi.exponent() - 7 - GUARD as i32;
    let (mut q, mut e) = if drop <= 0 {
        ((mag << (-drop) as u32) as u32, base_exp + msb)
    } else {
        let d = drop as u32;
        let mut q = (mag >> d) as u32;
        let rem = mag & ((1u128 << d) - 1);
        let half = 1u128 << (d - 1);
        if rem > half || (rem == half && q & 1 == 1) {
            q += 1;
        }
        (q, base_exp + msb)
    };
    if q == 256 {
        q = 128;
        e += 1;
    }
    FloatRepr::from_parts(neg, e, q - 128)
}

/// Branching float ReLU: positive, zero and negative inputs take different
/// paths through the soft-float compare.
pub fn leaky_float_relu(pa: FloatRepr, p: &CostProfile) -> (FloatRepr, u32) {
    match SignClass::of_f64(pa.to_f64()) {
        SignClass::Positive => (pa.truncate7(), p.float_relu_pos),
        SignClass::Zero => (FloatRepr::ZERO, p.float_relu_zero),
        SignClass::Negative => (FloatRepr::ZERO, p.float_relu_neg),
    }
}

/// Integer-to-float conversion: start from exponent 7 and shift the value
/// left until its top bit reaches bit 7, one loop iteration per shift.
pub fn leaky_int2float(ip: u8, p: &CostProfile) -> (FloatRepr, u32) {
    if ip == 0 {
        let c = if p.int2float_constant_time {
            p.int2float_base
        } else {
            p.int2float_zero
        };
        return (FloatRepr::ZERO, c);
    }
    let mut z = u32::from(ip);
    let mut e = 7;
    let mut iters = 0;
    while z & 0x80 == 0 {
        z <<= 1;
        e -= 1;
        iters += 1;
    }
    let c = if p.int2float_constant_time {
        p.int2float_base
    } else {
        p.int2float_base + p.int2float_iter * iters
    };
    (FloatRepr::from_parts(false, e, z - 128), c)
}

/// Fixed-point multiply-accumulate on a hardware multiplier: constant cost.
pub fn fixed_mac(acc: i64, ip: u8, wt: i8, p: &CostProfile) -> (i64, u32) {
    (acc + i64::from(ip) * i64::from(wt), p.fixed_mac)
}

/// Branching fixed-point ReLU. The firmware tests the sign bit and then the
/// zero flag, so zero has its own path.
pub fn fixed_relu(pa: i64, p: &CostProfile) -> (i64, u32) {
    match SignClass::of_i64(pa) {
        SignClass::Positive => (pa, p.fixed_relu_pos),
        SignClass::Zero => (0, p.fixed_relu_zero),
        SignClass::Negative => (0, p.fixed_relu_neg),
    }
}

/// Restoring division `ip / 255` producing 16 quotient bits (one integer bit
/// and 15 fraction bits). Returns the Q0.15 value and one duration per bit.
pub fn leaky_normalize_div255(ip: u8, p: &CostProfile) -> (u16, [u32; 16]) {
    let mut rem = u32::from(ip);
    let mut q: u16 = 0;
    let mut durations = [0u32; 16];
    for (i, d) in durations.iter_mut().enumerate() {
        if i > 0 {
            rem <<= 1;
        }
        let bit = rem >= 255;
        if bit {
            rem -= 255;
        }
        q = (q << 1) | u16::from(bit);
        *d = if p.div_constant_time || !bit {
            p.div_short
        } else {
            p.div_long
        };
    }
    (q, durations)
}

/// Binary-weight MAC: a −1 weight negates the input first.
pub fn bnn_mac(acc: i64, ip: u8, wt: i8, p: &CostProfile) -> (i64, u32) {
    debug_assert!(wt == 1 || wt == -1);
    if wt < 0 {
        (acc - i64::from(ip), p.bnn_mac + p.bnn_negate)
    } else {
        (acc + i64::from(ip), p.bnn_mac)
    }
}

/// Zero-skipping wrapper: when the input is zero the weight is not fetched
/// and the MAC body does not run.
pub fn zero_skip_mac<T>(
    acc: T,
    ip_is_zero: bool,
    p: &CostProfile,
    mac: impl FnOnce(T) -> (T, u32),
) -> (T, u32) {
    if ip_is_zero {
        (acc, p.skip)
    } else {
        mac(acc)
    }
}

/// One step of the final-layer argmax loop. The compare first dispatches on
/// the sign of the candidate, then pays for an update when it beats the
/// running best.
pub fn argmax_step(candidate_sign: SignClass, beats_best: bool, p: &CostProfile) -> u32 {
    let base = match candidate_sign {
        SignClass::Positive => p.cmp_pos,
        SignClass::Zero => p.cmp_zero,
        SignClass::Negative => p.cmp_neg,
    };
    base + if beats_best { p.cmp_update } else { 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::float::{round7, trunc7};

    fn f(x: f64) -> FloatRepr {
        FloatRepr::from_f64(x).unwrap()
    }

    #[test]
    fn mul_examples() {
        let p = CostProfile::atmega_like();
        let (v, _) = leaky_float_mul(f(1.5), f(2.5), &p);
        assert_eq!(v.to_f64(), 3.75);
        let (v, c) = leaky_float_mul(FloatRepr::ZERO, f(2.5), &p);
        assert!(v.is_zero());
        assert_eq!(c, p.float_mul_zero);
        let (v, _) = leaky_float_mul(f(-3.0), f(0.5), &p);
        assert_eq!(v.to_f64(), -1.5);
    }

    #[test]
    fn mul_matches_f64_oracle() {
        let p = CostProfile::atmega_like();
        for a in 0..128u32 {
            for b in (0..128u32).step_by(7) {
                let x = (1.0 + f64::from(a) / 128.0) * 8.0;
                let y = -(1.0 + f64::from(b) / 128.0) / 4.0;
                let (v, _) = leaky_float_mul(f(x), f(y), &p);
                assert_eq!(v.to_f64(), round7(x * y), "{x} * {y}");
            }
        }
    }

    #[test]
    fn add_examples() {
        let p = CostProfile::atmega_like();
        let (v, c) = leaky_float_add(FloatRepr::ZERO, f(3.0), &p);
        assert_eq!((v.to_f64(), c), (3.0, p.float_add_base));
        let (v, _) = leaky_float_add(f(1.0), f(1.0), &p);
        assert_eq!(v.to_f64(), 2.0);
        let (_, c) = leaky_float_add(f(8.0), f(1.0), &p);
        assert_eq!(c, p.float_add_base + 3 * p.float_add_shift);
        let (_, c) = leaky_float_add(f(2f64.powi(40)), f(1.0), &p);
        assert_eq!(c, p.float_add_base + 25 * p.float_add_shift);
        let (v, _) = leaky_float_add(f(1.0), f(-1.0), &p);
        assert!(v.is_zero());
    }

    #[test]
    fn add_matches_f64_oracle() {
        let p = CostProfile::atmega_like();
        let vals: Vec<f64> = (0..40)
            .map(|i| {
                let m = 1.0 + f64::from((i * 37) % 128) / 128.0;
                let s = if i % 3 == 0 { -1.0 } else { 1.0 };
                s * m * 2f64.powi(i % 13 - 6)
            })
            .chain([
                1.0,
                -1.0 + 1.0 / 256.0,
                2f64.powi(-30),
                -(2.0 - 1.0 / 128.0),
            ])
            .collect();
        for &x in &vals {
            for &y in &vals {
                let (v, _) = leaky_float_add(f(trunc7(x)), f(trunc7(y)), &p);
                assert_eq!(v.to_f64(), round7(trunc7(x) + trunc7(y)), "{x} + {y}");
            }
        }
    }

    #[test]
    fn relu_classes() {
        let p = CostProfile::atmega_like();
        assert_eq!(leaky_float_relu(f(1.0), &p).1, 68);
        assert_eq!(leaky_float_relu(FloatRepr::ZERO, &p).1, 56);
        let (v, c) = leaky_float_relu(f(-1.0), &p);
        assert_eq!((v.is_zero(), c), (true, 61));
    }

    #[test]
    fn int2float_loop_cost() {
        let p = CostProfile::atmega_like();
        let (v, c) = leaky_int2float(200, &p);
        assert_eq!((v.to_f64(), c), (200.0, p.int2float_base));
        let (v, c) = leaky_int2float(1, &p);
        assert_eq!(
            (v.to_f64(), c),
            (1.0, p.int2float_base + 7 * p.int2float_iter)
        );
        let (v, c) = leaky_int2float(0, &p);
        assert_eq!((v.is_zero(), c), (true, p.int2float_zero));
        for ip in 0..=255u8 {
            assert_eq!(leaky_int2float(ip, &p).0.to_f64(), f64::from(ip));
        }
    }

    #[test]
    fn fixed_examples() {
        let p = CostProfile::atmega_like();
        assert_eq!(fixed_mac(0, 108, -1, &p).0, -108);
        assert_eq!(fixed_mac(108, 200, -1, &p).0, -92);
        assert_eq!(fixed_mac(17, 0, 5, &p).0, 17);
        assert_eq!(fixed_relu(5, &p), (5, 10));
        assert_eq!(fixed_relu(-5, &p), (0, 7));
        assert_eq!(fixed_relu(0, &p), (0, 8));
    }

    #[test]
    fn div255_examples() {
        let p = CostProfile::atmega_like();
        assert_eq!(leaky_normalize_div255(0, &p), (0, [p.div_short; 16]));
        assert_eq!(leaky_normalize_div255(255, &p).0, 0b1000_0000_0000_0000);
        let (q, d) = leaky_normalize_div255(85, &p);
        assert_eq!(q, 10922);
        assert_eq!(d[0], p.div_short);
        assert_eq!(d[1], p.div_short);
        assert_eq!(d[2], p.div_long);
    }

    #[test]
    fn bnn_and_skip() {
        let p = CostProfile::atmega_like();
        assert_eq!(bnn_mac(0, 0, 1, &p), (0, p.bnn_mac));
        assert_eq!(bnn_mac(0, 0, -1, &p), (0, p.bnn_mac + p.bnn_negate));
        assert_eq!(bnn_mac(10, 3, -1, &p).0, 7);
        let (v, c) = zero_skip_mac(5i64, true, &p, |a| bnn_mac(a, 9, 1, &p));
        assert_eq!((v, c), (5, p.skip));
        let (v, _) = zero_skip_mac(5i64, false, &p, |a| bnn_mac(a, 9, 1, &p));
        assert_eq!(v, 14);
    }
}

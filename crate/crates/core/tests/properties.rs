use std::collections::BTreeSet;

use proptest::prelude::*;

use nnleak::arith::{self, CostProfile, FloatRepr, SignClass, BUILTIN_PROFILES};
use nnleak::attack::input::{div255_preimage, div255_raw};
use nnleak::hardened::HardenedDevice;
use nnleak::network::{
    parse_model, random_model, scale_layer_pow2, write_model, Precision, RandomSpec,
};
use nnleak::oracle::{Device, JitterConfig, OpKind, Oracle};

fn profiles() -> impl Strategy<Value = CostProfile> {
    prop::sample::select(BUILTIN_PROFILES.to_vec())
        .prop_map(|n| CostProfile::builtin(n).expect("builtin"))
}

fn precisions() -> impl Strategy<Value = Precision> {
    prop::sample::select(vec![Precision::Float, Precision::Fixed, Precision::Binary])
}

fn bits(sign: bool, exp: i32, frac7: u32) -> FloatRepr {
    FloatRepr::from_bits(u32::from(sign) << 31 | ((exp + 127) as u32) << 23 | frac7 << 16)
        .expect("normal")
}

proptest! {
    #[test]
    fn mul_cost_ignores_exponents(p in profiles(), ma in 0u32..128, mb in 0u32..128, e in prop::array::uniform4(-20i32..20), s in any::<[bool; 4]>()) {
        let c1 = arith::leaky_float_mul(bits(s[0], e[0], ma), bits(s[1], e[1], mb), &p).1;
        let c2 = arith::leaky_float_mul(bits(s[2], e[2], ma), bits(s[3], e[3], mb), &p).1;
        prop_assert_eq!(c1, c2);
    }

    #[test]
    fn kernels_are_deterministic(p in profiles(), a in any::<u32>(), b in any::<u32>(), ip in any::<u8>(), pa in any::<i32>()) {
        let f = |x: u32| FloatRepr::from_bits(x & 0x7f7f_ffff).unwrap_or(FloatRepr::ZERO);
        prop_assert_eq!(arith::leaky_float_mul(f(a), f(b), &p), arith::leaky_float_mul(f(a), f(b), &p));
        prop_assert_eq!(arith::leaky_float_add(f(a), f(b), &p), arith::leaky_float_add(f(a), f(b), &p));
        prop_assert_eq!(arith::leaky_int2float(ip, &p), arith::leaky_int2float(ip, &p));
        prop_assert_eq!(arith::leaky_normalize_div255(ip, &p), arith::leaky_normalize_div255(ip, &p));
        prop_assert_eq!(arith::fixed_relu(i64::from(pa), &p), arith::fixed_relu(i64::from(pa), &p));
    }

    #[test]
    fn float_relu_partitions_by_sign(p in profiles(), x in -1e6f64..1e6) {
        let v = FloatRepr::from_f64_lossy(x).expect("finite");
        let (_, c) = arith::leaky_float_relu(v, &p);
        let want = match SignClass::of_f64(v.to_f64()) {
            SignClass::Positive => p.float_relu_pos,
            SignClass::Zero => p.float_relu_zero,
            SignClass::Negative => p.float_relu_neg,
        };
        prop_assert_eq!(c, want);
    }

    #[test]
    fn serialization_roundtrip(precision in precisions(), seed in any::<u64>(), hidden in 1usize..6, width in 1usize..8) {
        let m = random_model(&RandomSpec::new(&[width, hidden, 3], precision, seed)).expect("model");
        let back = parse_model(&write_model(&m)).expect("parses");
        prop_assert_eq!(back, m);
    }

    #[test]
    fn pow2_scaling_keeps_signs_and_argmax(seed in any::<u64>(), layer in 0usize..2, k in -6i32..6, x in prop::collection::vec(any::<u8>(), 6)) {
        let m = random_model(&RandomSpec::new(&[6, 5, 3], Precision::Float, seed)).expect("model");
        let s = scale_layer_pow2(&m, layer, k).expect("in range");
        let (a, b) = (m.evaluate(&x).expect("runs"), s.evaluate(&x).expect("runs"));
        prop_assert_eq!(a.argmax, b.argmax);
        for (pa, pb) in a.pre.iter().flatten().zip(b.pre.iter().flatten()) {
            prop_assert_eq!(SignClass::of_f64(*pa), SignClass::of_f64(*pb));
        }
    }

    #[test]
    fn leaky_device_is_functionally_transparent(precision in precisions(), seed in any::<u64>(), x in prop::collection::vec(any::<u8>(), 7)) {
        let m = random_model(&RandomSpec::new(&[7, 4, 3], precision, seed)).expect("model");
        let o = Oracle::new(m.clone(), CostProfile::atmega_like(), JitterConfig::none()).expect("oracle");
        let (out, trace) = o.run_inference(&x).expect("runs");
        let eval = m.evaluate(&x).expect("runs");
        prop_assert_eq!(&out, eval.outputs.last().expect("layers"));
        // sigma = 0: a repeated query gives the same trace.
        prop_assert_eq!(o.run_inference(&x).expect("runs").1, trace.clone());
        for (li, l) in m.layers.iter().enumerate() {
            for n in 0..l.out_dim {
                let ev: Vec<_> = trace.events.iter().filter(|e| e.layer == li && e.neuron == n && e.kind != OpKind::Int2Float).collect();
                let fan_in = match precision {
                    // Float MACs log one multiply and one add.
                    Precision::Float => 2 * l.in_dim,
                    _ => l.in_dim,
                };
                prop_assert_eq!(ev.len(), fan_in + 1, "layer {} neuron {}", li, n);
            }
        }
        let conversions = trace.events.iter().filter(|e| e.kind == OpKind::Int2Float).count();
        prop_assert_eq!(conversions, if precision == Precision::Float { 7 } else { 0 });
    }

    #[test]
    fn hardened_integer_layers_match_reference(precision in prop::sample::select(vec![Precision::Fixed, Precision::Binary]), seed in any::<u64>(), x in prop::collection::vec(any::<u8>(), 7)) {
        let m = random_model(&RandomSpec::new(&[7, 4, 3], precision, seed)).expect("model");
        let d = HardenedDevice::new(&m, CostProfile::atmega_like()).expect("hardens");
        let (out, _) = d.infer(&x).expect("runs");
        let eval = m.evaluate(&x).expect("runs");
        prop_assert_eq!(&out, eval.outputs.last().expect("layers"));
    }
}

#[test]
fn int2float_cost_is_affine_in_exponent() {
    for name in ["atmega-like"] {
        let p = CostProfile::builtin(name).expect("builtin");
        let mut by_exp = std::collections::BTreeMap::new();
        for ip in 1..=255u8 {
            let (v, c) = arith::leaky_int2float(ip, &p);
            let prev = by_exp.insert(v.exponent(), c);
            assert!(
                prev.is_none_or(|q| q == c),
                "{name}: exponent {} has two costs",
                v.exponent()
            );
        }
        let costs: Vec<u32> = (0..=7).map(|e| by_exp[&e]).collect();
        let step = i64::from(costs[0]) - i64::from(costs[1]);
        assert!(step > 0);
        assert!(
            costs
                .windows(2)
                .all(|w| i64::from(w[0]) - i64::from(w[1]) == step),
            "{costs:?}"
        );
        let zero = arith::leaky_int2float(0, &p).1;
        let classes: BTreeSet<u32> = costs.iter().copied().chain([zero]).collect();
        assert_eq!(classes.len(), 9);
    }
}

#[test]
fn fixed_relu_class_is_sign_of_pa() {
    for name in BUILTIN_PROFILES {
        let p = CostProfile::builtin(name).expect("builtin");
        let nonneg: BTreeSet<u32> = (0..=4096i64).map(|v| arith::fixed_relu(v, &p).1).collect();
        let neg: BTreeSet<u32> = (-4096..0i64).map(|v| arith::fixed_relu(v, &p).1).collect();
        assert!(nonneg.is_disjoint(&neg), "{name}");
    }
}

#[test]
fn div255_value_and_decode_are_exact() {
    let p = CostProfile::atmega_like();
    for ip in 0..=255u8 {
        let (q, _) = arith::leaky_normalize_div255(ip, &p);
        assert_eq!(u32::from(q), (u32::from(ip) << 15) / 255);
        assert_eq!(q, div255_raw(ip));
        assert_eq!(div255_preimage(q), Some(ip));
    }
}

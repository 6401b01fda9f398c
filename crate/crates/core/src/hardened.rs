//! Constant-time countermeasures.
//!
//! Float weights are stored per layer as 24-bit two's-complement words
//! relative to the layer's largest exponent, so every multiply-accumulate is
//! an integer operation of fixed cost. ReLU and the argmax compare are
//! computed with sign masks instead of branches. The executor never skips a
//! zero input and runs no input normalization.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arith::{self, trunc7, CostProfile, FloatRepr, SignClass};
use crate::attack::binary::weights_from_trace;
use crate::attack::float::{build_mul_lut, mantissa_inputs, recover_layer_mantissas, FloatArith};
use crate::attack::input::{
    recover_input_div255, recover_input_float, recover_sparsity_mask, InputValue,
};
use crate::attack::{sweep, CrossRule, LayerProber};
use crate::error::{Error, Result};
use crate::network::{Activation, Layer, LayerParams, NetworkModel, Normalization, Precision};
use crate::oracle::{check_layer_inputs, Device, JitterConfig, OpEvent, OpKind, Oracle};

/// Fraction bits of a stored weight word (relative to `2^e_max`).
pub const WEIGHT_FRAC_BITS: i32 = 22;
/// Fraction bits of an activation word.
pub const ACT_FRAC_BITS: i32 = 16;
const WORD_MAX: i64 = (1 << 23) - 1;
const WORD_MIN: i64 = -(1 << 23);

/// One float layer in the normalized integer form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormalizedLayerWeights {
    pub e_max: i32,
    /// `round(w · 2^(22 − e_max))`, each fitting in 24 bits.
    pub words: Vec<i32>,
    /// Biases on the accumulator scale (same 22 fraction bits).
    pub bias: Vec<i64>,
}

impl NormalizedLayerWeights {
    pub fn dequantize(&self, i: usize) -> f64 {
        f64::from(self.words[i]) * 2f64.powi(self.e_max - WEIGHT_FRAC_BITS)
    }

    pub fn storage_bytes(&self) -> usize {
        3 * self.words.len()
    }
}

/// Weights as stored by the normalized executor over their default float size.
pub fn storage_ratio(w: &NormalizedLayerWeights) -> f64 {
    w.storage_bytes() as f64 / (4 * w.words.len()) as f64
}

fn quantize(x: f64, frac: i32) -> i64 {
    (x * 2f64.powi(frac)).round_ties_even() as i64
}

/// Normalizes the weights of a float layer to its largest exponent.
/// Weights are the device-effective values, truncated to 7 fraction bits.
/// An all-zero layer uses `e_max = 0`.
pub fn normalize_weights(layer: &Layer) -> Result<NormalizedLayerWeights> {
    let LayerParams::Float { weights, bias } = &layer.params else {
        return Err(Error::Precondition(
            "weight normalization applies to float layers".into(),
        ));
    };
    normalize_values(
        &weights
            .iter()
            .map(|w| trunc7(w.to_f64()))
            .collect::<Vec<_>>(),
        &bias.iter().map(|b| trunc7(b.to_f64())).collect::<Vec<_>>(),
    )
}

fn normalize_values(weights: &[f64], bias: &[f64]) -> Result<NormalizedLayerWeights> {
    if let Some(w) = weights.iter().chain(bias).find(|w| !w.is_finite()) {
        return Err(Error::Input(format!("non-finite parameter {w}")));
    }
    let e_max = weights
        .iter()
        .filter(|w| **w != 0.0)
        .map(|w| arith::exponent_of(w.abs()))
        .max()
        .unwrap_or(0);
    let frac = WEIGHT_FRAC_BITS - e_max;
    let words = weights
        .iter()
        .map(|&w| quantize(w, frac).clamp(WORD_MIN, WORD_MAX) as i32)
        .collect();
    let bias = bias.iter().map(|&b| quantize(b, frac)).collect();
    Ok(NormalizedLayerWeights { e_max, words, bias })
}

/// Accumulator width; the executor retries a neuron at the wider width when
/// the 48-bit sum would overflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccWidth {
    W48,
    W64,
}

impl AccWidth {
    fn fits(self, v: i128) -> bool {
        match self {
            AccWidth::W48 => (-(1i128 << 47)..(1i128 << 47)).contains(&v),
            AccWidth::W64 => i64::try_from(v).is_ok(),
        }
    }

    fn cost(self, base: u32) -> u32 {
        match self {
            AccWidth::W48 => base,
            AccWidth::W64 => 2 * base,
        }
    }
}

/// Integer multiply of an activation word by a weight word, rescaled to the
/// accumulator's fraction bits. One cost for every operand pair.
pub fn ct_mul(x: i64, w: i32, p: &CostProfile) -> (i64, u32) {
    (
        ((i128::from(x) * i128::from(w)) >> ACT_FRAC_BITS) as i64,
        p.ct_mul,
    )
}

/// `acc + x·w`; `None` when the result leaves the accumulator width.
pub fn ct_mac(acc: i64, x: i64, w: i32, width: AccWidth, p: &CostProfile) -> (Option<i64>, u32) {
    let prod = (i128::from(x) * i128::from(w)) >> ACT_FRAC_BITS;
    let sum = i128::from(acc) + prod;
    let c = width.cost(p.ct_mac);
    (width.fits(sum).then_some(sum as i64), c)
}

/// Branch-free ReLU: the arithmetic shift spreads the sign bit into a mask.
pub fn ct_relu(pa: i64, p: &CostProfile) -> (i64, u32) {
    (!(pa >> 63) & pa, p.ct_relu)
}

/// Branch-free `min(a, b)`.
fn ct_min(a: i64, b: i64) -> i64 {
    let d = b.wrapping_sub(a);
    a.wrapping_add(d & (d >> 63))
}

/// Branch-free argmax step. Returns the new best value and index.
pub fn ct_cmp(
    best: i64,
    best_idx: i64,
    cand: i64,
    cand_idx: i64,
    p: &CostProfile,
) -> ((i64, i64), u32) {
    // All ones when cand > best.
    let take = best.wrapping_sub(cand) >> 63;
    (
        (
            (cand & take) | (best & !take),
            (cand_idx & take) | (best_idx & !take),
        ),
        p.ct_cmp,
    )
}

/// Folds the `/255` input normalization into the first-layer weights.
pub fn eliminate_normalization(model: &NetworkModel) -> Result<NetworkModel> {
    let mut m = model.clone();
    if m.normalization == Normalization::None {
        return Ok(m);
    }
    let l = &mut m.layers[0];
    let LayerParams::Float { weights, .. } = &mut l.params else {
        return Err(Error::Precondition(
            "normalization elimination applies to float models".into(),
        ));
    };
    for w in weights.iter_mut() {
        *w = FloatRepr::from_f64_lossy(trunc7(w.to_f64()) / 255.0)?;
    }
    m.normalization = Normalization::None;
    Ok(m)
}

/// Per-layer integer form of the model the hardened device runs.
#[derive(Clone, Debug)]
enum HardLayer {
    Float(NormalizedLayerWeights),
    Int,
}

/// Executor built only from constant-time kernels.
pub struct HardenedDevice {
    model: NetworkModel,
    profile: CostProfile,
    layers: Vec<HardLayer>,
}

impl HardenedDevice {
    /// Eliminates input normalization and disables zero skipping.
    pub fn new(model: &NetworkModel, profile: CostProfile) -> Result<Self> {
        model.validate()?;
        let mut m = eliminate_normalization(model)?;
        m.zero_skipping = false;
        let layers = m
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match &l.params {
                LayerParams::Float { weights, bias } => {
                    // The folded first layer keeps its full-precision weights.
                    let folded = i == 0 && model.normalization == Normalization::Div255;
                    let w: Vec<f64> = weights
                        .iter()
                        .map(|w| {
                            if folded {
                                w.to_f64()
                            } else {
                                trunc7(w.to_f64())
                            }
                        })
                        .collect();
                    let b: Vec<f64> = bias.iter().map(|b| trunc7(b.to_f64())).collect();
                    normalize_values(&w, &b).map(HardLayer::Float)
                }
                _ => Ok(HardLayer::Int),
            })
            .collect::<Result<_>>()?;
        Ok(HardenedDevice {
            model: m,
            profile,
            layers,
        })
    }

    fn run_layer(&self, li: usize, x: &[i64], ev: &mut Vec<OpEvent>) -> Result<Vec<i64>> {
        let l = &self.model.layers[li];
        let p = &self.profile;
        let push = |ev: &mut Vec<OpEvent>, kind, n, c: u32| {
            ev.push(OpEvent {
                index: 0,
                kind,
                layer: li,
                neuron: n,
                cycles: f64::from(c),
                sub_durations: vec![],
            })
        };
        let mut out = Vec::with_capacity(l.out_dim);
        let mut best = (i64::MIN, 0i64);
        for n in 0..l.out_dim {
            let (bias, words): (i64, Vec<i32>) = match &self.layers[li] {
                HardLayer::Float(nw) => (
                    nw.bias[n],
                    nw.words[n * l.in_dim..(n + 1) * l.in_dim].to_vec(),
                ),
                HardLayer::Int => (
                    l.int_bias(n) << ACT_FRAC_BITS,
                    (0..l.in_dim)
                        .map(|k| i32::from(l.int_weight(n, k)) << ACT_FRAC_BITS)
                        .collect(),
                ),
            };
            let mut pending = Vec::with_capacity(words.len());
            let mut acc = Some(bias);
            for width in [AccWidth::W48, AccWidth::W64] {
                pending.clear();
                acc = Some(bias);
                for (k, &w) in words.iter().enumerate() {
                    let (next, c) = ct_mac(acc.unwrap_or(0), x[k], w, width, p);
                    pending.push(c);
                    acc = next;
                    if acc.is_none() {
                        break;
                    }
                }
                if acc.is_some() {
                    break;
                }
            }
            let acc = acc.ok_or_else(|| {
                Error::Input(format!(
                    "layer {li} neuron {n}: accumulator overflow at 64 bits"
                ))
            })?;
            for c in pending {
                push(ev, OpKind::Mac, n, c);
            }
            // Accumulator fraction bits: 22 − e_max for float, 16 for integer layers.
            let pa = match &self.layers[li] {
                HardLayer::Float(nw) => shift(acc, ACT_FRAC_BITS - (WEIGHT_FRAC_BITS - nw.e_max)),
                HardLayer::Int => acc,
            };
            match l.activation {
                Activation::Relu => {
                    let (mut v, c) = ct_relu(pa, p);
                    if matches!(self.layers[li], HardLayer::Int) {
                        v = ct_min(v, 255 << ACT_FRAC_BITS);
                    }
                    push(ev, OpKind::Relu, n, c);
                    out.push(v);
                }
                Activation::ArgmaxFinal => {
                    let (b, c) = ct_cmp(best.0, best.1, pa, n as i64, p);
                    best = b;
                    push(ev, OpKind::Cmp, n, c);
                    out.push(pa);
                }
                Activation::None => out.push(pa),
            }
        }
        Ok(out)
    }

    fn to_words(x: &[f64]) -> Vec<i64> {
        x.iter().map(|&v| quantize(v, ACT_FRAC_BITS)).collect()
    }

    fn to_values(x: &[i64]) -> Vec<f64> {
        x.iter()
            .map(|&v| v as f64 / f64::from(1 << ACT_FRAC_BITS))
            .collect()
    }
}

/// Multiplies by `2^s` with an arithmetic shift.
fn shift(v: i64, s: i32) -> i64 {
    if s >= 0 {
        v << s
    } else {
        v >> -s
    }
}

impl Device for HardenedDevice {
    fn model(&self) -> &NetworkModel {
        &self.model
    }

    fn infer(&self, input: &[u8]) -> Result<(Vec<f64>, Vec<OpEvent>)> {
        if input.len() != self.model.input_width {
            return Err(Error::Input(format!(
                "expected {} inputs, got {}",
                self.model.input_width,
                input.len()
            )));
        }
        let mut ev = Vec::new();
        let mut x: Vec<i64> = input
            .iter()
            .map(|&v| i64::from(v) << ACT_FRAC_BITS)
            .collect();
        for li in 0..self.model.layers.len() {
            x = self.run_layer(li, &x, &mut ev)?;
        }
        Ok((Self::to_values(&x), ev))
    }

    fn infer_layer(&self, layer: usize, activations: &[f64]) -> Result<Vec<OpEvent>> {
        check_layer_inputs(&self.model, layer, activations)?;
        let mut ev = Vec::new();
        self.run_layer(layer, &Self::to_words(activations), &mut ev)?;
        Ok(ev)
    }
}

/// Kernels the verifier knows how to drive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    FloatMul,
    FloatAdd,
    FloatRelu,
    FixedRelu,
    Int2Float,
    Div255,
    BnnMac,
    ZeroSkipMac,
    ArgmaxStep,
    CtMul,
    CtMac,
    CtRelu,
    CtCmp,
}

impl Kernel {
    pub const DEFAULT: [Kernel; 9] = [
        Kernel::FloatMul,
        Kernel::FloatAdd,
        Kernel::FloatRelu,
        Kernel::FixedRelu,
        Kernel::Int2Float,
        Kernel::Div255,
        Kernel::BnnMac,
        Kernel::ZeroSkipMac,
        Kernel::ArgmaxStep,
    ];
    pub const HARDENED: [Kernel; 4] = [Kernel::CtMul, Kernel::CtMac, Kernel::CtRelu, Kernel::CtCmp];

    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::FloatMul => "float_mul",
            Kernel::FloatAdd => "float_add",
            Kernel::FloatRelu => "float_relu",
            Kernel::FixedRelu => "fixed_relu",
            Kernel::Int2Float => "int2float",
            Kernel::Div255 => "div255",
            Kernel::BnnMac => "bnn_mac",
            Kernel::ZeroSkipMac => "zero_skip_mac",
            Kernel::ArgmaxStep => "argmax_step",
            Kernel::CtMul => "ct_mul",
            Kernel::CtMac => "ct_mac",
            Kernel::CtRelu => "ct_relu",
            Kernel::CtCmp => "ct_cmp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::DEFAULT
            .into_iter()
            .chain(Self::HARDENED)
            .find(|k| k.as_str() == s)
    }

    pub fn is_hardened(self) -> bool {
        Self::HARDENED.contains(&self)
    }
}

/// Operand coverage for the verifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeSet {
    /// Every operand for domains of at most 2^16 points, otherwise `Sampled`
    /// with 2^16 draws and seed 0.
    Auto,
    Sampled {
        count: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeakageReport {
    pub kernel: Kernel,
    pub probes: usize,
    pub exhaustive: bool,
    pub classes: BTreeSet<u32>,
}

impl LeakageReport {
    pub fn constant_time(&self) -> bool {
        self.classes.len() == 1
    }
}

/// Distinct cycle counts of `kernel` over its operand domain.
pub fn verify_constant_time(kernel: Kernel, probes: ProbeSet, p: &CostProfile) -> LeakageReport {
    let (count, seed) = match probes {
        ProbeSet::Auto => (1 << 16, 0),
        ProbeSet::Sampled { count, seed } => (count, seed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let float = |bits: u32| FloatRepr::from_bits(bits).unwrap_or(FloatRepr::ZERO);
    let mut classes = BTreeSet::new();
    let exhaustive_16 = matches!(probes, ProbeSet::Auto);
    let mut n = 0;
    let mut add = |c: u32| {
        classes.insert(c);
        n += 1;
    };
    let exhaustive = match kernel {
        Kernel::FloatMul | Kernel::FloatAdd if exhaustive_16 => {
            // Two 8-bit operand halves: sign/exponent low bits and mantissa.
            for a in 0..=255u32 {
                for b in 0..=255u32 {
                    let x = float((126 + (a >> 7)) << 23 | (a & 0x7f) << 16);
                    let y = float((120 + (b >> 7) * 6) << 23 | (b & 0x7f) << 16);
                    let (x, y) = if a == 0 { (FloatRepr::ZERO, y) } else { (x, y) };
                    add(if kernel == Kernel::FloatMul {
                        arith::leaky_float_mul(x, y, p).1
                    } else {
                        arith::leaky_float_add(x, y, p).1
                    });
                }
            }
            true
        }
        Kernel::FloatMul | Kernel::FloatAdd => {
            for _ in 0..count {
                let (x, y) = (
                    float(rng.gen::<u32>() & 0x7f7f_ffff),
                    float(rng.gen::<u32>() & 0x7f7f_ffff),
                );
                add(if kernel == Kernel::FloatMul {
                    arith::leaky_float_mul(x, y, p).1
                } else {
                    arith::leaky_float_add(x, y, p).1
                });
            }
            false
        }
        Kernel::FloatRelu => {
            if exhaustive_16 {
                // Upper 16 bits of every f32 pattern, NaN/Inf excluded.
                for hi in 0..=u16::MAX as u32 {
                    let v = FloatRepr::from_bits(hi << 16);
                    if let Ok(v) = v {
                        add(arith::leaky_float_relu(v, p).1);
                    }
                }
            } else {
                for _ in 0..count {
                    add(arith::leaky_float_relu(float(rng.gen::<u32>() & 0xff7f_ffff), p).1);
                }
            }
            exhaustive_16
        }
        Kernel::FixedRelu => {
            if exhaustive_16 {
                for v in i16::MIN..=i16::MAX {
                    add(arith::fixed_relu(i64::from(v), p).1);
                }
            } else {
                for _ in 0..count {
                    add(arith::fixed_relu(i64::from(rng.gen::<i32>()), p).1);
                }
            }
            exhaustive_16
        }
        Kernel::Int2Float => {
            for ip in 0..=255u8 {
                add(arith::leaky_int2float(ip, p).1);
            }
            true
        }
        Kernel::Div255 => {
            for ip in 0..=255u8 {
                add(p.div_base + arith::leaky_normalize_div255(ip, p).1.iter().sum::<u32>());
            }
            true
        }
        Kernel::BnnMac => {
            for ip in 0..=255u8 {
                for w in [-1i8, 1] {
                    add(arith::bnn_mac(0, ip, w, p).1);
                }
            }
            true
        }
        Kernel::ZeroSkipMac => {
            for ip in 0..=255u8 {
                for w in -8..=7i8 {
                    add(arith::zero_skip_mac(0i64, ip == 0, p, |acc| {
                        arith::fixed_mac(acc, ip, w, p)
                    })
                    .1);
                }
            }
            true
        }
        Kernel::ArgmaxStep => {
            for s in [SignClass::Negative, SignClass::Zero, SignClass::Positive] {
                for beats in [false, true] {
                    add(arith::argmax_step(s, beats, p));
                }
            }
            true
        }
        Kernel::CtMul | Kernel::CtMac => {
            // 8-bit activation times 24-bit weight word: a 32-bit domain.
            for _ in 0..count {
                let x = i64::from(rng.gen::<u8>()) << ACT_FRAC_BITS;
                let w = rng.gen_range(WORD_MIN..=WORD_MAX) as i32;
                let acc = rng.gen_range(-(1i64 << 40)..(1i64 << 40));
                add(if kernel == Kernel::CtMul {
                    ct_mul(x, w, p).1
                } else {
                    ct_mac(acc, x, w, AccWidth::W48, p).1
                });
            }
            false
        }
        Kernel::CtRelu => {
            if exhaustive_16 {
                for v in i16::MIN..=i16::MAX {
                    add(ct_relu(i64::from(v), p).1);
                }
            } else {
                for _ in 0..count {
                    add(ct_relu(rng.gen::<i64>(), p).1);
                }
            }
            exhaustive_16
        }
        Kernel::CtCmp => {
            if exhaustive_16 {
                for a in i8::MIN..=i8::MAX {
                    for b in i8::MIN..=i8::MAX {
                        add(ct_cmp(i64::from(a), 0, i64::from(b), 1, p).1);
                    }
                }
            } else {
                for _ in 0..count {
                    add(ct_cmp(rng.gen::<i32>().into(), 0, rng.gen::<i32>().into(), 1, p).1);
                }
            }
            exhaustive_16
        }
    };
    LeakageReport {
        kernel,
        probes: n,
        exhaustive,
        classes,
    }
}

/// Outcome of one attack against the hardened executor.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub attack: &'static str,
    pub succeeded: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResistanceReport {
    pub outcomes: Vec<AttackOutcome>,
}

impl ResistanceReport {
    pub fn all_failed(&self) -> bool {
        self.outcomes.iter().all(|o| !o.succeeded)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("attack,succeeded,detail\n");
        for o in &self.outcomes {
            let _ = writeln!(
                s,
                "{},{},{}",
                o.attack,
                o.succeeded,
                o.detail.replace(',', ";")
            );
        }
        s
    }
}

/// Largest mantissa hit rate still counted as chance.
pub const MANTISSA_CHANCE: f64 = 2.0 / 128.0;

/// Reruns the model and input attacks against the hardened executor for
/// `model`. Each outcome states whether the attack learned anything.
pub fn attack_resistance_suite(
    model: &NetworkModel,
    profile: &CostProfile,
    seed: u64,
) -> Result<ResistanceReport> {
    let device = HardenedDevice::new(model, profile.clone())?;
    let hard = device.model.clone();
    let oracle = Oracle::with_device(Box::new(device), JitterConfig::none());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();
    let prober = LayerProber::new(&oracle, profile, 0, None)?;
    let first = &hard.layers[0];

    match hard.precision() {
        Precision::Float => {
            let arith = FloatArith::new(false);
            let lut = build_mul_lut(profile, &mantissa_inputs(false), &arith);
            let fits = recover_layer_mantissas(&prober, &lut, first.out_dim)?;
            let mut hits = 0;
            let mut total = 0;
            for (n, row) in fits.iter().enumerate() {
                for (k, fit) in row.iter().enumerate() {
                    let truth = first.float_weight(n, k);
                    if truth.is_zero() {
                        continue;
                    }
                    total += 1;
                    hits += usize::from(fit.is_some_and(|f| f.mantissa == truth.mantissa7()));
                }
            }
            let rate = hits as f64 / total.max(1) as f64;
            outcomes.push(AttackOutcome {
                attack: "weight mantissa",
                succeeded: rate > MANTISSA_CHANCE,
                detail: format!("hit rate {hits}/{total}"),
            });
        }
        Precision::Fixed | Precision::Binary => {
            let t = prober.probe(&vec![1.0; first.in_dim])?;
            let mut right = 0;
            let mut classes = BTreeSet::new();
            for n in 0..first.out_dim {
                for c in prober.mac_cycles(&t, n) {
                    classes.insert(c as u64);
                }
                let w = weights_from_trace(&prober, &t, n, profile)?;
                right += (0..first.in_dim)
                    .filter(|&k| w[k] == first.int_weight(n, k))
                    .count();
            }
            outcomes.push(AttackOutcome {
                attack: "weight sign timing",
                succeeded: classes.len() > 1,
                detail: format!(
                    "{} MAC cost classes; {right}/{} signs matched by default guess",
                    classes.len(),
                    first.out_dim * first.in_dim
                ),
            });
        }
    }

    // Crossovers: any class change while sweeping one input from zero.
    let mut flips = 0;
    for n in 0..first.out_dim {
        let base = prober.sign_of(&[], n)?;
        for k in 0..first.in_dim {
            let (hit, _) = sweep(&prober, n, &[], k, base, CrossRule::AnyChange, 1.0)?;
            flips += usize::from(hit.is_some());
        }
    }
    outcomes.push(AttackOutcome {
        attack: "activation crossover",
        succeeded: flips > 0,
        detail: format!("{flips} flips"),
    });

    let x: Vec<u8> = (0..hard.input_width).map(|_| rng.gen()).collect();
    let (_, trace) = oracle.run_inference(&x)?;
    let recovered = |r: Result<crate::attack::input::InputEstimate>| -> (bool, String) {
        match r {
            Ok(e) => {
                let exact = e
                    .values
                    .iter()
                    .zip(&x)
                    .filter(|(v, &t)| **v == InputValue::Exact(t))
                    .count();
                (exact > 0, format!("{exact}/{} inputs exact", x.len()))
            }
            Err(e) => (false, e.to_string()),
        }
    };
    if hard.precision() == Precision::Float {
        let ms: Vec<Vec<_>> = (0..first.out_dim)
            .map(|n| {
                (0..first.in_dim)
                    .map(|k| {
                        Some(first.float_weight(n, k))
                            .filter(|w| !w.is_zero())
                            .map(FloatRepr::mantissa7)
                    })
                    .collect()
            })
            .collect();
        let (ok, detail) = recovered(recover_input_float(&trace, &ms, profile));
        outcomes.push(AttackOutcome {
            attack: "input float path",
            succeeded: ok,
            detail,
        });
    }
    let div_events = trace
        .events
        .iter()
        .filter(|e| e.kind == OpKind::DivBit)
        .count();
    let (ok, detail) = recovered(recover_input_div255(std::slice::from_ref(&trace), profile));
    outcomes.push(AttackOutcome {
        attack: "input div255 path",
        succeeded: ok,
        detail: format!("{div_events} div events; {detail}"),
    });

    // Sparse input, 80% zeros: the mask must do no better than the prior.
    let sparse: Vec<u8> = (0..hard.input_width)
        .map(|_| {
            if rng.gen_bool(0.8) {
                0
            } else {
                rng.gen_range(1..=255)
            }
        })
        .collect();
    let (_, t) = oracle.run_inference(&sparse)?;
    let mask = recover_sparsity_mask(&t)?;
    let correct = mask
        .values
        .iter()
        .zip(&sparse)
        .filter(|(v, &s)| **v == InputValue::IsZero(s == 0))
        .count();
    let zeros = sparse.iter().filter(|&&v| v == 0).count();
    let prior = zeros.max(sparse.len() - zeros);
    outcomes.push(AttackOutcome {
        attack: "sparsity mask",
        succeeded: correct > prior,
        detail: format!(
            "{correct}/{} correct; majority guess gets {prior}",
            sparse.len()
        ),
    });
    Ok(ResistanceReport { outcomes })
}

/// One row of the overhead comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OverheadRow {
    pub operation: &'static str,
    pub default_min: f64,
    pub default_max: f64,
    pub solution: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverheadReport {
    pub rows: Vec<OverheadRow>,
    pub storage_ratio: f64,
}

/// Default-versus-hardened cycles for the operations in the overhead table.
/// Kernel cycles only; data movement is not counted.
pub fn overhead_report(p: &CostProfile, seed: u64) -> OverheadReport {
    let span = |k: Kernel| {
        let r = verify_constant_time(k, ProbeSet::Auto, p);
        (
            f64::from(*r.classes.first().expect("probed")),
            f64::from(*r.classes.last().expect("probed")),
        )
    };
    let mut rows = Vec::new();
    let (lo, hi) = span(Kernel::FloatMul);
    rows.push(OverheadRow {
        operation: "multiplication",
        default_min: lo,
        default_max: hi,
        solution: f64::from(p.ct_mul),
    });

    // 25 MACs with weights from (-1, 1) and inputs from (0, 1).
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let mut acc = FloatRepr::ZERO;
        let mut cycles = 0;
        for _ in 0..25 {
            let w = FloatRepr::from_f64_lossy(rng.gen_range(-1.0..1.0)).expect("finite");
            let x = FloatRepr::from_f64_lossy(rng.gen_range(0.0..1.0)).expect("finite");
            let (prod, c1) = arith::leaky_float_mul(x, w, p);
            let (sum, c2) = arith::leaky_float_add(acc, prod, p);
            acc = sum;
            cycles += c1 + c2;
        }
        lo = lo.min(f64::from(cycles));
        hi = hi.max(f64::from(cycles));
    }
    rows.push(OverheadRow {
        operation: "25-MAC ensemble",
        default_min: lo,
        default_max: hi,
        solution: f64::from(25 * p.ct_mac),
    });
    let (lo, hi) = span(Kernel::FloatRelu);
    rows.push(OverheadRow {
        operation: "float ReLU",
        default_min: lo,
        default_max: hi,
        solution: f64::from(p.ct_relu),
    });
    let (lo, hi) = span(Kernel::FixedRelu);
    rows.push(OverheadRow {
        operation: "fixed ReLU",
        default_min: lo,
        default_max: hi,
        solution: f64::from(p.ct_relu),
    });
    let probe = NormalizedLayerWeights {
        e_max: 0,
        words: vec![0; 25],
        bias: vec![],
    };
    OverheadReport {
        rows,
        storage_ratio: storage_ratio(&probe),
    }
}

impl OverheadReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("operation,default_min,default_max,solution\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.operation, r.default_min, r.default_max, r.solution
            );
        }
        let _ = writeln!(s, "weight storage,1,1,{}", self.storage_ratio);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<18} {:>16} {:>10}\n", "operation", "default", "solution");
        for r in &self.rows {
            let d = if r.default_min == r.default_max {
                format!("{}", r.default_min)
            } else {
                format!("{}-{}", r.default_min, r.default_max)
            };
            let _ = writeln!(s, "{:<18} {:>16} {:>10}", r.operation, d, r.solution);
        }
        let _ = writeln!(
            s,
            "{:<18} {:>16} {:>9}x",
            "weight storage", "1x", self.storage_ratio
        );
        s.push_str("Timing only: the ReLU sign mask still has data-dependent Hamming weight.\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{random_model, RandomSpec};

    fn layer_of(ws: &[f64]) -> Layer {
        let weights = ws
            .iter()
            .map(|&w| FloatRepr::from_f64_lossy(w).unwrap())
            .collect();
        Layer {
            out_dim: 1,
            in_dim: ws.len(),
            params: LayerParams::Float {
                weights,
                bias: vec![FloatRepr::ZERO],
            },
            activation: Activation::Relu,
        }
    }

    #[test]
    fn normalization_example() {
        // 1.75×2^0, −1.3203125×2^−1, 1×2^−2 stored against e_max = 0.
        let nw = normalize_weights(&layer_of(&[1.75, -0.66015625, 0.25])).unwrap();
        assert_eq!(nw.e_max, 0);
        let stored: Vec<f64> = (0..3).map(|i| nw.dequantize(i)).collect();
        assert_eq!(stored, vec![1.75, -0.66015625, 0.25]);
        assert_eq!(storage_ratio(&nw), 0.75);
    }

    #[test]
    fn single_weight_and_zero_layer() {
        let nw = normalize_weights(&layer_of(&[-0.375])).unwrap();
        assert_eq!((nw.e_max, nw.dequantize(0)), (-2, -0.375));
        assert_eq!(nw.words[0], -(3 << 21));
        assert_eq!(normalize_weights(&layer_of(&[0.0, 0.0])).unwrap().e_max, 0);
    }

    #[test]
    fn relu_masks() {
        let p = CostProfile::atmega_like();
        assert_eq!(ct_relu(-123, &p).0, 0);
        assert_eq!(ct_relu(123, &p).0, 123);
        assert_eq!(ct_relu(0, &p).0, 0);
        assert_eq!(ct_min(300, 255), 255);
        assert_eq!(ct_min(-4, 255), -4);
    }

    #[test]
    fn cmp_keeps_first_maximum() {
        let p = CostProfile::atmega_like();
        assert_eq!(ct_cmp(5, 0, 7, 1, &p).0, (7, 1));
        assert_eq!(ct_cmp(5, 0, 5, 1, &p).0, (5, 0));
        assert_eq!(ct_cmp(5, 0, -9, 1, &p).0, (5, 0));
    }

    #[test]
    fn mac_matches_float_reference() {
        let p = CostProfile::atmega_like();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let w: f64 = rng.gen_range(-1.0..1.0);
            let x: u8 = rng.gen();
            let nw = normalize_values(&[w], &[0.0]).unwrap();
            let (acc, _) = ct_mac(
                0,
                i64::from(x) << ACT_FRAC_BITS,
                nw.words[0],
                AccWidth::W48,
                &p,
            );
            let got = acc.unwrap() as f64 * 2f64.powi(nw.e_max - WEIGHT_FRAC_BITS);
            let want = w * f64::from(x);
            assert!(
                (got - want).abs() <= want.abs() * 2f64.powi(-16) + 2f64.powi(nw.e_max - 20),
                "{w} × {x}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn overflow_widens() {
        let p = CostProfile::atmega_like();
        let (a, c) = ct_mac((1 << 47) - 1, 1 << ACT_FRAC_BITS, 1, AccWidth::W48, &p);
        assert_eq!((a, c), (None, p.ct_mac));
        let (a, c) = ct_mac((1 << 47) - 1, 1 << ACT_FRAC_BITS, 1, AccWidth::W64, &p);
        assert_eq!((a, c), (Some(1 << 47), 2 * p.ct_mac));
    }

    #[test]
    fn verifier_examples() {
        let p = CostProfile::atmega_like();
        assert_eq!(
            verify_constant_time(Kernel::CtRelu, ProbeSet::Auto, &p)
                .classes
                .len(),
            1
        );
        assert_eq!(
            verify_constant_time(Kernel::FixedRelu, ProbeSet::Auto, &p)
                .classes
                .len(),
            3
        );
        assert_eq!(
            verify_constant_time(Kernel::Int2Float, ProbeSet::Auto, &p)
                .classes
                .len(),
            9
        );
    }

    #[test]
    fn hardened_outputs_follow_default() {
        for (prec, seed) in [(Precision::Fixed, 2), (Precision::Binary, 3)] {
            let m = random_model(&RandomSpec::new(&[16, 8, 4], prec, seed)).unwrap();
            let d = HardenedDevice::new(&m, CostProfile::atmega_like()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                let x: Vec<u8> = (0..16).map(|_| rng.gen()).collect();
                assert_eq!(
                    &d.infer(&x).unwrap().0,
                    m.evaluate(&x).unwrap().outputs.last().unwrap()
                );
            }
        }
    }

    /// The fixed-point executor tracks real arithmetic; the default float
    /// path rounds every step to 8 significant bits and so drifts from both
    /// on near ties.
    #[test]
    fn hardened_float_tracks_real_arithmetic() {
        for seed in 1..4 {
            let m = random_model(&RandomSpec::new(&[16, 8, 4], Precision::Float, seed)).unwrap();
            let d = HardenedDevice::new(&m, CostProfile::atmega_like()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut exact, mut default) = (0, 0);
            for _ in 0..1000 {
                let x: Vec<u8> = (0..16).map(|_| rng.gen()).collect();
                let got = crate::network::argmax_first(&d.infer(&x).unwrap().0);
                exact += usize::from(got == crate::network::argmax_first(&exact_eval(&m, &x, 1.0)));
                default += usize::from(got == m.evaluate(&x).unwrap().argmax);
            }
            assert_eq!(exact, 1000, "seed {seed}");
            assert!(default >= 990, "seed {seed}: {default}/1000");
        }
    }

    #[test]
    fn hardened_traces_have_one_class_per_kind() {
        let m = random_model(&RandomSpec::new(&[6, 4, 3], Precision::Float, 5)).unwrap();
        let d = HardenedDevice::new(&m, CostProfile::atmega_like()).unwrap();
        let mut seen: Vec<(OpKind, BTreeSet<u64>)> = Vec::new();
        for s in 0..50u8 {
            let x: Vec<u8> = (0..6)
                .map(|i| s.wrapping_mul(41).wrapping_add(i * 13))
                .collect();
            for e in d.infer(&x).unwrap().1 {
                match seen.iter_mut().find(|(k, _)| *k == e.kind) {
                    Some((_, s)) => {
                        s.insert(e.cycles as u64);
                    }
                    None => seen.push((e.kind, BTreeSet::from([e.cycles as u64]))),
                }
            }
        }
        assert!(seen.iter().all(|(_, s)| s.len() == 1), "{seen:?}");
        assert!(seen
            .iter()
            .all(|(k, _)| matches!(k, OpKind::Mac | OpKind::Relu | OpKind::Cmp)));
    }

    #[test]
    fn eliminated_normalization_agrees() {
        let mut spec = RandomSpec::new(&[16, 8, 4], Precision::Float, 7);
        spec.normalization = Normalization::Div255;
        let m = random_model(&spec).unwrap();
        let e = eliminate_normalization(&m).unwrap();
        assert_eq!(e.normalization, Normalization::None);
        let d = HardenedDevice::new(&m, CostProfile::atmega_like()).unwrap();
        let (_, ev) = d.infer(&[9; 16]).unwrap();
        assert!(ev.iter().all(|e| e.kind != OpKind::DivBit));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut agree = 0;
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let x: Vec<u8> = (0..16).map(|_| rng.gen()).collect();
            let (out, _) = d.infer(&x).unwrap();
            let want = exact_eval(&m, &x, 255.0);
            let scale = want.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            worst = worst.max(
                out.iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b).abs() / scale)
                    .fold(0.0, f64::max),
            );
            agree +=
                usize::from(crate::network::argmax_first(&out) == m.evaluate(&x).unwrap().argmax);
        }
        assert_eq!(agree, 1000);
        assert!(worst <= 2f64.powi(-12), "worst relative error {worst}");
    }

    /// Real-valued evaluation of the device-effective parameters on `ip / div`.
    fn exact_eval(m: &NetworkModel, x: &[u8], div: f64) -> Vec<f64> {
        let mut v: Vec<f64> = x.iter().map(|&i| f64::from(i) / div).collect();
        for l in &m.layers {
            let LayerParams::Float { weights, bias } = &l.params else {
                unreachable!()
            };
            v = (0..l.out_dim)
                .map(|n| {
                    let pa = trunc7(bias[n].to_f64())
                        + (0..l.in_dim)
                            .map(|k| trunc7(weights[n * l.in_dim + k].to_f64()) * v[k])
                            .sum::<f64>();
                    if l.activation == Activation::Relu {
                        pa.max(0.0)
                    } else {
                        pa
                    }
                })
                .collect();
        }
        v
    }
}

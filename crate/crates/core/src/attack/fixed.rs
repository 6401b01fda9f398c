//! Fixed-point recovery from zero-crossover readings.
//!
//! A sweep of input `k` alone flips the ReLU class of a neuron with bias `b`
//! and opposite-signed weight `wt` at `ceil(|b| / |wt|)`. The bias is the
//! column of the crossover table that contains every round-1 reading; the
//! weights are the rows. Same-signed weights are read in a second round after
//! a known weight has pushed the pre-activation across zero. What the table
//! leaves open is settled by replaying every observation against the
//! candidates and querying the probes that split them.

use super::engine::{Branch, Engine, IntArith, NeuronArith, Observation};
use super::{sweep, CrossRule, LayerProber, NeuronReport, RecoveredModel, Round, WeightReport};
use crate::arith::{CostProfile, SignClass};
use crate::error::{Error, Result};
use crate::network::{Activation, Layer, LayerParams, NetworkModel, Precision};
use crate::oracle::Oracle;

pub const BIAS_ROWS: u32 = 128;
pub const WEIGHT_COLS: u32 = 8;
const WEIGHT_MIN: i64 = -8;
const WEIGHT_MAX: i64 = 7;
const BIAS_MIN: i64 = -128;
const BIAS_MAX: i64 = 127;

#[derive(Clone, Debug, Default)]
pub struct FixedAttackConfig {
    pub seed: u64,
    /// Reference input value for round 2; chosen automatically when unset.
    pub ip_ref: Option<u32>,
    /// Disambiguation queries per neuron; defaults to ten single sweeps per input.
    pub budget: Option<u64>,
}

/// `I[b][wt] = ceil(b / wt)` for `b` in 1..=128 and `wt` in 1..=8.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossoverLut {
    cells: Vec<[u32; WEIGHT_COLS as usize]>,
}

impl CrossoverLut {
    pub fn get(&self, b: u32, wt: u32) -> u32 {
        self.cells[(b - 1) as usize][(wt - 1) as usize]
    }

    /// Weight magnitudes whose crossover from `|b| = b` equals `reading`.
    pub fn rows(&self, b: u32, reading: u32) -> Vec<u32> {
        (1..=WEIGHT_COLS)
            .filter(|&w| self.get(b, w) == reading)
            .collect()
    }
}

pub fn build_crossover_lut() -> CrossoverLut {
    let cells = (1..=BIAS_ROWS)
        .map(|b| std::array::from_fn(|i| b.div_ceil(i as u32 + 1)))
        .collect();
    CrossoverLut { cells }
}

/// Bias magnitudes whose column holds every reading.
pub fn recover_bias_fixed(readings: &[u32], lut: &CrossoverLut) -> Result<Vec<u32>> {
    let cands: Vec<u32> = (1..=BIAS_ROWS)
        .filter(|&b| readings.iter().all(|&r| !lut.rows(b, r).is_empty()))
        .collect();
    if cands.is_empty() {
        return Err(Error::Inconsistent(format!(
            "no bias column holds readings {readings:?}"
        )));
    }
    Ok(cands)
}

/// Signed weights of sign `sign` with `|wt|` in `mags` that fit the 4-bit range.
fn signed(mags: &[u32], sign: i64) -> Vec<i64> {
    mags.iter()
        .map(|&m| sign * i64::from(m))
        .filter(|w| (WEIGHT_MIN..=WEIGHT_MAX).contains(w))
        .collect()
}

/// Round-1 weights: opposite in sign to `b`, magnitude from the rows of
/// column `|b|`. A reading that maps to several rows gives a candidate set.
pub fn recover_weights_fixed_round1(
    readings: &[Option<u32>],
    b: i64,
    lut: &CrossoverLut,
) -> Result<Vec<Option<Vec<i64>>>> {
    if b == 0 || b.unsigned_abs() > u64::from(BIAS_ROWS) {
        return Err(Error::Precondition(format!(
            "bias {b} has no crossover column"
        )));
    }
    let col = b.unsigned_abs() as u32;
    readings
        .iter()
        .map(|r| {
            let Some(r) = *r else { return Ok(None) };
            let c = signed(&lut.rows(col, r), -b.signum());
            if c.is_empty() {
                return Err(Error::Inconsistent(format!(
                    "reading {r} is not in column {col}"
                )));
            }
            Ok(Some(c))
        })
        .collect()
}

/// Largest shift of the bias past zero that stays inside the 8-bit range.
pub fn choose_ip_ref(b: i64, w_ref: i64) -> Option<u32> {
    (1..=255u32).rev().find(|&ip| {
        let s = b + i64::from(ip) * w_ref;
        s.signum() == -b.signum() && (BIAS_MIN..=BIAS_MAX).contains(&s)
    })
}

/// A reference value that pushes every `(b, wt_ref)` hypothesis across zero
/// and keeps the smallest resulting `|b'|` as large as the 8-bit range allows.
fn robust_ip_ref(hyps: &[(i64, i64)]) -> Option<u32> {
    (1..=255u32)
        .filter_map(|ip| {
            let shifted: Vec<i64> = hyps.iter().map(|&(b, w)| b + i64::from(ip) * w).collect();
            let flips = hyps
                .iter()
                .zip(&shifted)
                .all(|(&(b, _), &s)| s != 0 && s.signum() == -b.signum());
            let in_range = shifted.iter().all(|s| (BIAS_MIN..=BIAS_MAX).contains(s));
            let least = shifted.iter().map(|s| s.abs()).min()?;
            (flips && in_range).then_some((least, ip))
        })
        .max()
        .map(|(_, ip)| ip)
}

/// Second-round readings, taken with the reference input held at `ip_ref`.
#[derive(Clone, Debug, PartialEq)]
pub struct Round2 {
    pub reference: usize,
    pub ip_ref: u32,
    /// `b' = b + ip_ref · wt_ref`.
    pub shifted_bias: i64,
    pub readings: Vec<Option<u32>>,
    /// Candidates from column `|b'|`; `Some(vec![0])` when nothing flipped.
    pub weights: Vec<Option<Vec<i64>>>,
}

/// Holds the reference at `ip_ref` so the pre-activation has the opposite
/// sign, then sweeps each `pending` input. Every query lands in `log`.
#[allow(clippy::too_many_arguments)]
pub fn recover_weights_fixed_round2(
    prober: &LayerProber<'_>,
    neuron: usize,
    reference: (usize, i64),
    b: i64,
    ip_ref: Option<u32>,
    pending: &[usize],
    lut: &CrossoverLut,
    log: &mut Vec<Observation>,
) -> Result<Option<Round2>> {
    let (rf, w_ref) = reference;
    let Some(ip) = ip_ref.or_else(|| choose_ip_ref(b, w_ref)) else {
        return Ok(None);
    };
    let shifted = b + i64::from(ip) * w_ref;
    if shifted.signum() != -b.signum() || shifted.unsigned_abs() > u64::from(BIAS_ROWS) {
        return Err(Error::Precondition(format!(
            "ip_ref {ip} leaves b' = {shifted} outside the usable range"
        )));
    }
    let base = [(rf, f64::from(ip))];
    let class = prober.sign_of(&base, neuron)?;
    log.push(Observation::new(base.to_vec(), class));
    let mut readings = vec![None; prober.width];
    let mut weights = vec![None; prober.width];
    for &k in pending {
        let (r, seen) = sweep(prober, neuron, &base, k, class, CrossRule::AnyChange, 1.0)?;
        log.extend(seen.into_iter().map(|(x, c)| Observation::new(x, c)));
        readings[k] = r;
        weights[k] = Some(match r {
            Some(r) => signed(
                &lut.rows(shifted.unsigned_abs() as u32, r),
                -shifted.signum(),
            ),
            None => vec![0],
        });
    }
    Ok(Some(Round2 {
        reference: rf,
        ip_ref: ip,
        shifted_bias: shifted,
        readings,
        weights,
    }))
}

/// Result for one neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedNeuron {
    pub bias: i64,
    /// Every bias still consistent with the observations.
    pub bias_candidates: Vec<i64>,
    pub weights: Vec<i64>,
    pub ambiguity: Vec<usize>,
    pub readings: Vec<Option<(Round, u32)>>,
    /// Closed-form values before disambiguation (first candidate).
    pub estimates: Vec<Option<i64>>,
    pub round2: Option<Round2>,
    pub queries: u64,
    pub inconsistent: bool,
    pub note: Option<String>,
}

fn weight_domain() -> Vec<i64> {
    (WEIGHT_MIN..=WEIGHT_MAX).collect()
}

/// Values `wt` that never flip the class in a round-1 sweep from `b`.
fn silent_domain(b: i64) -> Vec<i64> {
    weight_domain()
        .into_iter()
        .filter(|&w| w == 0 || w.signum() == b.signum())
        .collect()
}

pub fn attack_fixed_neuron(
    prober: &LayerProber<'_>,
    neuron: usize,
    lut: &CrossoverLut,
    cfg: &FixedAttackConfig,
) -> Result<FixedNeuron> {
    Ok(probe_fixed_neuron(prober, neuron, lut, cfg)?.summarize())
}

/// Rounds 1 and 2 and the variant crossovers for one neuron.
fn probe_fixed_neuron(
    prober: &LayerProber<'_>,
    neuron: usize,
    lut: &CrossoverLut,
    cfg: &FixedAttackConfig,
) -> Result<NeuronState> {
    let start = prober.oracle.query_count();
    let n = prober.width;
    let mut log = Vec::new();
    let sb = prober.sign_of(&[], neuron)?;
    log.push(Observation::new(vec![], sb));

    let mut r1 = vec![None; n];
    for (k, slot) in r1.iter_mut().enumerate() {
        let (r, seen) = sweep(prober, neuron, &[], k, sb, CrossRule::AnyChange, 1.0)?;
        log.extend(seen.into_iter().map(|(x, c)| Observation::new(x, c)));
        *slot = r;
    }
    let seen_readings: Vec<u32> = r1.iter().flatten().copied().collect();

    let mut note = None;
    let mut biases: Vec<i64> = match sb {
        SignClass::Zero => vec![0],
        _ => {
            let s = i64::from(sb.signum());
            recover_bias_fixed(&seen_readings, lut)?
                .into_iter()
                .map(|m| s * i64::from(m))
                .filter(|b| (BIAS_MIN..=BIAS_MAX).contains(b))
                .collect()
        }
    };
    if seen_readings.is_empty() && sb != SignClass::Zero {
        note = Some("no input crosses zero; the bias is only bounded by its sign".to_string());
    }

    // Closed-form candidates per bias hypothesis.
    let mut branches = Vec::new();
    let mut first_r1: Option<Vec<Option<Vec<i64>>>> = None;
    biases.retain(|&b| {
        let cands = if b == 0 {
            Ok(r1
                .iter()
                .map(|r| r.map(|_| weight_domain().into_iter().filter(|&w| w != 0).collect()))
                .collect::<Vec<_>>())
        } else {
            recover_weights_fixed_round1(&r1, b, lut)
        };
        let Ok(cands) = cands else { return false };
        let candidates = cands
            .iter()
            .map(|c| {
                c.clone()
                    .unwrap_or_else(|| if b == 0 { vec![0] } else { silent_domain(b) })
            })
            .collect();
        branches.push(Branch {
            bias: b,
            candidates,
        });
        first_r1.get_or_insert(cands);
        true
    });
    let first_r1 = first_r1.ok_or_else(|| {
        Error::Inconsistent(format!("neuron {neuron}: round-1 readings fit no bias"))
    })?;
    let mut engine = Engine::new(IntArith, branches);
    engine.log = std::mem::take(&mut log);
    engine.propagate();

    // Round 2: the round-1 weight with the largest reading becomes the
    // reference and every hypothesis gets its own value for it.
    let mut round2 = None;
    let pending: Vec<usize> = (0..n).filter(|&k| r1[k].is_none()).collect();
    let reference = (0..n)
        .filter(|&k| r1[k].is_some())
        .max_by_key(|&k| (r1[k], std::cmp::Reverse(k)));
    if let (Some(rf), false, false) = (reference, pending.is_empty(), engine.branches.is_empty()) {
        engine.split(rf);
        let hyps: Vec<(i64, i64)> = engine
            .branches
            .iter()
            .map(|b| (b.bias, b.candidates[rf][0]))
            .collect();
        let ip = cfg.ip_ref.or_else(|| robust_ip_ref(&hyps));
        if let Some(ip) = ip {
            let (bh, wh) = hyps[0];
            let mut log2 = Vec::new();
            round2 = recover_weights_fixed_round2(
                prober,
                neuron,
                (rf, wh),
                bh,
                Some(ip),
                &pending,
                lut,
                &mut log2,
            )?;
            engine.log.extend(log2);
            engine.propagate();
        }
    }

    // Variant crossovers until the candidates agree or the budget runs out.
    let budget = cfg.budget.unwrap_or(10 * 255 * n as u64);
    let mut spent = 0;
    while spent < budget && !engine.branches.is_empty() && !engine.is_resolved() {
        let probes = variant_probes(&engine, n);
        let Some(p) = engine.best_probe(&probes) else {
            break;
        };
        let class = prober.sign_of(&p, neuron)?;
        engine.observe(Observation::new(p, class));
        spent += 1;
    }

    let mut readings: Vec<Option<(Round, u32)>> =
        r1.iter().map(|r| r.map(|v| (Round::Round1, v))).collect();
    let mut estimates: Vec<Option<i64>> =
        first_r1.iter().map(|c| c.as_ref().map(|c| c[0])).collect();
    if let Some(r2) = &round2 {
        for k in 0..n {
            if let Some(v) = r2.readings[k] {
                readings[k] = Some((Round::Round2, v));
            }
            if let Some(c) = r2.weights[k].as_ref().and_then(|c| c.first()) {
                estimates[k] = Some(*c);
            }
        }
    }
    Ok(NeuronState {
        engine,
        readings,
        estimates,
        round2,
        queries: prober.oracle.query_count() - start,
        note,
    })
}

/// A neuron's hypotheses together with the evidence gathered so far.
pub(super) struct NeuronState {
    pub engine: Engine<IntArith>,
    pub readings: Vec<Option<(Round, u32)>>,
    pub estimates: Vec<Option<i64>>,
    pub round2: Option<Round2>,
    pub queries: u64,
    pub note: Option<String>,
}

impl NeuronState {
    fn summarize(self) -> FixedNeuron {
        let NeuronState {
            engine,
            readings,
            estimates,
            round2,
            queries,
            note,
        } = self;
        let n = readings.len();
        let Some(head) = engine.branches.first() else {
            return FixedNeuron {
                bias: 0,
                bias_candidates: vec![],
                weights: estimates.iter().map(|e| e.unwrap_or(0)).collect(),
                ambiguity: vec![0; n],
                readings,
                estimates,
                round2,
                queries,
                inconsistent: true,
                note: Some("no hypothesis explains every observation".to_string()),
            };
        };
        let mut bias_candidates: Vec<i64> = engine.branches.iter().map(|b| b.bias).collect();
        bias_candidates.sort_unstable();
        bias_candidates.dedup();
        FixedNeuron {
            bias: head.bias,
            bias_candidates,
            weights: head.candidates.iter().map(|c| c[0]).collect(),
            ambiguity: value_counts(&engine),
            readings,
            estimates,
            round2,
            queries,
            inconsistent: false,
            note,
        }
    }
}

/// Distinct values each weight still takes across the hypotheses.
pub(super) fn value_counts(engine: &Engine<IntArith>) -> Vec<usize> {
    let n = engine.branches.first().map_or(0, |b| b.candidates.len());
    (0..n)
        .map(|k| {
            let mut vals: Vec<i64> = engine
                .branches
                .iter()
                .flat_map(|b| b.candidates[k].iter().copied())
                .collect();
            vals.sort_unstable();
            vals.dedup();
            vals.len()
        })
        .collect()
}

/// The empty probe, every single input, and ordered pairs with the first
/// input on a coarse grid.
pub(super) fn sparse_argmax_family(n: usize) -> Vec<Vec<(usize, f64)>> {
    let mut family: Vec<Vec<(usize, f64)>> = vec![vec![]];
    for k in 0..n {
        family.extend((1..=255).map(|v| vec![(k, f64::from(v))]));
        for m in (0..n).filter(|&m| m != k) {
            for a in (17..=255).step_by(17) {
                for c in 1..=255 {
                    family.push(vec![(k, f64::from(a)), (m, f64::from(c))]);
                }
            }
        }
    }
    family
}

/// The sign channel alone cannot separate some neurons: one whose weights all
/// share the sign of the bias never crosses zero, and `(b, wt)` is
/// indistinguishable from `(2b, 2wt)`. In an argmax layer the compare step
/// also reveals whether a neuron beats the running best, which is a
/// threshold test against neurons that are already known.
pub(super) fn resolve_with_argmax(
    prober: &LayerProber<'_>,
    engines: &mut [Engine<IntArith>],
    family: &[Vec<(usize, f64)>],
    budget: u64,
) -> Result<()> {
    let out = engines.len();
    let known = |e: &Engine<IntArith>| e.is_resolved();
    let pa = |e: &Engine<IntArith>, x: &[(usize, f64)]| -> f64 {
        let b = &e.branches[0];
        let terms: Vec<(f64, i64)> = x.iter().map(|&(k, v)| (v, b.candidates[k][0])).collect();
        e.arith.pre_activation(b.bias, &terms)
    };
    loop {
        let mut progress = false;
        for j in 0..out {
            if engines[j].branches.is_empty()
                || known(&engines[j])
                || !engines[..j].iter().all(known)
            {
                continue;
            }
            // Forward: j against the best of its predecessors. Backward: the
            // next neuron, once known, against j.
            let forward = j > 0;
            let backward = !forward && j + 1 < out && known(&engines[j + 1]);
            if !forward && !backward {
                continue;
            }
            let mut spent = 0;
            while spent < budget && !engines[j].branches.is_empty() && !known(&engines[j]) {
                let mut cands = Vec::new();
                let mut xs = Vec::new();
                for x in family {
                    let best = engines[..j]
                        .iter()
                        .map(|e| pa(e, x))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let offset = if forward {
                        best + 0.5
                    } else {
                        let next = pa(&engines[j + 1], x);
                        if best >= next {
                            continue;
                        }
                        next - 0.5
                    };
                    cands.push(Observation::against(x.clone(), offset, SignClass::Zero));
                    xs.push(x);
                }
                let Some(i) = engines[j].best_observation(&cands) else {
                    break;
                };
                let trace = prober.probe_sparse(xs[i])?;
                let class = if forward {
                    if prober.class_of(&trace, j)?.1 {
                        SignClass::Positive
                    } else {
                        SignClass::Negative
                    }
                } else if prober.class_of(&trace, j + 1)?.1 {
                    SignClass::Negative
                } else {
                    SignClass::Positive
                };
                let mut o = cands.swap_remove(i);
                o.class = class;
                engines[j].observe(o);
                spent += 1;
                progress = true;
            }
        }
        if !progress {
            return Ok(());
        }
    }
}

/// Both variant families: a known helper `m` held at `ip_m` under a sweep
/// of `k`, and two inputs raised together.
fn variant_probes(engine: &Engine<IntArith>, n: usize) -> Vec<Vec<(usize, f64)>> {
    let bias_open = engine
        .branches
        .iter()
        .any(|b| b.bias != engine.branches[0].bias);
    let targets: Vec<usize> = if bias_open {
        (0..n).collect()
    } else {
        engine.ambiguous_weights()
    };
    // A helper is known inside every hypothesis, though not necessarily
    // with the same value in each.
    let mut helpers: Vec<(usize, i64)> = (0..n)
        .filter_map(|m| {
            let known = engine
                .branches
                .iter()
                .all(|b| b.candidates[m].len() == 1 && b.candidates[m][0] != 0);
            known.then(|| (m, engine.branches[0].candidates[m][0]))
        })
        .collect();
    // The two largest of each sign, so the shifted bias can move either way.
    helpers.sort_by_key(|&(m, w)| (std::cmp::Reverse(w.abs()), m));
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = helpers.into_iter().partition(|h| h.1 > 0);
    pos.truncate(2);
    neg.truncate(2);
    let helpers: Vec<(usize, i64)> = pos.into_iter().chain(neg).collect();
    let held: Vec<f64> = (0..=255)
        .step_by(8)
        .chain(std::iter::once(255))
        .map(f64::from)
        .collect();

    let mut probes = Vec::new();
    for &k in &targets {
        for v in 1..=255 {
            probes.push(vec![(k, f64::from(v))]);
        }
        for &(m, _) in helpers.iter().filter(|h| h.0 != k) {
            for &h in &held {
                for v in 1..=255 {
                    probes.push(vec![(m, h), (k, f64::from(v))]);
                }
            }
        }
        for &m in targets.iter().filter(|&&m| m > k) {
            for v in 1..=255 {
                probes.push(vec![(k, f64::from(v)), (m, f64::from(v))]);
            }
        }
    }
    probes
}

pub fn recover_fixed_model(
    oracle: &Oracle,
    profile: &CostProfile,
    cfg: &FixedAttackConfig,
) -> Result<RecoveredModel> {
    if oracle.precision() != Precision::Fixed {
        return Err(Error::Precondition(
            "fixed attack needs a fixed-point model".into(),
        ));
    }
    let start = oracle.query_count();
    let dims = oracle.dims();
    let lut = build_crossover_lut();
    let mut layers = Vec::new();
    let mut weights = Vec::new();
    let mut neurons = Vec::new();
    for layer in 0..dims.len() - 1 {
        let (width, out) = (dims[layer], dims[layer + 1]);
        let prober = LayerProber::new(oracle, profile, layer, None)?;
        let mut w = Vec::with_capacity(out * width);
        let mut b = Vec::with_capacity(out);
        let mut states = (0..out)
            .map(|n| probe_fixed_neuron(&prober, n, &lut, cfg))
            .collect::<Result<Vec<_>>>()?;
        if oracle.activation(layer) == Activation::ArgmaxFinal && out > 1 {
            let mut engines: Vec<Engine<IntArith>> = states
                .iter_mut()
                .map(|s| std::mem::replace(&mut s.engine, Engine::new(IntArith, vec![])))
                .collect();
            resolve_with_argmax(
                &prober,
                &mut engines,
                &sparse_argmax_family(width),
                cfg.budget.unwrap_or(10 * 255 * width as u64),
            )?;
            for (s, e) in states.iter_mut().zip(engines) {
                s.engine = e;
            }
        }
        for (n, state) in states.into_iter().enumerate() {
            let rec = state.summarize();
            for k in 0..width {
                weights.push(WeightReport {
                    layer,
                    neuron: n,
                    input: k,
                    round: rec.readings[k].map_or(Round::Unobserved, |r| r.0),
                    reading: rec.readings[k].map(|r| f64::from(r.1)),
                    score: None,
                    estimate: rec.estimates[k].map_or(f64::NAN, |e| e as f64),
                    value: rec.weights[k] as f64,
                    ambiguity: rec.ambiguity[k],
                });
            }
            neurons.push(NeuronReport {
                layer,
                neuron: n,
                bias_estimate: rec.bias_candidates.first().map_or(f64::NAN, |&b| b as f64),
                bias: rec.bias as f64,
                bias_ambiguity: rec.bias_candidates.len(),
                inconsistent: rec.inconsistent,
                note: rec.note.clone(),
            });
            w.extend(rec.weights.iter().map(|&v| v as i8));
            b.push(rec.bias as i16);
        }
        layers.push(Layer {
            out_dim: out,
            in_dim: width,
            params: LayerParams::Fixed {
                weights: w,
                bias: b,
            },
            activation: oracle.activation(layer),
        });
    }
    let model = NetworkModel {
        layers,
        input_width: dims[0],
        normalization: oracle.normalization(),
        zero_skipping: oracle.zero_skipping(),
        allow_zero_weights: true,
    };
    let input_scales = dims[..dims.len() - 1]
        .iter()
        .map(|&w| vec![1.0; w])
        .collect();
    Ok(RecoveredModel {
        model,
        weights,
        neurons,
        input_scales,
        queries: oracle.query_count() - start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{fixed_demo_neuron, random_model, RandomSpec};
    use crate::oracle::JitterConfig;

    #[test]
    fn lut_cells() {
        let lut = build_crossover_lut();
        assert_eq!(lut.get(108, 3), 36);
        assert_eq!(lut.get(92, 5), 19);
        assert_eq!(lut.get(1, 1), 1);
    }

    #[test]
    fn bias_columns() {
        let lut = build_crossover_lut();
        assert_eq!(
            recover_bias_fixed(&[108, 36, 18, 16, 14], &lut).unwrap(),
            vec![108]
        );
        let single = recover_bias_fixed(&[36], &lut).unwrap();
        assert_eq!(&single[..3], &[36, 71, 72]);
        assert_eq!(recover_bias_fixed(&[], &lut).unwrap().len(), 128);
        assert!(recover_bias_fixed(&[1, 128], &lut).is_err());
    }

    #[test]
    fn round1_rows() {
        let lut = build_crossover_lut();
        let w = recover_weights_fixed_round1(&[Some(14), Some(16), None], 108, &lut).unwrap();
        assert_eq!(w, vec![Some(vec![-8]), Some(vec![-7]), None]);
        // ceil(120/w) = 15 only for w = 8.
        let w = recover_weights_fixed_round1(&[Some(15)], 120, &lut).unwrap();
        assert_eq!(w, vec![Some(vec![-8])]);
        // Column 10 repeats 2 for w = 5..=8 (and -8 is the only negative 8).
        let w = recover_weights_fixed_round1(&[Some(2)], 10, &lut).unwrap();
        assert_eq!(w, vec![Some(vec![-5, -6, -7, -8])]);
        let w = recover_weights_fixed_round1(&[Some(2)], -10, &lut).unwrap();
        assert_eq!(w, vec![Some(vec![5, 6, 7])]);
    }

    #[test]
    fn fixed_demo_neuron_recovers() {
        let o = Oracle::new(
            fixed_demo_neuron(),
            CostProfile::atmega_like(),
            JitterConfig::none(),
        )
        .unwrap();
        let p = CostProfile::atmega_like();
        let prober = LayerProber::new(&o, &p, 0, None).unwrap();
        let cfg = FixedAttackConfig {
            ip_ref: Some(200),
            ..Default::default()
        };
        let r = attack_fixed_neuron(&prober, 0, &build_crossover_lut(), &cfg).unwrap();
        assert_eq!(r.weights, vec![-1, -3, 4, -7, -8, 2, -6, 5, 0]);
        assert_eq!(r.bias, 108);
        let readings: Vec<Option<u32>> = r.readings.iter().map(|r| r.map(|x| x.1)).collect();
        assert_eq!(
            readings,
            vec![
                Some(108),
                Some(36),
                Some(23),
                Some(16),
                Some(14),
                Some(46),
                Some(18),
                Some(19),
                None
            ]
        );
        let r2 = r.round2.unwrap();
        assert_eq!((r2.reference, r2.ip_ref, r2.shifted_bias), (0, 200, -92));
        assert!(r.ambiguity.iter().all(|&a| a == 1));
    }

    #[test]
    fn random_nets_exact() {
        for seed in 0..3 {
            let m = random_model(&RandomSpec::new(&[6, 4, 3], Precision::Fixed, seed)).unwrap();
            let o =
                Oracle::new(m.clone(), CostProfile::atmega_like(), JitterConfig::none()).unwrap();
            let r = recover_fixed_model(
                &o,
                &CostProfile::atmega_like(),
                &FixedAttackConfig::default(),
            )
            .unwrap();
            assert_eq!(r.model.layers, m.layers, "seed {seed}");
        }
    }
}

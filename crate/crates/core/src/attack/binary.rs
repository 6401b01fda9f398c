//! Binary-weight network recovery.
//!
//! A −1 weight costs an extra negate inside its MAC, so one trace with every
//! input nonzero reads all weights of a layer. The bias comes from walking
//! the pre-activation upward one unit at a time from its minimum: the first
//! query whose ReLU class is not negative sits exactly at zero.

use super::engine::{Branch, Engine, IntArith};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixed::{resolve_with_argmax, value_counts};
use super::{LayerProber, NeuronReport, RecoveredModel, Round, WeightReport};
use crate::arith::{CostProfile, SignClass};
use crate::error::{Error, Result};
use crate::network::{Activation, Layer, LayerParams, NetworkModel, Precision};
use crate::oracle::{Oracle, TimingTrace};

/// Dense probes offered to the argmax stage per layer.
const DENSE_PROBES: usize = 4096;

/// Bias hypotheses kept on each open side when the walk never crosses zero.
const OPEN_RANGE: i64 = 4096;

/// Weights of `neuron` from the MAC timings in `trace`.
pub fn weights_from_trace(
    prober: &LayerProber<'_>,
    trace: &TimingTrace,
    neuron: usize,
    profile: &CostProfile,
) -> Result<Vec<i8>> {
    let plain = f64::from(profile.bnn_mac);
    let negated = f64::from(profile.bnn_mac + profile.bnn_negate);
    let cycles = prober.mac_cycles(trace, neuron);
    if cycles.len() != prober.width {
        return Err(Error::Precondition(format!(
            "neuron {neuron}: expected {} MAC events, saw {}",
            prober.width,
            cycles.len()
        )));
    }
    Ok(cycles
        .iter()
        .map(|&c| {
            if (c - negated).abs() < (c - plain).abs() {
                -1
            } else {
                1
            }
        })
        .collect())
}

/// Where the bias walk ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BiasReading {
    /// Pre-activation exactly zero at this input.
    Exact { flip: Vec<u8>, bias: i64 },
    /// Non-negative at the minimum: `b >= bound`.
    AtLeast(i64),
    /// Negative at the maximum: `b <= bound`.
    AtMost(i64),
}

/// Inputs start at the pa-minimizing extreme (0 for +1, 255 for −1). The
/// −1 inputs are lowered first, then the +1 inputs raised, each in index
/// order, so every step raises the pre-activation by one.
pub fn recover_bias_binary(
    prober: &LayerProber<'_>,
    neuron: usize,
    weights: &[i8],
) -> Result<BiasReading> {
    let mut x: Vec<u8> = weights
        .iter()
        .map(|&w| if w < 0 { 255 } else { 0 })
        .collect();
    let dot = |x: &[u8]| -> i64 {
        x.iter()
            .zip(weights)
            .map(|(&v, &w)| i64::from(v) * i64::from(w))
            .sum()
    };
    let class = |x: &[u8]| -> Result<SignClass> {
        let t = prober.probe(&x.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())?;
        Ok(prober.class_of(&t, neuron)?.0)
    };
    match class(&x)? {
        SignClass::Zero => {
            return Ok(BiasReading::Exact {
                bias: -dot(&x),
                flip: x,
            })
        }
        SignClass::Positive => return Ok(BiasReading::AtLeast(-dot(&x))),
        SignClass::Negative => {}
    }
    let order: Vec<usize> = (0..weights.len())
        .filter(|&k| weights[k] < 0)
        .chain((0..weights.len()).filter(|&k| weights[k] > 0))
        .collect();
    for k in order {
        for _ in 0..255 {
            if weights[k] < 0 {
                x[k] -= 1;
            } else {
                x[k] += 1;
            }
            if class(&x)? != SignClass::Negative {
                return Ok(BiasReading::Exact {
                    bias: -dot(&x),
                    flip: x,
                });
            }
        }
    }
    Ok(BiasReading::AtMost(-dot(&x) - 1))
}

fn count(w: &[i8], v: i8) -> i64 {
    w.iter().filter(|&&x| x == v).count() as i64
}

/// Widest pre-activation range a neuron can reach under its reading.
fn pa_span(r: &BiasReading, w: &[i8]) -> (i64, i64) {
    let (pos, neg) = (255 * count(w, 1), 255 * count(w, -1));
    match *r {
        BiasReading::Exact { bias, .. } => (bias - neg, bias + pos),
        BiasReading::AtLeast(b) => (b - neg, b + OPEN_RANGE + pos),
        BiasReading::AtMost(b) => (b - OPEN_RANGE - neg, b + pos),
    }
}

/// Singles plus dense vectors mixing both extremes with free values, so the
/// gap to a competitor can be steered anywhere in its range.
fn dense_argmax_family(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, f64)>> {
    let mut family: Vec<Vec<(usize, f64)>> = vec![vec![]];
    for k in 0..n {
        family.extend((1..=255).map(|v| vec![(k, f64::from(v))]));
    }
    for _ in 0..DENSE_PROBES {
        let x = (0..n)
            .map(|k| {
                let v = match rng.gen_range(0..3) {
                    0 => 0,
                    1 => 255,
                    _ => rng.gen_range(0..=255),
                };
                (k, f64::from(v))
            })
            .collect();
        family.push(x);
    }
    family
}

pub fn recover_binary_model(
    oracle: &Oracle,
    profile: &CostProfile,
    seed: u64,
) -> Result<RecoveredModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if oracle.precision() != Precision::Binary {
        return Err(Error::Precondition(
            "binary attack needs a binary model".into(),
        ));
    }
    let start = oracle.query_count();
    let dims = oracle.dims();
    let mut layers = Vec::new();
    let mut weights = Vec::new();
    let mut neurons = Vec::new();
    for layer in 0..dims.len() - 1 {
        let (width, out) = (dims[layer], dims[layer + 1]);
        let prober = LayerProber::new(oracle, profile, layer, None)?;
        let trace = prober.probe(&vec![1.0; width])?;
        let mut readings = Vec::with_capacity(out);
        let mut wts = Vec::with_capacity(out);
        for n in 0..out {
            let w = weights_from_trace(&prober, &trace, n, profile)?;
            readings.push(recover_bias_binary(&prober, n, &w)?);
            wts.push(w);
        }
        let spans: Vec<(i64, i64)> = readings
            .iter()
            .zip(&wts)
            .map(|(r, w)| pa_span(r, w))
            .collect();
        let mut engines = Vec::with_capacity(out);
        let mut notes = Vec::with_capacity(out);
        for n in 0..out {
            let w = &wts[n];
            let others = spans
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != n)
                .map(|(_, s)| *s);
            let (pos, neg) = (255 * count(w, 1), 255 * count(w, -1));
            // Past these limits the neuron never meets a competitor, so
            // every further bias is observationally the same.
            let (biases, note) = match readings[n] {
                BiasReading::Exact { bias, .. } => (bias..=bias, None),
                BiasReading::AtLeast(b) => {
                    let top = others.map(|s| s.1).max().unwrap_or(b) + neg + 1;
                    (
                        b..=top.clamp(b, b + OPEN_RANGE),
                        Some(format!("bias only bounded below by {b}")),
                    )
                }
                BiasReading::AtMost(b) => {
                    let bottom = others.map(|s| s.0).min().unwrap_or(b) - pos - 1;
                    (
                        bottom.clamp(b - OPEN_RANGE, b)..=b,
                        Some(format!("bias only bounded above by {b}")),
                    )
                }
            };
            let candidates: Vec<Vec<i64>> = w.iter().map(|&v| vec![i64::from(v)]).collect();
            let branches = biases
                .map(|bias| Branch {
                    bias,
                    candidates: candidates.clone(),
                })
                .collect();
            engines.push(Engine::new(IntArith, branches));
            notes.push(note);
        }
        if oracle.activation(layer) == Activation::ArgmaxFinal && out > 1 {
            resolve_with_argmax(
                &prober,
                &mut engines,
                &dense_argmax_family(width, &mut rng),
                10 * 255 * width as u64,
            )?;
        }
        let mut w_all = Vec::with_capacity(out * width);
        let mut b_all = Vec::with_capacity(out);
        for (n, e) in engines.iter().enumerate() {
            let mut biases: Vec<i64> = e.branches.iter().map(|b| b.bias).collect();
            biases.sort_unstable();
            biases.dedup();
            // With an open side, the bound itself is the closest guess.
            let bias = match readings[n] {
                BiasReading::AtMost(_) => biases.last(),
                _ => biases.first(),
            }
            .copied()
            .unwrap_or(0);
            let counts = value_counts(e);
            for k in 0..width {
                weights.push(WeightReport {
                    layer,
                    neuron: n,
                    input: k,
                    round: Round::Timing,
                    reading: None,
                    score: None,
                    estimate: f64::from(wts[n][k]),
                    value: f64::from(wts[n][k]),
                    ambiguity: counts.get(k).copied().unwrap_or(0),
                });
            }
            neurons.push(NeuronReport {
                layer,
                neuron: n,
                bias_estimate: bias as f64,
                bias: bias as f64,
                bias_ambiguity: biases.len(),
                inconsistent: biases.is_empty(),
                note: if biases.len() == 1 {
                    None
                } else {
                    notes[n].clone()
                },
            });
            w_all.extend(&wts[n]);
            b_all.push(
                i32::try_from(bias)
                    .map_err(|_| Error::Inconsistent(format!("bias {bias} out of range")))?,
            );
        }
        layers.push(Layer {
            out_dim: out,
            in_dim: width,
            params: LayerParams::Binary {
                weights: w_all,
                bias: b_all,
            },
            activation: oracle.activation(layer),
        });
    }
    let model = NetworkModel {
        layers,
        input_width: dims[0],
        normalization: oracle.normalization(),
        zero_skipping: oracle.zero_skipping(),
        allow_zero_weights: false,
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

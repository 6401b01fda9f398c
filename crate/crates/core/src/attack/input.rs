//! Input recovery from a single inference trace.
//!
//! Three channels: the float path (mantissa from the first-layer multiplies,
//! exponent from the int-to-float loop), the bit pattern of the `/255`
//! normalization, and the skip events of a zero-skipping layer.

use std::fmt::Write as _;

use crate::arith::{leaky_float_mul, CostProfile, FloatRepr, Mantissa7};
use crate::error::{Error, Result};
use crate::oracle::{OpKind, TimingTrace};

/// What was learned about one input position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputValue {
    Exact(u8),
    /// Every value consistent with the trace, ascending.
    Candidates(Vec<u8>),
    /// Sparsity path: only zero versus nonzero is known.
    IsZero(bool),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMethod {
    Float,
    Div255,
    Sparsity,
}

impl InputMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMethod::Float => "float",
            InputMethod::Div255 => "div255",
            InputMethod::Sparsity => "sparsity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputEstimate {
    pub method: InputMethod,
    pub values: Vec<InputValue>,
    /// Float path: mantissa rows that share their restricted timing vector
    /// with another row, summed over positions.
    pub collisions: usize,
}

impl InputEstimate {
    pub fn exact(&self) -> Option<Vec<u8>> {
        self.values
            .iter()
            .map(|v| match v {
                InputValue::Exact(x) => Some(*x),
                _ => None,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("position,value,method\n");
        for (i, v) in self.values.iter().enumerate() {
            let text = match v {
                InputValue::Exact(x) => x.to_string(),
                InputValue::Candidates(c) => format!(
                    "{{{}}}",
                    c.iter().map(u8::to_string).collect::<Vec<_>>().join("|")
                ),
                InputValue::IsZero(true) => "zero".into(),
                InputValue::IsZero(false) => "nonzero".into(),
            };
            let _ = writeln!(s, "{i},{text},{}", self.method.as_str());
        }
        s
    }

    /// Binary PGM of the exact values, `width` per row. Unknown pixels are
    /// drawn as the midpoint of their candidates; sparsity flags as 0/255.
    pub fn to_pgm(&self, width: usize) -> Result<Vec<u8>> {
        if width == 0 || !self.values.len().is_multiple_of(width) {
            return Err(Error::Input(format!(
                "{} values do not tile rows of {width}",
                self.values.len()
            )));
        }
        let mut out = format!("P5\n{width} {}\n255\n", self.values.len() / width).into_bytes();
        out.extend(self.values.iter().map(|v| match v {
            InputValue::Exact(x) => *x,
            InputValue::Candidates(c) if !c.is_empty() => {
                ((u16::from(c[0]) + u16::from(c[c.len() - 1])) / 2) as u8
            }
            InputValue::Candidates(_) => 0,
            InputValue::IsZero(z) => {
                if *z {
                    0
                } else {
                    255
                }
            }
        }));
        Ok(out)
    }
}

/// Multiply cost for every input mantissa (rows) against every weight
/// mantissa (columns). Exponents and signs do not change the cost.
pub fn input_mantissa_table(profile: &CostProfile) -> Vec<Vec<u32>> {
    (0..128u32)
        .map(|mi| {
            let x = FloatRepr::from_parts(false, 0, mi);
            (0..128u32)
                .map(|mw| leaky_float_mul(x, FloatRepr::from_parts(false, 0, mw), profile).1)
                .collect()
        })
        .collect()
}

/// Rows that share their restricted timing vector with some other row.
pub fn restricted_collisions(table: &[Vec<u32>], columns: &[Mantissa7]) -> usize {
    let key = |r: &Vec<u32>| columns.iter().map(|m| r[m.0 as usize]).collect::<Vec<_>>();
    let keys: Vec<Vec<u32>> = table.iter().map(key).collect();
    (0..keys.len())
        .filter(|&i| {
            keys.iter()
                .enumerate()
                .any(|(j, k)| j != i && *k == keys[i])
        })
        .count()
}

/// Integers `1.m × 2^e` for the allowed exponents.
fn integral_values(m: Mantissa7, exponents: impl IntoIterator<Item = i32>) -> Vec<u8> {
    let sig = m.significand();
    exponents
        .into_iter()
        .filter(|&e| (0..=7).contains(&e))
        .filter_map(|e| {
            let drop = (7 - e) as u32;
            (sig & ((1 << drop) - 1) == 0).then(|| (sig >> drop) as u8)
        })
        .collect()
}

/// Decoded int-to-float event: `None` when the cost does not depend on the
/// exponent.
fn exponent_class(cycles: f64, p: &CostProfile) -> Option<Option<i32>> {
    if p.int2float_constant_time || p.int2float_iter == 0 {
        return None;
    }
    let mut centres: Vec<(f64, Option<i32>)> = vec![(f64::from(p.int2float_zero), None)];
    centres.extend((0..=7u32).map(|it| {
        (
            f64::from(p.int2float_base + p.int2float_iter * it),
            Some(7 - it as i32),
        )
    }));
    let distinct = centres
        .iter()
        .all(|a| centres.iter().filter(|b| b.0 == a.0).count() == 1);
    if !distinct {
        return None;
    }
    centres
        .into_iter()
        .min_by(|a, b| (a.0 - cycles).abs().total_cmp(&(b.0 - cycles).abs()))
        .map(|c| c.1)
}

/// Float-path recovery. `weight_mantissas[n][k]` is the mantissa of the
/// weight from input `k` into first-layer neuron `n` (`None` for zero or
/// unknown weights, whose multiplies carry no mantissa information).
pub fn recover_input_float(
    trace: &TimingTrace,
    weight_mantissas: &[Vec<Option<Mantissa7>>],
    profile: &CostProfile,
) -> Result<InputEstimate> {
    let width = weight_mantissas.first().map_or(0, Vec::len);
    let table = input_mantissa_table(profile);
    let mut values = Vec::with_capacity(width);
    let mut collisions = 0;
    for k in 0..width {
        let conv = trace
            .input_events(OpKind::Int2Float, k)
            .next()
            .ok_or_else(|| Error::Precondition(format!("no int2float event for input {k}")))?;
        let exponent = exponent_class(conv.cycles, profile);
        if exponent == Some(None) {
            values.push(InputValue::Exact(0));
            continue;
        }
        let mut cols = Vec::new();
        let mut observed = Vec::new();
        for (n, row) in weight_mantissas.iter().enumerate() {
            let Some(m) = row[k] else { continue };
            let slots = trace.mac_slots(0, n);
            let ev = slots.get(k).ok_or_else(|| {
                Error::Precondition(format!("neuron {n} has no multiply for input {k}"))
            })?;
            cols.push(m);
            observed.push(ev.cycles);
        }
        if cols.is_empty() {
            return Err(Error::Precondition(format!(
                "input {k}: no known nonzero weight mantissa"
            )));
        }
        // With a flat conversion, a zero input still shows in the multiply.
        let zero_cost = f64::from(profile.float_mul_zero);
        let base = f64::from(profile.float_mul_base);
        if exponent.is_none()
            && observed
                .iter()
                .all(|&c| (c - zero_cost).abs() < (c - base).abs())
        {
            values.push(InputValue::Exact(0));
            continue;
        }
        let rows: Vec<Vec<f64>> = table
            .iter()
            .map(|r| cols.iter().map(|m| f64::from(r[m.0 as usize])).collect())
            .collect();
        let fits = best_rows(&rows, &observed);
        collisions += restricted_collisions(&table, &cols);
        let mut cands: Vec<u8> = match exponent {
            Some(Some(e)) => fits
                .iter()
                .flat_map(|&m| integral_values(Mantissa7::new(m as u8), [e]))
                .collect(),
            _ => fits
                .iter()
                .flat_map(|&m| integral_values(Mantissa7::new(m as u8), 0..=7))
                .collect(),
        };
        cands.sort_unstable();
        cands.dedup();
        values.push(match cands.as_slice() {
            [] => {
                return Err(Error::Inconsistent(format!(
                    "input {k}: mantissa and exponent give no integer"
                )))
            }
            [v] => InputValue::Exact(*v),
            _ => InputValue::Candidates(cands),
        });
    }
    Ok(InputEstimate {
        method: InputMethod::Float,
        values,
        collisions,
    })
}

/// Rows with the highest Pearson correlation, narrowed by squared error;
/// every row identical to the winner on these columns stays in.
fn best_rows(rows: &[Vec<f64>], observed: &[f64]) -> Vec<usize> {
    let sse = |r: &Vec<f64>| {
        r.iter()
            .zip(observed)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    let scores: Vec<Option<f64>> = rows.iter().map(|r| super::pearson(r, observed)).collect();
    let top = scores
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let pool: Vec<usize> = if top.is_finite() {
        (0..rows.len())
            .filter(|&i| scores[i].is_some_and(|s| top - s < 1e-12))
            .collect()
    } else {
        (0..rows.len()).collect()
    };
    let best = *pool
        .iter()
        .min_by(|&&a, &&b| sse(&rows[a]).total_cmp(&sse(&rows[b])))
        .expect("table has rows");
    (0..rows.len()).filter(|&i| rows[i] == rows[best]).collect()
}

/// `floor(ip · 2^15 / 255)`, the Q0.15 result of the normalization.
pub fn div255_raw(ip: u8) -> u16 {
    ((u32::from(ip) << 15) / 255) as u16
}

/// The input whose normalization yields `raw`, if any.
pub fn div255_preimage(raw: u16) -> Option<u8> {
    let guess = ((u32::from(raw) * 255) >> 15) as u8;
    [guess, guess.saturating_add(1)]
        .into_iter()
        .find(|&ip| div255_raw(ip) == raw)
}

/// Two-means split of durations. `None` when only one value occurs.
fn two_means(d: &[f64]) -> Option<(f64, f64)> {
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    if hi - lo < 1e-9 {
        return None;
    }
    let (mut c0, mut c1) = (lo, hi);
    for _ in 0..64 {
        let t = (c0 + c1) / 2.0;
        let (s, l): (Vec<f64>, Vec<f64>) = d.iter().partition(|&&x| x < t);
        let n0 = s.iter().sum::<f64>() / s.len() as f64;
        let n1 = l.iter().sum::<f64>() / l.len() as f64;
        if n0 == c0 && n1 == c1 {
            break;
        }
        (c0, c1) = (n0, n1);
    }
    Some((c0, c1))
}

/// Normalization-path recovery from one or more traces of the same input.
/// Each bit is classified per trace against a two-means threshold learned
/// from all division steps, then decided by majority. A tied or unclear bit
/// keeps both values, so the position becomes a candidate set.
///
/// The trace alone cannot tell a flat divider from an all-zero input, so a
/// profile whose divider has one cost class yields every value as a candidate.
pub fn recover_input_div255(
    traces: &[TimingTrace],
    profile: &CostProfile,
) -> Result<InputEstimate> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Input("no traces".into()))?;
    let width = first
        .events
        .iter()
        .filter(|e| e.kind == OpKind::DivBit)
        .map(|e| e.neuron + 1)
        .max()
        .unwrap_or(0);
    if width == 0 {
        return Err(Error::Precondition("trace has no div_bit events".into()));
    }
    if profile.div_constant_time || profile.div_short == profile.div_long {
        let all: Vec<u8> = (0..=255).collect();
        return Ok(InputEstimate {
            method: InputMethod::Div255,
            values: vec![InputValue::Candidates(all); width],
            collisions: 0,
        });
    }
    let all: Vec<f64> = traces
        .iter()
        .flat_map(|t| {
            t.events
                .iter()
                .filter(|e| e.kind == OpKind::DivBit)
                .map(|e| e.cycles)
        })
        .collect();
    // A single duration class can only be "all short": no input sets every bit.
    let centres = two_means(&all);
    let mut values = Vec::with_capacity(width);
    for k in 0..width {
        let mut votes = [[0u32; 2]; 16];
        for t in traces {
            let bits: Vec<f64> = t
                .input_events(OpKind::DivBit, k)
                .map(|e| e.cycles)
                .collect();
            if bits.len() != 16 {
                return Err(Error::Precondition(format!(
                    "input {k}: expected 16 div_bit events, saw {}",
                    bits.len()
                )));
            }
            for (i, &d) in bits.iter().enumerate() {
                match centres {
                    None => votes[i][0] += 1,
                    Some((s, l)) => {
                        let gap = l - s;
                        // Far from both classes: no vote.
                        if (d - s).abs() <= gap * 0.75 || (d - l).abs() <= gap * 0.75 {
                            votes[i][usize::from((d - s).abs() > (d - l).abs())] += 1;
                        }
                    }
                }
            }
        }
        let mut raws: Vec<u16> = vec![0];
        for i in 0..16 {
            let [zero, one] = votes[i];
            let options: &[u16] = if zero > one {
                &[0]
            } else if one > zero {
                &[1]
            } else {
                &[0, 1]
            };
            raws = raws
                .iter()
                .flat_map(|&r| options.iter().map(move |&b| (r << 1) | b))
                .collect();
        }
        let mut cands: Vec<u8> = raws.into_iter().filter_map(div255_preimage).collect();
        cands.sort_unstable();
        cands.dedup();
        values.push(match cands.as_slice() {
            [] => {
                return Err(Error::Inconsistent(format!(
                    "input {k}: bit pattern is not a normalization result"
                )))
            }
            [v] => InputValue::Exact(*v),
            _ => InputValue::Candidates(cands),
        });
    }
    Ok(InputEstimate {
        method: InputMethod::Div255,
        values,
        collisions: 0,
    })
}

/// Zero/nonzero flag per input from the first layer's skip events, by
/// majority over the layer's neurons.
pub fn recover_sparsity_mask(trace: &TimingTrace) -> Result<InputEstimate> {
    let neurons = trace
        .events
        .iter()
        .filter(|e| e.layer == 0 && e.kind.is_activation())
        .map(|e| e.neuron + 1)
        .max()
        .unwrap_or(0);
    if neurons == 0 {
        return Err(Error::Precondition(
            "trace has no first-layer neurons".into(),
        ));
    }
    let width = trace.mac_slots(0, 0).len();
    let mut skips = vec![0usize; width];
    for n in 0..neurons {
        let slots = trace.mac_slots(0, n);
        if slots.len() != width {
            return Err(Error::Precondition(format!(
                "neuron {n}: {} MAC slots, expected {width}",
                slots.len()
            )));
        }
        for (k, e) in slots.iter().enumerate() {
            skips[k] += usize::from(e.kind == OpKind::Skip);
        }
    }
    let values = skips
        .into_iter()
        .map(|s| InputValue::IsZero(2 * s > neurons))
        .collect();
    Ok(InputEstimate {
        method: InputMethod::Sparsity,
        values,
        collisions: 0,
    })
}

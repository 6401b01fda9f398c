//! Table summaries and figure-analog plot data.
//!
//! Every plot file is a CSV whose first line is the header listed in its
//! `schema`. Rendering is left to external tools.

use std::fmt::Write as _;

use crate::arith::{self, exponent_of, CostProfile, FloatRepr, SignClass};
use crate::attack::fixed::{build_crossover_lut, BIAS_ROWS, WEIGHT_COLS};
use crate::attack::input::input_mantissa_table;
use crate::attack::RecoveredModel;
use crate::network::{LayerParams, NetworkModel};

/// One CSV of plot data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlotData {
    /// File stem, e.g. `mantissa_lut`.
    pub name: &'static str,
    pub schema: &'static str,
    pub description: &'static str,
    pub csv: String,
}

fn plot(
    name: &'static str,
    schema: &'static str,
    description: &'static str,
    rows: impl IntoIterator<Item = String>,
) -> PlotData {
    let mut csv = format!("{schema}\n");
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    PlotData {
        name,
        schema,
        description,
        csv,
    }
}

/// Multiply cycles for every pair of 7-bit input and weight mantissas.
pub fn mantissa_lut(p: &CostProfile) -> PlotData {
    let t = input_mantissa_table(p);
    let rows = (0..128).flat_map(|mi| {
        let row = &t[mi];
        (0..128).map(move |mw| format!("{mi},{mw},{}", row[mw]))
    });
    plot(
        "mantissa_lut",
        "m_ip,m_wt,cycles",
        "float multiply cycles by input and weight mantissa",
        rows.collect::<Vec<_>>(),
    )
}

/// Float ReLU cycles over pre-activations -8..8 in steps of 1/16.
pub fn float_relu(p: &CostProfile) -> PlotData {
    let rows = (-128..=128).map(|i| {
        let pa = f64::from(i) / 16.0;
        let (_, c) = arith::leaky_float_relu(FloatRepr::from_f64(pa).expect("exact"), p);
        format!("{pa},{c}")
    });
    plot(
        "float_relu",
        "pa,cycles",
        "float ReLU cycles against the pre-activation",
        rows,
    )
}

/// Zero-crossover table `ceil(b / wt)` for positive magnitudes.
pub fn crossover_lut() -> PlotData {
    let lut = build_crossover_lut();
    let rows = (1..=BIAS_ROWS)
        .flat_map(|b| (1..=WEIGHT_COLS).map(move |w| (b, w)))
        .map(|(b, w)| format!("{b},{w},{}", lut.get(b, w)));
    plot(
        "crossover_lut",
        "bias,weight,crossover",
        "zero-crossover input for |b| and |wt| of opposite sign",
        rows.collect::<Vec<_>>(),
    )
}

pub fn fixed_relu(p: &CostProfile) -> PlotData {
    let rows = (-128..=127i64).map(|pa| format!("{pa},{}", arith::fixed_relu(pa, p).1));
    plot(
        "fixed_relu",
        "pa,cycles",
        "fixed-point ReLU cycles against the pre-activation",
        rows,
    )
}

/// Conversion cycles per input value; `exponent` is empty for zero.
pub fn int2float(p: &CostProfile) -> PlotData {
    let rows = (0..=255u8).map(|ip| {
        let (v, c) = arith::leaky_int2float(ip, p);
        let e = if ip == 0 {
            String::new()
        } else {
            v.exponent().to_string()
        };
        format!("{ip},{e},{c}")
    });
    plot(
        "int2float",
        "ip,exponent,cycles",
        "integer-to-float conversion cycles per input",
        rows,
    )
}

/// Per-bit durations of the `/255` normalization; bit 0 is the integer bit.
pub fn div255(p: &CostProfile) -> PlotData {
    let rows = (0..=255u8).flat_map(|ip| {
        let (q, d) = arith::leaky_normalize_div255(ip, p);
        (0..16).map(move |i| format!("{ip},{i},{},{}", (q >> (15 - i)) & 1, d[i]))
    });
    plot(
        "div255",
        "ip,bit,quotient_bit,cycles",
        "restoring-division step durations for ip/255",
        rows.collect::<Vec<_>>(),
    )
}

/// Argmax compare cycles for every sign and update outcome.
pub fn argmax_compare(p: &CostProfile) -> PlotData {
    let rows = [SignClass::Negative, SignClass::Zero, SignClass::Positive]
        .into_iter()
        .flat_map(|s| [false, true].map(|b| (s, b)))
        .map(|(s, b)| {
            format!(
                "{},{},{}",
                s.signum(),
                u8::from(b),
                arith::argmax_step(s, b, p)
            )
        });
    plot(
        "argmax_compare",
        "sign,update,cycles",
        "final-layer compare cycles by candidate sign and update",
        rows,
    )
}

pub fn all_plots(p: &CostProfile) -> Vec<PlotData> {
    vec![
        mantissa_lut(p),
        float_relu(p),
        crossover_lut(),
        fixed_relu(p),
        int2float(p),
        div255(p),
        argmax_compare(p),
    ]
}

/// `m×2^e` with four mantissa decimals, or `0`.
pub fn pow2_notation(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let e = exponent_of(x.abs());
    format!("{:.4}x2^{e}", x / 2f64.powi(e))
}

/// Per-parameter table of one single-neuron float recovery: true value,
/// recovered mantissa, crossover reading, closed-form estimate and the value
/// after refinement against the device arithmetic.
pub fn float_neuron_table(truth: &NetworkModel, rec: &RecoveredModel) -> String {
    let t = &truth.layers[0];
    let r = &rec.model.layers[0];
    let line = |s: &mut String, cells: [&str; 6]| {
        let _ = writeln!(
            s,
            "{:<6} {:>14} {:>9} {:>8} {:>14} {:>14}",
            cells[0], cells[1], cells[2], cells[3], cells[4], cells[5]
        );
    };
    let mut s = String::new();
    line(
        &mut s,
        [
            "param", "actual", "mantissa", "reading", "estimate", "refined",
        ],
    );
    for w in rec.weights.iter().filter(|w| w.layer == 0 && w.neuron == 0) {
        let rv = r.float_weight(0, w.input);
        let m = if rv.is_zero() {
            "-".to_string()
        } else {
            format!("{:.4}", rv.mantissa7().value())
        };
        let reading = w.reading.map_or("-".into(), |x| x.to_string());
        let name = format!("wt{}", w.input);
        let actual = pow2_notation(t.float_weight(0, w.input).to_f64());
        line(
            &mut s,
            [
                &name,
                &actual,
                &m,
                &reading,
                &pow2_notation(w.estimate),
                &pow2_notation(rv.to_f64()),
            ],
        );
    }
    if let (LayerParams::Float { bias: tb, .. }, Some(n)) = (
        &t.params,
        rec.neurons.iter().find(|n| n.layer == 0 && n.neuron == 0),
    ) {
        line(
            &mut s,
            [
                "b",
                &pow2_notation(tb[0].to_f64()),
                "-",
                "-",
                &pow2_notation(n.bias_estimate),
                &pow2_notation(n.bias),
            ],
        );
    }
    s
}

/// Per-parameter table of one single-neuron integer recovery.
pub fn int_neuron_table(truth: &NetworkModel, rec: &RecoveredModel) -> String {
    let t = &truth.layers[0];
    let r = &rec.model.layers[0];
    let mut s = format!(
        "{:<6} {:>7} {:>8} {:>10} {:>10}\n",
        "param", "actual", "reading", "round", "recovered"
    );
    for w in rec.weights.iter().filter(|w| w.layer == 0 && w.neuron == 0) {
        let reading = w.reading.map_or("-".into(), |x| x.to_string());
        let _ = writeln!(
            s,
            "{:<6} {:>7} {:>8} {:>10} {:>10}",
            format!("wt{}", w.input),
            t.int_weight(0, w.input),
            reading,
            w.round.as_str(),
            r.int_weight(0, w.input)
        );
    }
    let _ = writeln!(
        s,
        "{:<6} {:>7} {:>8} {:>10} {:>10}",
        "b",
        t.int_bias(0),
        "-",
        "-",
        r.int_bias(0)
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_headers_match_schema() {
        let p = CostProfile::atmega_like();
        for d in all_plots(&p) {
            assert_eq!(d.csv.lines().next(), Some(d.schema), "{}", d.name);
            let cols = d.schema.split(',').count();
            assert!(
                d.csv.lines().skip(1).all(|l| l.split(',').count() == cols),
                "{}",
                d.name
            );
        }
        assert_eq!(mantissa_lut(&p).csv.lines().count(), 1 + 128 * 128);
        assert_eq!(div255(&p).csv.lines().count(), 1 + 256 * 16);
    }

    #[test]
    fn crossover_rows() {
        let d = crossover_lut();
        assert!(d.csv.contains("\n108,3,36\n"));
        assert!(d.csv.contains("\n1,8,1\n"));
    }

    #[test]
    fn div255_bits() {
        // 255/255 = 1.0: only the integer bit is set.
        let d = div255(&CostProfile::atmega_like());
        let p = CostProfile::atmega_like();
        assert!(d.csv.contains(&format!("\n255,0,1,{}\n", p.div_long)));
        assert!(d.csv.contains(&format!("\n255,1,0,{}\n", p.div_short)));
    }

    #[test]
    fn notation() {
        assert_eq!(pow2_notation(-1.5911 * 128.0), "-1.5911x2^7");
        assert_eq!(pow2_notation(0.25), "1.0000x2^-2");
        assert_eq!(pow2_notation(0.0), "0");
    }
}

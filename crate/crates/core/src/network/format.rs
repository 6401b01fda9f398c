//! Line-oriented model files.
//!
//! ```text
//! net <float|fixed|binary> <layers> [norm=div255] [zero-skip] [allow-zero]
//! layer <out> <in> <relu|argmax|none>
//! <in tokens>            # one row per output neuron
//! bias <out tokens>
//! ```
//!
//! Float tokens are f32 bit patterns in hex (`0x3f800000`); fixed and binary
//! tokens are decimal integers. `#` starts a comment; blank lines are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Activation, Layer, LayerParams, NetworkModel, Normalization, Precision};
use crate::arith::FloatRepr;
use crate::error::{Error, Result};

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_model(&text)
}

pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    fs::write(path, write_model(model)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_model(model: &NetworkModel) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "net {} {}",
        model.precision().as_str(),
        model.layers.len()
    );
    if model.normalization == Normalization::Div255 {
        s.push_str(" norm=div255");
    }
    if model.zero_skipping {
        s.push_str(" zero-skip");
    }
    if model.allow_zero_weights {
        s.push_str(" allow-zero");
    }
    s.push('\n');
    for l in &model.layers {
        let _ = writeln!(
            s,
            "layer {} {} {}",
            l.out_dim,
            l.in_dim,
            l.activation.as_str()
        );
        let row = |out: &mut String, toks: Vec<String>| {
            out.push_str(&toks.join(" "));
            out.push('\n');
        };
        for n in 0..l.out_dim {
            let toks = (0..l.in_dim)
                .map(|k| match &l.params {
                    LayerParams::Float { weights, .. } => {
                        format!("{:#010x}", weights[n * l.in_dim + k].to_bits())
                    }
                    _ => l.int_weight(n, k).to_string(),
                })
                .collect();
            row(&mut s, toks);
        }
        let bias: Vec<String> = match &l.params {
            LayerParams::Float { bias, .. } => bias
                .iter()
                .map(|b| format!("{:#010x}", b.to_bits()))
                .collect(),
            LayerParams::Fixed { bias, .. } => bias.iter().map(|b| b.to_string()).collect(),
            LayerParams::Binary { bias, .. } => bias.iter().map(|b| b.to_string()).collect(),
        };
        s.push_str("bias ");
        row(&mut s, bias);
    }
    s
}

struct Lines<'a> {
    inner: Vec<(usize, Vec<&'a str>)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, Vec<&'a str>)> {
        let last_line = self.inner.last().map_or(1, |l| l.0);
        let item = self.inner.get(self.pos).cloned().ok_or(Error::Parse {
            line: last_line,
            msg: "unexpected end of file".into(),
        })?;
        self.pos += 1;
        Ok(item)
    }
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| perr(line, format!("bad {what} '{tok}'")))
}

pub fn parse_model(text: &str) -> Result<NetworkModel> {
    let inner = text
        .lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let body = raw.split('#').next().unwrap_or("");
            let toks: Vec<&str> = body.split_whitespace().collect();
            (!toks.is_empty()).then_some((i + 1, toks))
        })
        .collect();
    let mut lines = Lines { inner, pos: 0 };

    let (ln, head) = lines.next()?;
    if head.len() < 3 || head[0] != "net" {
        return Err(perr(ln, "expected 'net <precision> <layers>'"));
    }
    let precision = Precision::parse(head[1])
        .ok_or_else(|| perr(ln, format!("unknown precision '{}'", head[1])))?;
    let count: usize = num(ln, head[2], "layer count")?;
    let mut normalization = Normalization::None;
    let mut zero_skipping = false;
    let mut allow_zero_weights = false;
    for opt in &head[3..] {
        match *opt {
            "norm=div255" => normalization = Normalization::Div255,
            "norm=none" => {}
            "zero-skip" => zero_skipping = true,
            "allow-zero" => allow_zero_weights = true,
            other => return Err(perr(ln, format!("unknown option '{other}'"))),
        }
    }
    if count == 0 {
        return Err(Error::Structure("model has no layers".into()));
    }

    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, h) = lines.next()?;
        if h.len() != 4 || h[0] != "layer" {
            return Err(perr(ln, "expected 'layer <out> <in> <activation>'"));
        }
        let out_dim: usize = num(ln, h[1], "output width")?;
        let in_dim: usize = num(ln, h[2], "input width")?;
        let activation = Activation::parse(h[3])
            .ok_or_else(|| perr(ln, format!("unknown activation '{}'", h[3])))?;
        let mut rows: Vec<(usize, Vec<&str>)> = Vec::with_capacity(out_dim);
        for _ in 0..out_dim {
            let (ln, r) = lines.next()?;
            if r.len() != in_dim {
                return Err(perr(
                    ln,
                    format!("expected {in_dim} weights, found {}", r.len()),
                ));
            }
            rows.push((ln, r));
        }
        let (bln, b) = lines.next()?;
        if b.first() != Some(&"bias") || b.len() != out_dim + 1 {
            return Err(perr(
                bln,
                format!("expected 'bias' followed by {out_dim} values"),
            ));
        }
        let flat = rows
            .iter()
            .flat_map(|(ln, r)| r.iter().map(move |t| (*ln, *t)));
        let params = match precision {
            Precision::Float => {
                let hex = |ln: usize, t: &str| -> Result<FloatRepr> {
                    let digits = t
                        .strip_prefix("0x")
                        .ok_or_else(|| perr(ln, format!("expected hex bits, got '{t}'")))?;
                    let bits = u32::from_str_radix(digits, 16)
                        .map_err(|_| perr(ln, format!("bad hex '{t}'")))?;
                    FloatRepr::from_bits(bits).map_err(|e| perr(ln, e.to_string()))
                };
                let weights = flat.map(|(ln, t)| hex(ln, t)).collect::<Result<_>>()?;
                let bias = b[1..].iter().map(|t| hex(bln, t)).collect::<Result<_>>()?;
                LayerParams::Float { weights, bias }
            }
            Precision::Fixed => LayerParams::Fixed {
                weights: flat
                    .map(|(ln, t)| num(ln, t, "weight"))
                    .collect::<Result<_>>()?,
                bias: b[1..]
                    .iter()
                    .map(|t| num(bln, t, "bias"))
                    .collect::<Result<_>>()?,
            },
            Precision::Binary => LayerParams::Binary {
                weights: flat
                    .map(|(ln, t)| num(ln, t, "weight"))
                    .collect::<Result<_>>()?,
                bias: b[1..]
                    .iter()
                    .map(|t| num(bln, t, "bias"))
                    .collect::<Result<_>>()?,
            },
        };
        layers.push(Layer {
            out_dim,
            in_dim,
            params,
            activation,
        });
    }
    if lines.pos < lines.inner.len() {
        return Err(perr(
            lines.inner[lines.pos].0,
            "trailing content after last layer",
        ));
    }
    let model = NetworkModel {
        input_width: layers[0].in_dim,
        layers,
        normalization,
        zero_skipping,
        allow_zero_weights,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        binary_demo_neuron, fixed_demo_neuron, float_demo_neuron, random_model, RandomSpec,
    };

    #[test]
    fn roundtrips() {
        for m in [
            float_demo_neuron(),
            fixed_demo_neuron(),
            binary_demo_neuron(),
        ] {
            assert_eq!(parse_model(&write_model(&m)).unwrap(), m);
        }
        for p in [Precision::Float, Precision::Fixed, Precision::Binary] {
            let m = random_model(&RandomSpec::new(&[5, 4, 3], p, 11)).unwrap();
            assert_eq!(parse_model(&write_model(&m)).unwrap(), m);
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_model("net fixed 1\nlayer 1 2 relu\n1 x\nbias 0\n").unwrap_err();
        assert_eq!(
            err,
            Error::Parse {
                line: 3,
                msg: "bad weight 'x'".into()
            }
        );
        assert!(matches!(
            parse_model("net fixed 0\n"),
            Err(Error::Structure(_))
        ));
        assert!(matches!(
            parse_model(
                "net fixed 2\nlayer 1 2 relu\n1 1\nbias 0\nlayer 1 3 argmax\n1 1 1\nbias 0\n"
            ),
            Err(Error::Structure(_))
        ));
        assert!(matches!(
            parse_model("net float 1\nlayer 1 1 relu\n0x7f800000\nbias 0x0\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}

//! Layered network container, seeded construction and a straight reference
//! evaluator that shares no code with the leaky kernels.

mod format;

pub use format::{load_model, parse_model, save_model, write_model};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arith::{round7, trunc7, FloatRepr};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Float,
    Fixed,
    Binary,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Float => "float",
            Precision::Fixed => "fixed",
            Precision::Binary => "binary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(Precision::Float),
            "fixed" => Some(Precision::Fixed),
            "binary" => Some(Precision::Binary),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    ArgmaxFinal,
    None,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::ArgmaxFinal => "argmax",
            Activation::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "argmax" | "argmax-final" => Some(Activation::ArgmaxFinal),
            "none" => Some(Activation::None),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Normalization {
    None,
    Div255,
}

/// Layer parameters, row-major `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Float {
        weights: Vec<FloatRepr>,
        bias: Vec<FloatRepr>,
    },
    /// 4-bit signed weights and 8-bit signed biases.
    Fixed { weights: Vec<i8>, bias: Vec<i16> },
    /// ±1 weights and integer biases.
    Binary { weights: Vec<i8>, bias: Vec<i32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub out_dim: usize,
    pub in_dim: usize,
    pub params: LayerParams,
    pub activation: Activation,
}

impl Layer {
    pub fn precision(&self) -> Precision {
        match self.params {
            LayerParams::Float { .. } => Precision::Float,
            LayerParams::Fixed { .. } => Precision::Fixed,
            LayerParams::Binary { .. } => Precision::Binary,
        }
    }

    pub fn float_weight(&self, n: usize, k: usize) -> FloatRepr {
        match &self.params {
            LayerParams::Float { weights, .. } => weights[n * self.in_dim + k],
            _ => panic!("float_weight on a {} layer", self.precision().as_str()),
        }
    }

    pub fn int_weight(&self, n: usize, k: usize) -> i8 {
        match &self.params {
            LayerParams::Fixed { weights, .. } | LayerParams::Binary { weights, .. } => {
                weights[n * self.in_dim + k]
            }
            _ => panic!("int_weight on a float layer"),
        }
    }

    pub fn int_bias(&self, n: usize) -> i64 {
        match &self.params {
            LayerParams::Fixed { bias, .. } => i64::from(bias[n]),
            LayerParams::Binary { bias, .. } => i64::from(bias[n]),
            _ => panic!("int_bias on a float layer"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    pub layers: Vec<Layer>,
    pub input_width: usize,
    pub normalization: Normalization,
    pub zero_skipping: bool,
    /// Fixed-point layers may hold zero weights only when this is set.
    pub allow_zero_weights: bool,
}

/// Layer-by-layer values from a reference run.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Pre-activations per layer.
    pub pre: Vec<Vec<f64>>,
    /// Layer outputs; the last entry equals the final pre-activations.
    pub outputs: Vec<Vec<f64>>,
    pub argmax: usize,
}

impl NetworkModel {
    pub fn precision(&self) -> Precision {
        self.layers[0].precision()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_width];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Structure("model has no layers".into()));
        }
        let precision = self.precision();
        let mut width = self.input_width;
        for (i, l) in self.layers.iter().enumerate() {
            if l.precision() != precision {
                return Err(Error::Structure(format!(
                    "layer {i}: mixed precisions are not supported"
                )));
            }
            if l.in_dim != width {
                return Err(Error::Structure(format!(
                    "layer {i}: expects {} inputs, previous width is {width}",
                    l.in_dim
                )));
            }
            let (nw, nb) = match &l.params {
                LayerParams::Float { weights, bias } => (weights.len(), bias.len()),
                LayerParams::Fixed { weights, bias } => {
                    if let Some(w) = weights.iter().find(|w| !(-8..=7).contains(*w)) {
                        return Err(Error::Structure(format!(
                            "layer {i}: fixed weight {w} outside [-8, 7]"
                        )));
                    }
                    if !self.allow_zero_weights && weights.contains(&0) {
                        return Err(Error::Structure(format!(
                            "layer {i}: zero weight without allow-zero"
                        )));
                    }
                    if let Some(b) = bias.iter().find(|b| !(-128..=127).contains(*b)) {
                        return Err(Error::Structure(format!(
                            "layer {i}: fixed bias {b} outside 8-bit range"
                        )));
                    }
                    (weights.len(), bias.len())
                }
                LayerParams::Binary { weights, bias } => {
                    if let Some(w) = weights.iter().find(|w| **w != 1 && **w != -1) {
                        return Err(Error::Structure(format!(
                            "layer {i}: binary weight {w} is not ±1"
                        )));
                    }
                    (weights.len(), bias.len())
                }
            };
            if nw != l.out_dim * l.in_dim || nb != l.out_dim {
                return Err(Error::Structure(format!(
                    "layer {i}: parameter count does not match {}x{}",
                    l.out_dim, l.in_dim
                )));
            }
            let last = i + 1 == self.layers.len();
            if l.activation == Activation::ArgmaxFinal && !last {
                return Err(Error::Structure(format!(
                    "layer {i}: argmax is only valid on the final layer"
                )));
            }
            width = l.out_dim;
        }
        if self.normalization == Normalization::Div255 && precision != Precision::Float {
            return Err(Error::Structure(
                "div255 normalization requires float precision".into(),
            ));
        }
        Ok(())
    }

    /// First-layer input values after optional normalization.
    pub fn input_values(&self, input: &[u8]) -> Vec<f64> {
        match self.normalization {
            Normalization::None => input.iter().map(|&x| f64::from(x)).collect(),
            Normalization::Div255 => input
                .iter()
                .map(|&x| ((u32::from(x) << 15) / 255) as f64 / 32768.0)
                .collect(),
        }
    }

    /// Straight evaluation with plain `f64`/integer arithmetic.
    pub fn evaluate(&self, input: &[u8]) -> Result<Evaluation> {
        if input.len() != self.input_width {
            return Err(Error::Input(format!(
                "expected {} inputs, got {}",
                self.input_width,
                input.len()
            )));
        }
        let x = self.input_values(input);
        self.evaluate_from(0, &x)
    }

    /// Reference evaluation starting at layer `start` with the given layer inputs.
    pub fn evaluate_from(&self, start: usize, x: &[f64]) -> Result<Evaluation> {
        let mut pre = Vec::new();
        let mut outputs = Vec::new();
        let mut x = x.to_vec();
        for l in &self.layers[start..] {
            if x.len() != l.in_dim {
                return Err(Error::Input(format!(
                    "layer expects {} inputs, got {}",
                    l.in_dim,
                    x.len()
                )));
            }
            let p = reference_layer(l, &x);
            let out: Vec<f64> = match (l.activation, l.precision()) {
                (Activation::Relu, Precision::Float) => p.iter().map(|&v| v.max(0.0)).collect(),
                (Activation::Relu, _) => p.iter().map(|&v| v.clamp(0.0, 255.0)).collect(),
                _ => p.clone(),
            };
            pre.push(p);
            outputs.push(out.clone());
            x = out;
        }
        let last = outputs.last().expect("validated model has layers");
        Ok(Evaluation {
            argmax: argmax_first(last),
            pre,
            outputs,
        })
    }
}

/// Index of the first maximum; later equal values do not displace it.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn reference_layer(l: &Layer, x: &[f64]) -> Vec<f64> {
    (0..l.out_dim)
        .map(|n| match &l.params {
            LayerParams::Float { .. } => {
                let mut acc = trunc7(l_bias_f64(l, n));
                for (k, &xk) in x.iter().enumerate() {
                    if xk == 0.0 {
                        continue;
                    }
                    let w = trunc7(l.float_weight(n, k).to_f64());
                    if w == 0.0 {
                        continue;
                    }
                    acc = round7(acc + round7(trunc7(xk) * w));
                }
                acc
            }
            _ => {
                let mut acc = l.int_bias(n);
                for (k, &xk) in x.iter().enumerate() {
                    acc += xk as i64 * i64::from(l.int_weight(n, k));
                }
                acc as f64
            }
        })
        .collect()
}

fn l_bias_f64(l: &Layer, n: usize) -> f64 {
    match &l.params {
        LayerParams::Float { bias, .. } => bias[n].to_f64(),
        _ => unreachable!(),
    }
}

/// Parameters for `random_model`.
#[derive(Clone, Debug)]
pub struct RandomSpec {
    /// Widths including the input layer, e.g. `[16, 8, 4]`.
    pub dims: Vec<usize>,
    pub precision: Precision,
    pub seed: u64,
    /// Float biases are drawn from `(-r, r)`; binary biases from `[-r, r]`.
    pub bias_range: Option<f64>,
    pub normalization: Normalization,
    pub zero_skipping: bool,
}

impl RandomSpec {
    pub fn new(dims: &[usize], precision: Precision, seed: u64) -> Self {
        RandomSpec {
            dims: dims.to_vec(),
            precision,
            seed,
            bias_range: None,
            normalization: Normalization::None,
            zero_skipping: false,
        }
    }
}

/// Seeded model; hidden layers use ReLU and the last layer argmax.
///
/// Float weights are uniform on (−1, 1) rounded to f32, float biases uniform
/// on (−16, 16) by default. Fixed weights are uniform over the nonzero values
/// of [−8, 7], fixed biases over [−128, 127]. Binary biases default to
/// [−64, 64].
pub fn random_model(spec: &RandomSpec) -> Result<NetworkModel> {
    if spec.dims.len() < 2 || spec.dims.contains(&0) {
        return Err(Error::Structure(format!("invalid dims {:?}", spec.dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    for i in 1..spec.dims.len() {
        let (inp, out) = (spec.dims[i - 1], spec.dims[i]);
        let activation = if i + 1 == spec.dims.len() {
            Activation::ArgmaxFinal
        } else {
            Activation::Relu
        };
        let params = match spec.precision {
            Precision::Float => {
                let r = spec.bias_range.unwrap_or(16.0);
                let mut draw = |lo: f64, hi: f64| loop {
                    let v = rng.gen_range(lo..hi);
                    if v != 0.0 {
                        break FloatRepr::from_f64_lossy(v).expect("finite draw");
                    }
                };
                let weights = (0..out * inp).map(|_| draw(-1.0, 1.0)).collect();
                let bias = (0..out).map(|_| draw(-r, r)).collect();
                LayerParams::Float { weights, bias }
            }
            Precision::Fixed => {
                let weights = (0..out * inp)
                    .map(|_| {
                        let v: i8 = rng.gen_range(-8..7);
                        if v >= 0 {
                            v + 1
                        } else {
                            v
                        }
                    })
                    .collect();
                let bias = (0..out).map(|_| rng.gen_range(-128..=127)).collect();
                LayerParams::Fixed { weights, bias }
            }
            Precision::Binary => {
                let r = spec.bias_range.unwrap_or(64.0) as i32;
                let weights = (0..out * inp)
                    .map(|_| if rng.gen_bool(0.5) { 1 } else { -1 })
                    .collect();
                let bias = (0..out).map(|_| rng.gen_range(-r..=r)).collect();
                LayerParams::Binary { weights, bias }
            }
        };
        layers.push(Layer {
            out_dim: out,
            in_dim: inp,
            params,
            activation,
        });
    }
    let m = NetworkModel {
        layers,
        input_width: spec.dims[0],
        normalization: spec.normalization,
        zero_skipping: spec.zero_skipping,
        allow_zero_weights: false,
    };
    m.validate()?;
    Ok(m)
}

/// Fraction of seeded uniform inputs on which both models pick the same class.
pub fn equivalent_argmax(
    a: &NetworkModel,
    b: &NetworkModel,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Structure(format!(
            "topology mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    for _ in 0..trials {
        let x: Vec<u8> = (0..a.input_width).map(|_| rng.gen()).collect();
        if a.evaluate(&x)?.argmax == b.evaluate(&x)?.argmax {
            agree += 1;
        }
    }
    Ok(if trials == 0 {
        1.0
    } else {
        agree as f64 / trials as f64
    })
}

/// Multiplies the parameters of `layer` by `2^k` and the biases of every
/// later layer by the same factor, so all later pre-activations scale by `2^k`.
pub fn scale_layer_pow2(model: &NetworkModel, layer: usize, k: i32) -> Result<NetworkModel> {
    let mut m = model.clone();
    let s = 2f64.powi(k);
    for (i, l) in m.layers.iter_mut().enumerate().skip(layer) {
        match &mut l.params {
            LayerParams::Float { weights, bias } => {
                let ws = if i == layer {
                    &mut weights[..]
                } else {
                    &mut [][..]
                };
                for v in ws.iter_mut().chain(bias.iter_mut()) {
                    *v = FloatRepr::from_f64(v.to_f64() * s)?;
                }
            }
            _ => return Err(Error::Structure("scaling needs a float layer".into())),
        }
    }
    Ok(m)
}

/// The single neuron of the worked float example (five weights, one bias).
///
/// The stored values sit inside the displayed four-digit precision but are
/// chosen so their 7-bit truncations equal the recovered mantissas.
pub fn float_demo_neuron() -> NetworkModel {
    let f = |m: f64, e: i32| FloatRepr::from_f64_lossy(m * 2f64.powi(e)).expect("finite");
    let weights = vec![
        f(1.0391, -2),
        f(-1.6702, -3),
        f(-1.0860, -6),
        f(1.1803, -2),
        f(1.1255, -7),
    ];
    let bias = vec![f(-1.5906, 5)];
    NetworkModel {
        layers: vec![Layer {
            out_dim: 1,
            in_dim: 5,
            params: LayerParams::Float { weights, bias },
            activation: Activation::Relu,
        }],
        input_width: 5,
        normalization: Normalization::None,
        zero_skipping: false,
        allow_zero_weights: false,
    }
}

/// The single neuron of the worked fixed-point example.
pub fn fixed_demo_neuron() -> NetworkModel {
    NetworkModel {
        layers: vec![Layer {
            out_dim: 1,
            in_dim: 9,
            params: LayerParams::Fixed {
                weights: vec![-1, -3, 4, -7, -8, 2, -6, 5, 0],
                bias: vec![108],
            },
            activation: Activation::Relu,
        }],
        input_width: 9,
        normalization: Normalization::None,
        zero_skipping: false,
        allow_zero_weights: true,
    }
}

/// The two-input binary neuron of the walkthrough figure.
pub fn binary_demo_neuron() -> NetworkModel {
    NetworkModel {
        layers: vec![Layer {
            out_dim: 1,
            in_dim: 2,
            params: LayerParams::Binary {
                weights: vec![1, -1],
                bias: vec![-33],
            },
            activation: Activation::Relu,
        }],
        input_width: 2,
        normalization: Normalization::None,
        zero_skipping: false,
        allow_zero_weights: false,
    }
}

//! The attacker-facing black box: chosen input in, per-operation timing out.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arith::{self, CostProfile, FloatRepr, SignClass};
use crate::error::{Error, Result};
use crate::network::{Activation, Layer, LayerParams, NetworkModel, Normalization, Precision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Mul,
    Add,
    Relu,
    Int2Float,
    DivBit,
    Mac,
    Skip,
    /// One step of the final-layer argmax loop.
    Cmp,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Mul => "mul",
            OpKind::Add => "add",
            OpKind::Relu => "relu",
            OpKind::Int2Float => "int2float",
            OpKind::DivBit => "div_bit",
            OpKind::Mac => "mac",
            OpKind::Skip => "skip",
            OpKind::Cmp => "cmp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mul" => OpKind::Mul,
            "add" => OpKind::Add,
            "relu" => OpKind::Relu,
            "int2float" => OpKind::Int2Float,
            "div_bit" => OpKind::DivBit,
            "mac" => OpKind::Mac,
            "skip" => OpKind::Skip,
            "cmp" => OpKind::Cmp,
            _ => return None,
        })
    }

    pub fn is_activation(self) -> bool {
        matches!(self, OpKind::Relu | OpKind::Cmp)
    }
}

/// One executed kernel. For `int2float` and `div_bit` events `neuron` holds
/// the input position being converted.
#[derive(Clone, Debug, PartialEq)]
pub struct OpEvent {
    pub index: usize,
    pub kind: OpKind,
    pub layer: usize,
    pub neuron: usize,
    /// Mean cycles over the jitter repeats; an integer when sigma is 0.
    pub cycles: f64,
    pub sub_durations: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TimingTrace {
    pub events: Vec<OpEvent>,
    pub total_cycles: f64,
}

impl TimingTrace {
    fn from_events(mut events: Vec<OpEvent>) -> Self {
        for (i, e) in events.iter_mut().enumerate() {
            e.index = i;
        }
        let total_cycles = events.iter().map(|e| e.cycles).sum();
        TimingTrace {
            events,
            total_cycles,
        }
    }

    /// Events of one neuron in execution order.
    pub fn neuron_events(&self, layer: usize, neuron: usize) -> impl Iterator<Item = &OpEvent> {
        self.events.iter().filter(move |e| {
            e.layer == layer
                && e.neuron == neuron
                && !matches!(e.kind, OpKind::Int2Float | OpKind::DivBit)
        })
    }

    /// The activation (or argmax step) event of a neuron.
    pub fn activation(&self, layer: usize, neuron: usize) -> Option<&OpEvent> {
        self.neuron_events(layer, neuron)
            .find(|e| e.kind.is_activation())
    }

    /// Per-input cost of a neuron's MAC slots: the `mul` cycles for float
    /// layers, `mac`/`skip` cycles otherwise. Indexed by input position.
    pub fn mac_slots(&self, layer: usize, neuron: usize) -> Vec<&OpEvent> {
        self.neuron_events(layer, neuron)
            .filter(|e| matches!(e.kind, OpKind::Mul | OpKind::Mac | OpKind::Skip))
            .collect()
    }

    pub fn input_events(&self, kind: OpKind, position: usize) -> impl Iterator<Item = &OpEvent> {
        self.events
            .iter()
            .filter(move |e| e.kind == kind && e.layer == 0 && e.neuron == position)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,kind,layer,neuron,cycles,sub_durations\n");
        for e in &self.events {
            let subs: Vec<String> = e.sub_durations.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.index,
                e.kind.as_str(),
                e.layer,
                e.neuron,
                e.cycles,
                subs.join("|")
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "index,kind,layer,neuron,cycles,sub_durations" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing trace header".into(),
                })
            }
        }
        let mut events = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let ln = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse {
                    line: ln,
                    msg: "expected 6 fields".into(),
                });
            }
            let bad = |what: &str| Error::Parse {
                line: ln,
                msg: format!("bad {what}"),
            };
            let sub_durations = if f[5].is_empty() {
                Vec::new()
            } else {
                f[5].split('|')
                    .map(|d| d.parse().map_err(|_| bad("sub_durations")))
                    .collect::<Result<_>>()?
            };
            events.push(OpEvent {
                index: f[0].parse().map_err(|_| bad("index"))?,
                kind: OpKind::parse(f[1]).ok_or_else(|| bad("kind"))?,
                layer: f[2].parse().map_err(|_| bad("layer"))?,
                neuron: f[3].parse().map_err(|_| bad("neuron"))?,
                cycles: f[4].parse().map_err(|_| bad("cycles"))?,
                sub_durations,
            });
        }
        let total_cycles = events.iter().map(|e| e.cycles).sum();
        Ok(TimingTrace {
            events,
            total_cycles,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterConfig {
    pub sigma: f64,
    pub repeats: u32,
    pub seed: u64,
}

impl JitterConfig {
    pub fn none() -> Self {
        JitterConfig {
            sigma: 0.0,
            repeats: 1,
            seed: 0,
        }
    }
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self::none()
    }
}

/// An executor that produces noise-free events. Implemented by the leaky
/// emulation here and by the constant-time executor in `hardened`.
pub trait Device: Send + Sync {
    fn model(&self) -> &NetworkModel;
    /// Full inference; returns the final-layer values and the events.
    fn infer(&self, input: &[u8]) -> Result<(Vec<f64>, Vec<OpEvent>)>;
    /// Runs only `layer` on injected layer inputs.
    fn infer_layer(&self, layer: usize, activations: &[f64]) -> Result<Vec<OpEvent>>;
}

/// Emulation of the unprotected firmware.
pub struct LeakyDevice {
    pub model: NetworkModel,
    pub profile: CostProfile,
}

impl LeakyDevice {
    pub fn new(model: NetworkModel, profile: CostProfile) -> Result<Self> {
        model.validate()?;
        Ok(LeakyDevice { model, profile })
    }

    fn input_stage(&self, input: &[u8], ev: &mut Vec<OpEvent>) -> Vec<f64> {
        let p = &self.profile;
        match (self.model.normalization, self.model.precision()) {
            (Normalization::Div255, _) => input
                .iter()
                .enumerate()
                .map(|(i, &ip)| {
                    let (q, durations) = arith::leaky_normalize_div255(ip, p);
                    for d in durations {
                        let subs = if d == p.div_short {
                            vec![f64::from(d)]
                        } else {
                            vec![f64::from(p.div_short), f64::from(d - p.div_short)]
                        };
                        ev.push(event(OpKind::DivBit, 0, i, d, subs));
                    }
                    f64::from(q) / 32768.0
                })
                .collect(),
            (Normalization::None, Precision::Float) => input
                .iter()
                .enumerate()
                .map(|(i, &ip)| {
                    let (v, c) = arith::leaky_int2float(ip, p);
                    ev.push(event(OpKind::Int2Float, 0, i, c, vec![]));
                    v.to_f64()
                })
                .collect(),
            (Normalization::None, _) => input.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    fn run_layer(&self, li: usize, l: &Layer, x: &[f64], ev: &mut Vec<OpEvent>) -> Vec<f64> {
        let p = &self.profile;
        let skip = self.model.zero_skipping;
        let mut best: Option<f64> = None;
        let mut out = Vec::with_capacity(l.out_dim);
        for n in 0..l.out_dim {
            let pa: f64 = match &l.params {
                LayerParams::Float { bias, .. } => {
                    let mut acc = bias[n];
                    for (k, &xk) in x.iter().enumerate() {
                        if skip && xk == 0.0 {
                            ev.push(event(OpKind::Skip, li, n, p.skip, vec![]));
                            continue;
                        }
                        let ip = FloatRepr::from_f64(xk).expect("validated activation");
                        let (prod, c) = arith::leaky_float_mul(ip, l.float_weight(n, k), p);
                        ev.push(event(OpKind::Mul, li, n, c, vec![]));
                        let (sum, c) = arith::leaky_float_add(acc, prod, p);
                        ev.push(event(OpKind::Add, li, n, c, vec![]));
                        acc = sum;
                    }
                    acc.truncate7().to_f64()
                }
                _ => {
                    let binary = l.precision() == Precision::Binary;
                    let mut acc = l.int_bias(n);
                    for (k, &xk) in x.iter().enumerate() {
                        let ip = xk as u8;
                        let w = l.int_weight(n, k);
                        let (a, c) = arith::zero_skip_mac(acc, skip && ip == 0, p, |a| {
                            if binary {
                                arith::bnn_mac(a, ip, w, p)
                            } else {
                                arith::fixed_mac(a, ip, w, p)
                            }
                        });
                        let kind = if skip && ip == 0 {
                            OpKind::Skip
                        } else {
                            OpKind::Mac
                        };
                        ev.push(event(kind, li, n, c, vec![]));
                        acc = a;
                    }
                    acc as f64
                }
            };
            match l.activation {
                Activation::Relu => {
                    let (v, c) = match l.precision() {
                        Precision::Float => {
                            let (v, c) = arith::leaky_float_relu(
                                FloatRepr::from_f64(pa).expect("device value"),
                                p,
                            );
                            (v.to_f64(), c)
                        }
                        _ => {
                            let (v, c) = arith::fixed_relu(pa as i64, p);
                            ((v as f64).min(255.0), c)
                        }
                    };
                    ev.push(event(OpKind::Relu, li, n, c, vec![]));
                    out.push(v);
                }
                Activation::ArgmaxFinal => {
                    let beats = best.is_some_and(|b| pa > b);
                    if best.is_none() || beats {
                        best = Some(pa);
                    }
                    let c = arith::argmax_step(SignClass::of_f64(pa), beats, p);
                    ev.push(event(OpKind::Cmp, li, n, c, vec![]));
                    out.push(pa);
                }
                Activation::None => out.push(pa),
            }
        }
        out
    }
}

fn event(
    kind: OpKind,
    layer: usize,
    neuron: usize,
    cycles: u32,
    sub_durations: Vec<f64>,
) -> OpEvent {
    OpEvent {
        index: 0,
        kind,
        layer,
        neuron,
        cycles: f64::from(cycles),
        sub_durations,
    }
}

/// Checks that injected activations are valid inputs for `layer`.
pub fn check_layer_inputs(model: &NetworkModel, layer: usize, activations: &[f64]) -> Result<()> {
    let l = model.layers.get(layer).ok_or_else(|| {
        Error::Input(format!(
            "layer {layer} out of range (model has {})",
            model.layers.len()
        ))
    })?;
    if activations.len() != l.in_dim {
        return Err(Error::Input(format!(
            "layer {layer} expects {} activations, got {}",
            l.in_dim,
            activations.len()
        )));
    }
    let integral = layer == 0 || l.precision() != Precision::Float;
    for &a in activations {
        let ok = if integral {
            a.fract() == 0.0 && (0.0..=255.0).contains(&a)
        } else {
            a >= 0.0 && FloatRepr::from_f64(a).is_ok()
        };
        if !ok {
            return Err(Error::Input(format!(
                "activation {a} outside the domain of layer {layer}"
            )));
        }
    }
    Ok(())
}

impl Device for LeakyDevice {
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
        let mut x = self.input_stage(input, &mut ev);
        for (li, l) in self.model.layers.iter().enumerate() {
            x = self.run_layer(li, l, &x, &mut ev);
        }
        Ok((x, ev))
    }

    fn infer_layer(&self, layer: usize, activations: &[f64]) -> Result<Vec<OpEvent>> {
        check_layer_inputs(&self.model, layer, activations)?;
        let mut ev = Vec::new();
        let x = if layer == 0 {
            let raw: Vec<u8> = activations.iter().map(|&a| a as u8).collect();
            self.input_stage(&raw, &mut ev)
        } else {
            activations.to_vec()
        };
        self.run_layer(layer, &self.model.layers[layer], &x, &mut ev);
        Ok(ev)
    }
}

/// Black-box access with measurement noise and query accounting.
pub struct Oracle {
    device: Box<dyn Device>,
    jitter: JitterConfig,
    queries: AtomicU64,
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Oracle")
            .field("jitter", &self.jitter)
            .field("queries", &self.query_count())
            .finish()
    }
}

impl Oracle {
    pub fn new(model: NetworkModel, profile: CostProfile, jitter: JitterConfig) -> Result<Self> {
        Ok(Self::with_device(
            Box::new(LeakyDevice::new(model, profile)?),
            jitter,
        ))
    }

    pub fn with_device(device: Box<dyn Device>, jitter: JitterConfig) -> Self {
        Oracle {
            device,
            jitter,
            queries: AtomicU64::new(0),
        }
    }

    pub fn jitter(&self) -> JitterConfig {
        self.jitter
    }

    /// Topology only; the attacker is assumed to know layer widths,
    /// precision and the ops executed.
    pub fn dims(&self) -> Vec<usize> {
        self.device.model().dims()
    }

    pub fn precision(&self) -> Precision {
        self.device.model().precision()
    }

    pub fn activation(&self, layer: usize) -> Activation {
        self.device.model().layers[layer].activation
    }

    pub fn normalization(&self) -> Normalization {
        self.device.model().normalization
    }

    pub fn zero_skipping(&self) -> bool {
        self.device.model().zero_skipping
    }

    pub fn run_inference(&self, input: &[u8]) -> Result<(Vec<f64>, TimingTrace)> {
        let (out, ev) = self.device.infer(input)?;
        let ordinal = self.queries.fetch_add(1, Ordering::Relaxed);
        Ok((out, self.noisy(ev, ordinal)))
    }

    pub fn probe_layer(&self, layer: usize, activations: &[f64]) -> Result<TimingTrace> {
        let ev = self.device.infer_layer(layer, activations)?;
        let ordinal = self.queries.fetch_add(1, Ordering::Relaxed);
        Ok(self.noisy(ev, ordinal))
    }

    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn reset_queries(&self) {
        self.queries.store(0, Ordering::Relaxed);
    }

    fn noisy(&self, mut ev: Vec<OpEvent>, ordinal: u64) -> TimingTrace {
        let JitterConfig {
            sigma,
            repeats,
            seed,
        } = self.jitter;
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ordinal);
            let normal = Normal::new(0.0, sigma).expect("sigma is finite");
            let reps = repeats.max(1);
            let mut jitter = |base: f64| -> f64 {
                let total: f64 = (0..reps)
                    .map(|_| (base + normal.sample(&mut rng).round()).max(1.0))
                    .sum();
                total / f64::from(reps)
            };
            for e in &mut ev {
                if e.sub_durations.is_empty() {
                    e.cycles = jitter(e.cycles);
                } else {
                    for d in &mut e.sub_durations {
                        *d = jitter(*d);
                    }
                    e.cycles = e.sub_durations.iter().sum();
                }
            }
        }
        TimingTrace::from_events(ev)
    }

    /// Builds the stand-in for prefix crafting at `layer` (see [`CraftedInjector`]).
    pub fn crafted_injector(
        &self,
        layer: usize,
        recovered_prefix: &NetworkModel,
        seed: u64,
    ) -> Result<CraftedInjector> {
        CraftedInjector::calibrate(self.device.model(), recovered_prefix, layer, seed)
    }

    /// Probes `layer` with inputs expressed in the attacker's recovered
    /// coordinates.
    pub fn probe_crafted(&self, injector: &CraftedInjector, coords: &[f64]) -> Result<TimingTrace> {
        let device: Vec<f64> = coords
            .iter()
            .zip(&injector.scales)
            .map(|(&v, &c)| v * c)
            .collect();
        self.probe_layer(injector.layer, &device)
    }
}

/// Maps activations written in recovered coordinates to device activations.
///
/// A recovered float prefix reproduces each device neuron only up to a
/// power-of-two factor. An attacker who crafts raw inputs through the
/// recovered prefix therefore makes the device see `c_i · v_i` when the
/// prefix predicts `v_i`. The factors are measured by running the true and
/// the recovered prefix on the same seeded inputs. Fixed and binary layers
/// have `c_i = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CraftedInjector {
    pub layer: usize,
    pub scales: Vec<f64>,
}

impl CraftedInjector {
    pub fn identity(layer: usize, width: usize) -> Self {
        CraftedInjector {
            layer,
            scales: vec![1.0; width],
        }
    }

    fn calibrate(
        truth: &NetworkModel,
        recovered: &NetworkModel,
        layer: usize,
        seed: u64,
    ) -> Result<Self> {
        if layer == 0 || layer >= truth.layers.len() {
            return Err(Error::Input(format!(
                "crafted injection needs a hidden layer, got {layer}"
            )));
        }
        let width = truth.layers[layer].in_dim;
        if truth.precision() != Precision::Float {
            return Ok(Self::identity(layer, width));
        }
        if recovered.layers.len() < layer || recovered.layers[layer - 1].out_dim != width {
            return Err(Error::Structure(
                "recovered prefix does not cover the preceding layers".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logs: Vec<Vec<i32>> = vec![Vec::new(); width];
        let sample = |x: &[u8], logs: &mut Vec<Vec<i32>>| -> Result<()> {
            let t = truth.evaluate(x)?;
            let (_, r) = prefix_eval(recovered, layer, x)?;
            for (i, log) in logs.iter_mut().enumerate() {
                let (a, b) = (t.outputs[layer - 1][i], r[i]);
                if a > 0.0 && b > 0.0 {
                    log.push((a / b).log2().round() as i32);
                }
            }
            Ok(())
        };
        for _ in 0..512 {
            let x: Vec<u8> = (0..truth.input_width).map(|_| rng.gen()).collect();
            sample(&x, &mut logs)?;
        }
        // Rarely active neurons: climb the recovered pre-activation until it fires.
        for i in 0..width {
            if !logs[i].is_empty() {
                continue;
            }
            let mut x: Vec<u8> = (0..truth.input_width).map(|_| rng.gen()).collect();
            let pre = |x: &[u8]| prefix_eval(recovered, layer, x).map(|(p, _)| p[i]);
            let mut best = pre(&x)?;
            for _ in 0..4 {
                for k in 0..x.len() {
                    for v in (0..=255u8).step_by(17) {
                        let keep = x[k];
                        x[k] = v;
                        let p = pre(&x)?;
                        if p > best {
                            best = p;
                        } else {
                            x[k] = keep;
                        }
                    }
                }
                if best > 0.0 {
                    break;
                }
            }
            if best > 0.0 {
                sample(&x, &mut logs)?;
            }
        }
        let scales = logs
            .into_iter()
            .map(|mut l| {
                if l.is_empty() {
                    return 1.0;
                }
                l.sort_unstable();
                2f64.powi(l[l.len() / 2])
            })
            .collect();
        Ok(CraftedInjector { layer, scales })
    }
}

/// Pre-activations and outputs of layer `layer - 1` of a (possibly partial)
/// recovered model.
fn prefix_eval(model: &NetworkModel, layer: usize, input: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    let layers = model.layers[..layer]
        .iter()
        .map(|l| Layer {
            activation: Activation::Relu,
            ..l.clone()
        })
        .collect();
    let prefix = NetworkModel {
        layers,
        allow_zero_weights: true,
        ..model.clone()
    };
    let mut e = prefix.evaluate(input)?;
    Ok((
        e.pre.pop().expect("non-empty prefix"),
        e.outputs.pop().expect("non-empty prefix"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{fixed_demo_neuron, random_model, RandomSpec};

    fn profile() -> CostProfile {
        CostProfile::atmega_like()
    }

    #[test]
    fn fixed_demo_all_zero_is_positive_class() {
        let o = Oracle::new(fixed_demo_neuron(), profile(), JitterConfig::none()).unwrap();
        let (out, t) = o.run_inference(&[0; 9]).unwrap();
        assert_eq!(out, vec![108.0]);
        assert_eq!(
            t.activation(0, 0).unwrap().cycles,
            f64::from(profile().fixed_relu_pos)
        );
        assert_eq!(o.query_count(), 1);
        o.reset_queries();
        assert_eq!(o.query_count(), 0);
    }

    #[test]
    fn outputs_match_reference_and_event_counts() {
        for p in [Precision::Float, Precision::Fixed, Precision::Binary] {
            let m = random_model(&RandomSpec::new(&[6, 5, 3], p, 4)).unwrap();
            let o = Oracle::new(m.clone(), profile(), JitterConfig::none()).unwrap();
            for s in 0..20u8 {
                let x: Vec<u8> = (0..6u8)
                    .map(|i| s.wrapping_mul(37).wrapping_add(i.wrapping_mul(53)))
                    .collect();
                let (out, t) = o.run_inference(&x).unwrap();
                assert_eq!(&out, m.evaluate(&x).unwrap().outputs.last().unwrap());
                let per_mac = if p == Precision::Float { 2 } else { 1 };
                let expected_layer0 =
                    5 * (6 * per_mac + 1) + if p == Precision::Float { 6 } else { 0 };
                assert_eq!(
                    t.events.iter().filter(|e| e.layer == 0).count(),
                    expected_layer0
                );
            }
        }
    }

    #[test]
    fn div255_and_skip_events() {
        let mut m = random_model(&RandomSpec::new(&[3, 2], Precision::Float, 1)).unwrap();
        m.normalization = Normalization::Div255;
        m.zero_skipping = true;
        let o = Oracle::new(m, profile(), JitterConfig::none()).unwrap();
        let (_, t) = o.run_inference(&[85, 0, 0]).unwrap();
        let bits: Vec<bool> = t
            .input_events(OpKind::DivBit, 0)
            .map(|e| e.cycles > f64::from(profile().div_short))
            .collect();
        assert_eq!(bits.len(), 16);
        assert_eq!(&bits[..5], &[false, false, true, false, true]);
        assert_eq!(
            t.mac_slots(0, 0)
                .iter()
                .filter(|e| e.kind == OpKind::Skip)
                .count(),
            2
        );
    }

    #[test]
    fn jitter_is_reproducible() {
        let m = random_model(&RandomSpec::new(&[4, 2], Precision::Float, 1)).unwrap();
        let j = JitterConfig {
            sigma: 2.0,
            repeats: 4,
            seed: 5,
        };
        let a = Oracle::new(m.clone(), profile(), j).unwrap();
        let b = Oracle::new(m, profile(), j).unwrap();
        let x = [1, 2, 3, 4];
        assert_eq!(
            a.run_inference(&x).unwrap().1,
            b.run_inference(&x).unwrap().1
        );
        assert_ne!(
            a.run_inference(&x).unwrap().1,
            a.run_inference(&x).unwrap().1
        );
    }

    #[test]
    fn csv_roundtrip() {
        let m = random_model(&RandomSpec::new(&[3, 2], Precision::Float, 1)).unwrap();
        let o = Oracle::new(m, profile(), JitterConfig::none()).unwrap();
        let t = o.run_inference(&[1, 2, 3]).unwrap().1;
        let csv = t.to_csv();
        assert!(csv.starts_with("index,kind,layer,neuron,cycles,sub_durations\n"));
        assert_eq!(TimingTrace::from_csv(&csv).unwrap(), t);
    }

    #[test]
    fn probe_layer_matches_full_run() {
        let m = random_model(&RandomSpec::new(&[5, 4, 3], Precision::Float, 8)).unwrap();
        let o = Oracle::new(m.clone(), profile(), JitterConfig::none()).unwrap();
        let x = [9, 200, 0, 17, 255];
        let (_, full) = o.run_inference(&x).unwrap();
        let l0 = o.probe_layer(0, &[9.0, 200.0, 0.0, 17.0, 255.0]).unwrap();
        let strip = |t: &TimingTrace, layer| {
            t.events
                .iter()
                .filter(|e| e.layer == layer)
                .map(|e| (e.kind, e.cycles))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&full, 0), strip(&l0, 0));
        let h = &m.evaluate(&x).unwrap().outputs[0];
        let l1 = o.probe_layer(1, h).unwrap();
        assert_eq!(strip(&full, 1), strip(&l1, 1));
        assert!(o.probe_layer(1, &[-1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(o.probe_layer(7, &[0.0]).is_err());
    }
}

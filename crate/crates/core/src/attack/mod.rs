//! Model and input recovery from timing traces.

pub mod binary;
pub mod engine;
pub mod fixed;
pub mod float;
pub mod input;

use std::fmt::Write as _;

use crate::arith::{CostProfile, SignClass};
use crate::error::{Error, Result};
use crate::network::{Activation, NetworkModel, Precision};
use crate::oracle::{CraftedInjector, OpEvent, Oracle, TimingTrace};

/// How a sweep decides that the activation has crossed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossRule {
    /// First value whose class is the strict opposite of the base sign.
    StrictOpposite,
    /// First value whose class differs from the base class.
    AnyChange,
}

impl CrossRule {
    pub fn crossed(self, base: SignClass, now: SignClass) -> bool {
        match self {
            CrossRule::StrictOpposite => now.signum() == -base.signum() && now != SignClass::Zero,
            CrossRule::AnyChange => now != base,
        }
    }
}

/// Nearest-centre classifier for activation and compare events.
#[derive(Clone, Debug)]
pub struct ActivationClassifier {
    centres: Vec<(f64, SignClass, bool)>,
}

impl ActivationClassifier {
    pub fn new(profile: &CostProfile, precision: Precision, activation: Activation) -> Self {
        let c = |v: u32| f64::from(v);
        let centres = match (activation, precision) {
            (Activation::ArgmaxFinal, _) => {
                let u = profile.cmp_update;
                vec![
                    (c(profile.cmp_pos), SignClass::Positive, false),
                    (c(profile.cmp_zero), SignClass::Zero, false),
                    (c(profile.cmp_neg), SignClass::Negative, false),
                    (c(profile.cmp_pos + u), SignClass::Positive, true),
                    (c(profile.cmp_zero + u), SignClass::Zero, true),
                    (c(profile.cmp_neg + u), SignClass::Negative, true),
                ]
            }
            (_, Precision::Float) => vec![
                (c(profile.float_relu_pos), SignClass::Positive, false),
                (c(profile.float_relu_zero), SignClass::Zero, false),
                (c(profile.float_relu_neg), SignClass::Negative, false),
            ],
            _ => vec![
                (c(profile.fixed_relu_pos), SignClass::Positive, false),
                (c(profile.fixed_relu_zero), SignClass::Zero, false),
                (c(profile.fixed_relu_neg), SignClass::Negative, false),
            ],
        };
        ActivationClassifier { centres }
    }

    /// Sign class and, for compare events, whether the running best moved.
    pub fn classify(&self, cycles: f64) -> (SignClass, bool) {
        let best = self
            .centres
            .iter()
            .min_by(|a, b| (a.0 - cycles).abs().total_cmp(&(b.0 - cycles).abs()))
            .expect("classifier has centres");
        (best.1, best.2)
    }
}

/// Query access to one layer in the attacker's coordinates.
pub struct LayerProber<'a> {
    pub oracle: &'a Oracle,
    pub layer: usize,
    pub width: usize,
    injector: Option<CraftedInjector>,
    classifier: ActivationClassifier,
}

impl<'a> LayerProber<'a> {
    pub fn new(
        oracle: &'a Oracle,
        profile: &CostProfile,
        layer: usize,
        injector: Option<CraftedInjector>,
    ) -> Result<Self> {
        let dims = oracle.dims();
        if layer + 1 >= dims.len() {
            return Err(Error::Input(format!("layer {layer} out of range")));
        }
        if layer > 0 && oracle.activation(layer - 1) == Activation::None {
            return Err(Error::Precondition(format!(
                "layer {layer} follows a layer without activation"
            )));
        }
        let classifier =
            ActivationClassifier::new(profile, oracle.precision(), oracle.activation(layer));
        Ok(LayerProber {
            oracle,
            layer,
            width: dims[layer],
            injector,
            classifier,
        })
    }

    pub fn probe(&self, coords: &[f64]) -> Result<TimingTrace> {
        match &self.injector {
            Some(inj) => self.oracle.probe_crafted(inj, coords),
            None => self.oracle.probe_layer(self.layer, coords),
        }
    }

    /// Probes a sparse input vector (all other positions zero).
    pub fn probe_sparse(&self, inputs: &[(usize, f64)]) -> Result<TimingTrace> {
        let mut x = vec![0.0; self.width];
        for &(k, v) in inputs {
            x[k] = v;
        }
        self.probe(&x)
    }

    pub fn class_of(&self, trace: &TimingTrace, neuron: usize) -> Result<(SignClass, bool)> {
        let ev = trace.activation(self.layer, neuron).ok_or_else(|| {
            Error::Precondition(format!(
                "layer {} has no activation event to observe",
                self.layer
            ))
        })?;
        Ok(self.classifier.classify(ev.cycles))
    }

    pub fn sign_of(&self, inputs: &[(usize, f64)], neuron: usize) -> Result<SignClass> {
        let t = self.probe_sparse(inputs)?;
        Ok(self.class_of(&t, neuron)?.0)
    }

    pub fn mac_cycles(&self, trace: &TimingTrace, neuron: usize) -> Vec<f64> {
        trace
            .mac_slots(self.layer, neuron)
            .iter()
            .map(|e: &&OpEvent| e.cycles)
            .collect()
    }
}

/// Observations collected during a sweep: (sparse input, class).
pub type SweepLog = Vec<(Vec<(usize, f64)>, SignClass)>;

/// One sweep: raise input `k` through `unit`, `2·unit`, ..., `255·unit` on top
/// of `base` until the rule fires. Returns the step count of the first
/// crossing and every (input, class) pair seen on the way.
pub fn sweep(
    prober: &LayerProber<'_>,
    neuron: usize,
    base: &[(usize, f64)],
    k: usize,
    base_class: SignClass,
    rule: CrossRule,
    unit: f64,
) -> Result<(Option<u32>, SweepLog)> {
    let mut seen = Vec::new();
    for v in 1..=255u32 {
        let mut x = base.to_vec();
        x.push((k, f64::from(v) * unit));
        let class = prober.sign_of(&x, neuron)?;
        seen.push((x, class));
        if rule.crossed(base_class, class) {
            return Ok((Some(v), seen));
        }
    }
    Ok((None, seen))
}

/// Which step of the attack produced a weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Round {
    Reference,
    Round1,
    Round2,
    Round3,
    Timing,
    Unobserved,
}

impl Round {
    pub fn as_str(self) -> &'static str {
        match self {
            Round::Reference => "ref",
            Round::Round1 => "r1",
            Round::Round2 => "r2",
            Round::Round3 => "r3",
            Round::Timing => "timing",
            Round::Unobserved => "none",
        }
    }
}

/// Per-weight side report row.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightReport {
    pub layer: usize,
    pub neuron: usize,
    pub input: usize,
    pub round: Round,
    /// Input value at the crossover (for fixed and binary, the step count).
    pub reading: Option<f64>,
    /// Mantissa correlation for float weights.
    pub score: Option<f64>,
    /// Closed-form estimate before refinement.
    pub estimate: f64,
    pub value: f64,
    /// Number of values still consistent with every observation.
    pub ambiguity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronReport {
    pub layer: usize,
    pub neuron: usize,
    pub bias_estimate: f64,
    pub bias: f64,
    pub bias_ambiguity: usize,
    /// Set when the final random verification found a contradiction.
    pub inconsistent: bool,
    pub note: Option<String>,
}

/// A recovered network together with the evidence behind it.
#[derive(Clone, Debug)]
pub struct RecoveredModel {
    pub model: NetworkModel,
    pub weights: Vec<WeightReport>,
    pub neurons: Vec<NeuronReport>,
    /// Per-layer input scale used when probing (power-of-two factors for float).
    pub input_scales: Vec<Vec<f64>>,
    pub queries: u64,
}

impl RecoveredModel {
    pub fn unresolved(&self) -> usize {
        self.weights.iter().filter(|w| w.ambiguity != 1).count()
            + self
                .neurons
                .iter()
                .filter(|n| n.bias_ambiguity != 1 || n.inconsistent)
                .count()
    }

    pub fn weights_csv(&self) -> String {
        let mut s =
            String::from("layer,neuron,input,round,reading,score,estimate,value,ambiguity\n");
        for w in &self.weights {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                w.layer,
                w.neuron,
                w.input,
                w.round.as_str(),
                w.reading.map(|r| r.to_string()).unwrap_or_default(),
                w.score.map(|r| format!("{r:.6}")).unwrap_or_default(),
                w.estimate,
                w.value,
                w.ambiguity
            );
        }
        s
    }

    pub fn neurons_csv(&self) -> String {
        let mut s =
            String::from("layer,neuron,bias_estimate,bias,bias_ambiguity,inconsistent,note\n");
        for n in &self.neurons {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                n.layer,
                n.neuron,
                n.bias_estimate,
                n.bias,
                n.bias_ambiguity,
                n.inconsistent,
                n.note.as_deref().unwrap_or("")
            );
        }
        s
    }
}

/// Attack entry point that dispatches on the precision the oracle reports.
pub fn recover_model(oracle: &Oracle, profile: &CostProfile, seed: u64) -> Result<RecoveredModel> {
    match oracle.precision() {
        Precision::Float => float::recover_float_model(
            oracle,
            profile,
            &float::FloatAttackConfig {
                seed,
                ..Default::default()
            },
        ),
        Precision::Fixed => fixed::recover_fixed_model(
            oracle,
            profile,
            &fixed::FixedAttackConfig {
                seed,
                ..Default::default()
            },
        ),
        Precision::Binary => binary::recover_binary_model(oracle, profile, seed),
    }
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules() {
        use SignClass::*;
        assert!(CrossRule::StrictOpposite.crossed(Negative, Positive));
        assert!(!CrossRule::StrictOpposite.crossed(Negative, Zero));
        assert!(CrossRule::AnyChange.crossed(Negative, Zero));
        assert!(!CrossRule::AnyChange.crossed(Positive, Positive));
    }

    #[test]
    fn classifier_separates_compare_outcomes() {
        for name in crate::arith::BUILTIN_PROFILES {
            let p = CostProfile::builtin(name).unwrap();
            let c = ActivationClassifier::new(&p, Precision::Float, Activation::ArgmaxFinal);
            for &(v, s, u) in &c.centres {
                assert_eq!(c.classify(v), (s, u));
            }
        }
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }
}

//! Candidate elimination for one neuron.
//!
//! A hypothesis is a bias plus one value per weight. Hypotheses are grouped in
//! branches that share a bias and keep an independent candidate set per
//! weight. Every oracle observation (sparse input vector, activation sign
//! class) is replayed against the attacker's exact simulation of the device
//! arithmetic. An observation whose support has exactly one unresolved weight
//! filters that weight; with none left it confirms or kills the branch.

use std::fmt::Debug;

use crate::arith::SignClass;

/// Exact device arithmetic for a single neuron, in the attacker's coordinates.
pub trait NeuronArith {
    type W: Copy + PartialEq + Debug;
    type B: Copy + PartialEq + Debug;
    /// Pre-activation for `terms` given in input order.
    fn pre_activation(&self, bias: Self::B, terms: &[(f64, Self::W)]) -> f64;

    fn class(&self, bias: Self::B, terms: &[(f64, Self::W)]) -> SignClass {
        SignClass::of_f64(self.pre_activation(bias, terms))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Nonzero inputs in increasing position order.
    pub inputs: Vec<(usize, f64)>,
    /// Sign class of `pre-activation - offset`.
    pub class: SignClass,
    pub offset: f64,
}

impl Observation {
    pub fn new(inputs: Vec<(usize, f64)>, class: SignClass) -> Self {
        Self::against(inputs, 0.0, class)
    }

    /// An observation of the pre-activation compared with `offset`.
    pub fn against(mut inputs: Vec<(usize, f64)>, offset: f64, class: SignClass) -> Self {
        inputs.retain(|&(_, v)| v != 0.0);
        inputs.sort_by_key(|&(k, _)| k);
        Observation {
            inputs,
            class,
            offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<W, B> {
    pub bias: B,
    pub candidates: Vec<Vec<W>>,
}

impl<W, B> Branch<W, B> {
    pub fn mass(&self) -> f64 {
        self.candidates.iter().map(|c| c.len() as f64).product()
    }

    fn unresolved(&self, obs: &Observation) -> Vec<usize> {
        obs.inputs
            .iter()
            .map(|&(k, _)| k)
            .filter(|&k| self.candidates[k].len() > 1)
            .collect()
    }
}

pub struct Engine<A: NeuronArith> {
    pub arith: A,
    pub branches: Vec<Branch<A::W, A::B>>,
    pub log: Vec<Observation>,
}

impl<A: NeuronArith> Engine<A> {
    pub fn new(arith: A, branches: Vec<Branch<A::W, A::B>>) -> Self {
        Engine {
            arith,
            branches,
            log: Vec::new(),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.branches.iter().map(Branch::mass).sum()
    }

    pub fn is_resolved(&self) -> bool {
        self.branches.len() == 1 && self.branches[0].mass() == 1.0
    }

    /// Weight positions whose value differs between surviving hypotheses.
    pub fn ambiguous_weights(&self) -> Vec<usize> {
        let n = self.branches.first().map_or(0, |b| b.candidates.len());
        (0..n)
            .filter(|&k| {
                let first = self.branches[0].candidates[k].first();
                self.branches
                    .iter()
                    .any(|b| b.candidates[k].len() != 1 || b.candidates[k].first() != first)
            })
            .collect()
    }

    /// Values of a weight that is identical across all surviving hypotheses.
    pub fn settled(&self, k: usize) -> Option<A::W> {
        let first = *self.branches.first()?.candidates[k].first()?;
        self.branches
            .iter()
            .all(|b| b.candidates[k].len() == 1 && b.candidates[k][0] == first)
            .then_some(first)
    }

    /// Replaces every branch by one branch per candidate value of weight `k`,
    /// so that `k` can serve as a known helper inside each hypothesis.
    pub fn split(&mut self, k: usize) {
        self.branches = std::mem::take(&mut self.branches)
            .into_iter()
            .flat_map(|b| {
                b.candidates[k].clone().into_iter().map(move |w| {
                    let mut c = b.clone();
                    c.candidates[k] = vec![w];
                    c
                })
            })
            .collect();
    }

    fn predict(
        &self,
        branch: &Branch<A::W, A::B>,
        obs: &Observation,
        free: Option<(usize, A::W)>,
    ) -> SignClass {
        let terms: Vec<(f64, A::W)> = obs
            .inputs
            .iter()
            .map(|&(k, v)| match free {
                Some((fk, w)) if fk == k => (v, w),
                _ => (v, branch.candidates[k][0]),
            })
            .collect();
        SignClass::of_f64(self.arith.pre_activation(branch.bias, &terms) - obs.offset)
    }

    pub fn observe(&mut self, obs: Observation) {
        self.log.push(obs);
        self.propagate();
    }

    /// Filters every branch against the whole log until nothing changes.
    pub fn propagate(&mut self) {
        let log = std::mem::take(&mut self.log);
        let mut branches = std::mem::take(&mut self.branches);
        branches.retain_mut(|b| self.filter_branch(b, &log));
        self.branches = branches;
        self.log = log;
    }

    fn filter_branch(&self, b: &mut Branch<A::W, A::B>, log: &[Observation]) -> bool {
        if b.candidates.iter().any(Vec::is_empty) {
            return false;
        }
        loop {
            let mut changed = false;
            for obs in log {
                let unresolved = b.unresolved(obs);
                match unresolved.len() {
                    0 => {
                        if self.predict(b, obs, None) != obs.class {
                            return false;
                        }
                    }
                    1 => {
                        let k = unresolved[0];
                        let before = b.candidates[k].len();
                        let keep: Vec<A::W> = b.candidates[k]
                            .iter()
                            .copied()
                            .filter(|&w| self.predict(b, obs, Some((k, w))) == obs.class)
                            .collect();
                        if keep.is_empty() {
                            return false;
                        }
                        if keep.len() != before {
                            b.candidates[k] = keep;
                            changed = true;
                        }
                    }
                    _ => {}
                }
            }
            if !changed {
                return true;
            }
        }
    }

    /// Worst-case surviving mass over the possible outcomes of `probe`.
    /// A branch with two or more unresolved weights in the probe support
    /// cannot be predicted and survives every outcome.
    pub fn worst_case(&self, probe: &Observation) -> f64 {
        let mut bucket = [0.0f64; 3];
        let mut blind = 0.0;
        for b in &self.branches {
            let mass = b.mass();
            let unresolved = b.unresolved(probe);
            match unresolved.len() {
                0 => bucket[class_index(self.predict(b, probe, None))] += mass,
                1 => {
                    let k = unresolved[0];
                    let share = mass / b.candidates[k].len() as f64;
                    for &w in &b.candidates[k] {
                        bucket[class_index(self.predict(b, probe, Some((k, w))))] += share;
                    }
                }
                _ => blind += mass,
            }
        }
        bucket.iter().fold(0.0f64, |m, &x| m.max(x)) + blind
    }

    /// The most informative of `probes`, if any of them splits the hypotheses.
    pub fn best_probe<'p>(
        &self,
        probes: impl IntoIterator<Item = &'p Vec<(usize, f64)>>,
    ) -> Option<Vec<(usize, f64)>> {
        let obs: Vec<Observation> = probes
            .into_iter()
            .map(|p| Observation::new(p.clone(), SignClass::Zero))
            .collect();
        self.best_observation(&obs).map(|i| obs[i].inputs.clone())
    }

    /// Index of the candidate observation (class ignored) that splits the
    /// hypotheses best.
    pub fn best_observation(&self, candidates: &[Observation]) -> Option<usize> {
        let total = self.total_mass();
        let mut best: Option<(f64, usize)> = None;
        for (i, o) in candidates.iter().enumerate() {
            let w = self.worst_case(o);
            if w < total && best.is_none_or(|(bw, _)| w < bw) {
                best = Some((w, i));
            }
        }
        best.map(|(_, i)| i)
    }
}

fn class_index(c: SignClass) -> usize {
    match c {
        SignClass::Negative => 0,
        SignClass::Zero => 1,
        SignClass::Positive => 2,
    }
}

/// Integer arithmetic shared by fixed-point and binary neurons.
#[derive(Clone, Copy, Debug, Default)]
pub struct IntArith;

impl NeuronArith for IntArith {
    type W = i64;
    type B = i64;
    fn pre_activation(&self, bias: i64, terms: &[(f64, i64)]) -> f64 {
        terms.iter().fold(bias, |acc, &(v, w)| acc + v as i64 * w) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_integer_weight_collision() {
        // b = 10, weight in {-6, -7, -8} all give ceil(10/|w|) = 2.
        let mut e = Engine::new(
            IntArith,
            vec![Branch {
                bias: 10,
                candidates: vec![vec![-6, -7, -8], vec![1]],
            }],
        );
        let truth = |x: &[(usize, f64)]| {
            let w = [-7i64, 1];
            SignClass::of_i64(10 + x.iter().map(|&(k, v)| v as i64 * w[k]).sum::<i64>())
        };
        let probes: Vec<Vec<(usize, f64)>> = (0..=20)
            .flat_map(|a| (0..=20).map(move |c| vec![(0, a as f64), (1, c as f64)]))
            .collect();
        for _ in 0..5 {
            if e.is_resolved() {
                break;
            }
            let p = e.best_probe(&probes).expect("a splitting probe exists");
            let class = truth(&p);
            e.observe(Observation::new(p, class));
        }
        assert!(e.is_resolved());
        assert_eq!(e.settled(0), Some(-7));
    }

    #[test]
    fn contradicting_branch_dies() {
        let mut e = Engine::new(
            IntArith,
            vec![
                Branch {
                    bias: 5,
                    candidates: vec![vec![-1]],
                },
                Branch {
                    bias: 6,
                    candidates: vec![vec![-1]],
                },
            ],
        );
        e.observe(Observation::new(vec![(0, 5.0)], SignClass::Zero));
        assert_eq!(e.branches.len(), 1);
        assert_eq!(e.branches[0].bias, 5);
    }
}

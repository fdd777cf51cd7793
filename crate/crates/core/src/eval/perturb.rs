//! Robustness perturbations of test states.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_state, Dataset, ProofState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    /// Permute each case's hypotheses.
    ShuffleContext,
    /// Delete a fraction of the hypotheses of long contexts.
    RemoveContext,
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shuffle" | "shuffle_context" => Ok(PerturbKind::ShuffleContext),
            "remove" | "remove_context" => Ok(PerturbKind::RemoveContext),
            _ => Err(Error::InvalidArgument(format!("unknown perturbation `{s}` (expected shuffle or remove)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    /// Fraction of queries perturbed.
    pub ratio: f64,
    #[serde(default = "default_removal")]
    pub removal_fraction: f64,
    #[serde(default = "default_min_context")]
    pub min_context: usize,
    pub seed: u64,
}

fn default_removal() -> f64 {
    0.2
}

fn default_min_context() -> usize {
    15
}

impl PerturbationSpec {
    pub fn new(kind: PerturbKind, ratio: f64, seed: u64) -> Self {
        PerturbationSpec {
            kind,
            ratio,
            removal_fraction: default_removal(),
            min_context: default_min_context(),
            seed,
        }
    }

    /// Hypotheses removed from a context of length `n`.
    pub fn removal_count(&self, n: usize) -> usize {
        if n < self.min_context {
            0
        } else {
            ((self.removal_fraction * n as f64).round() as usize).max(1).min(n)
        }
    }
}

/// Perturbs every case of `state`.
pub fn perturb_state(state: &ProofState, spec: &PerturbationSpec, rng: &mut impl Rng) -> ProofState {
    let mut out = state.clone();
    for case in &mut out.cases {
        match spec.kind {
            PerturbKind::ShuffleContext => case.hypotheses.shuffle(rng),
            PerturbKind::RemoveContext => {
                let n = case.hypotheses.len();
                let drop = spec.removal_count(n);
                if drop > 0 {
                    let mut gone = vec![false; n];
                    for i in index::sample(rng, n, drop) {
                        gone[i] = true;
                    }
                    let mut i = 0;
                    case.hypotheses.retain(|_| {
                        i += 1;
                        !gone[i - 1]
                    });
                }
            }
        }
    }
    out
}

/// Perturbs `round(ratio·n)` seed-selected pairs of `dataset`, re-rendering
/// their states. Positives and pair order are unchanged.
pub fn perturb(dataset: &Dataset, spec: &PerturbationSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(Error::InvalidArgument("perturbation ratio must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = dataset.len();
    let chosen = ((spec.ratio * n as f64).round() as usize).min(n);
    let mut picked = index::sample(&mut rng, n, chosen).into_vec();
    picked.sort_unstable();
    let mut out = dataset.clone();
    for i in picked {
        let pair = &mut out.pairs[i];
        pair.state = perturb_state(&pair.state, spec, &mut rng);
        pair.rendered = render_state(&pair.state);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyps(n: usize) -> ProofState {
        ProofState::single((0..n).map(|i| format!("h{i} : P{i}")).collect(), "Q")
    }

    #[test]
    fn removal_counts() {
        let spec = PerturbationSpec::new(PerturbKind::RemoveContext, 1.0, 0);
        assert_eq!(spec.removal_count(20), 4);
        assert_eq!(spec.removal_count(10), 0);
        assert_eq!(spec.removal_count(15), 3);
        assert_eq!(spec.removal_count(17), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = perturb_state(&hyps(20), &spec, &mut rng);
        assert_eq!(s.cases[0].hypotheses.len(), 16);
        let kept = &s.cases[0].hypotheses;
        let orig = &hyps(20).cases[0].hypotheses;
        // Survivors keep their relative order.
        let pos: Vec<usize> = kept.iter().map(|h| orig.iter().position(|o| o == h).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(perturb_state(&hyps(10), &spec, &mut rng), hyps(10));
    }

    #[test]
    fn shuffle_keeps_multiset() {
        let spec = PerturbationSpec::new(PerturbKind::ShuffleContext, 1.0, 0);
        let s = perturb_state(&hyps(12), &spec, &mut ChaCha8Rng::seed_from_u64(2));
        let mut a = s.cases[0].hypotheses.clone();
        let mut b = hyps(12).cases[0].hypotheses.clone();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("remove".parse::<PerturbKind>().unwrap(), PerturbKind::RemoveContext);
        assert!("drop".parse::<PerturbKind>().is_err());
    }
}

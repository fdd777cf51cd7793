use std::collections::HashSet;

use premsel_core::corpus::{premise_freq, proof_length, split, Proof, ProofState, SplitSpec, SplitStrategy, TacticStep};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn proof(name: String, premises_per_step: Vec<Vec<String>>) -> Proof {
    Proof {
        theorem: name,
        steps: premises_per_step
            .into_iter()
            .map(|premises| TacticStep {
                state_before: ProofState::single(vec![], "P"),
                tactic: "simp".into(),
                premises,
                state_after: ProofState::terminal(),
            })
            .collect(),
    }
}

/// Proofs with 1..=20 steps and 0..=4 premises per step drawn from a pool.
fn random_proofs(n: usize, pool: usize, seed: u64) -> Vec<Proof> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=20);
            let per_step = rng.random_range(0..=4);
            let steps = (0..len)
                .map(|_| (0..rng.random_range(0..=per_step)).map(|_| format!("p{}", rng.random_range(0..pool))).collect())
                .collect();
            proof(format!("t{i}"), steps)
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn paper_scale_counts() {
    let proofs: Vec<Proof> = (0..69_567).map(|i| proof(format!("t{i}"), vec![vec![format!("p{}", i % 97)]; 1 + i % 5])).collect();
    for strategy in [SplitStrategy::Random, SplitStrategy::ProofLength, SplitStrategy::PremiseFrequency] {
        let a = split(&proofs, &SplitSpec { strategy, seed: 1, n_val: 2000, n_test: 2000 }).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (65_567, 2000, 2000), "{strategy}");
    }
}

#[test]
fn weighted_strategies_raise_the_held_out_mean() {
    for seed in 0..50 {
        let proofs = random_proofs(600, 200, 1000 + seed);
        for (strategy, stat) in [
            (SplitStrategy::ProofLength, (|p: &Proof| proof_length(p) as f64) as fn(&Proof) -> f64),
            (SplitStrategy::PremiseFrequency, |p: &Proof| premise_freq(p).unwrap()),
        ] {
            let a = split(&proofs, &SplitSpec { strategy, seed, n_val: 0, n_test: 60 }).unwrap();
            let test = mean(a.test.iter().map(|&i| stat(&proofs[i])));
            let train = mean(a.train.iter().map(|&i| stat(&proofs[i])));
            assert!(test > train, "{strategy} seed {seed}: test {test} train {train}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reference_isolation_is_exact(seed in 0u64..1000, n in 20usize..120, pool in 10usize..200, n_val in 0usize..5, n_test in 1usize..6) {
        let proofs = random_proofs(n, pool, seed);
        let a = split(&proofs, &SplitSpec { strategy: SplitStrategy::ReferenceIsolated, seed, n_val, n_test }).unwrap();
        let cited = |ix: &[usize]| -> HashSet<String> {
            ix.iter().flat_map(|&i| proofs[i].steps.iter().flat_map(|s| s.premises.iter().cloned())).collect()
        };
        let held: Vec<usize> = a.val.iter().chain(&a.test).copied().collect();
        prop_assert!(cited(&a.train).is_disjoint(&cited(&held)));
        prop_assert_eq!((a.val.len(), a.test.len()), (n_val, n_test));
        let all: HashSet<usize> = a.train.iter().chain(&held).copied().collect();
        prop_assert_eq!(all.len(), a.train.len() + held.len());
    }

    #[test]
    fn every_strategy_is_a_seeded_partition(seed in 0u64..1000, n in 10usize..80, code in 0usize..4) {
        let strategy = [SplitStrategy::Random, SplitStrategy::ReferenceIsolated, SplitStrategy::ProofLength, SplitStrategy::PremiseFrequency][code];
        let proofs = random_proofs(n, 50, seed);
        let spec = SplitSpec { strategy, seed, n_val: 3, n_test: 4 };
        let a = split(&proofs, &spec).unwrap();
        prop_assert_eq!(&a, &split(&proofs, &spec).unwrap());
        let mut seen: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), a.train.len() + 7);
        if strategy != SplitStrategy::ReferenceIsolated {
            prop_assert_eq!(a.train.len(), n - 7);
        }
    }
}

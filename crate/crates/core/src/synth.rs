//! Planted synthetic corpora with a known answer.
//!
//! Every premise owns a unique made-up keyword that appears in its goal and
//! in every proof state it is used in, and nowhere else. Everything else is
//! drawn from a small shared pool of filler identifiers, so lexical overlap
//! on the keyword is the only signal linking a state to its premise.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Premise, Proof, ProofState, StateCase, TacticStep};
use crate::Result;

const SYLLABLES: [&str; 24] = [
    "ka", "ro", "mi", "tu", "zel", "van", "po", "qui", "dra", "sen", "lo", "fex", "bri", "nu", "jat", "gor", "wi", "hal", "tem", "yas", "cor", "pix",
    "mun", "sha",
];

const FILLER_FNS: [&str; 16] = [
    "add", "mul", "sub", "succ", "pred", "abs", "neg", "gcd", "lcm", "pow", "min", "max", "sqrt", "card", "sum", "prod",
];
const FILLER_TYPES: [&str; 4] = ["Nat", "Int", "Real", "Rat"];
const FILLER_RELS: [&str; 4] = ["=", "≤", "<", "≠"];
const VARS: [&str; 6] = ["a", "b", "c", "x", "y", "n"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_premises: usize,
    pub n_proofs: usize,
    pub steps_per_proof: usize,
    pub n_modules: usize,
    /// Fraction of premises with an empty argument list.
    pub no_args_fraction: f64,
    /// Upper bound on filler hypotheses per state (at least one is drawn).
    pub max_hypotheses: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_premises: 100,
            n_proofs: 100,
            steps_per_proof: 2,
            n_modules: 10,
            no_args_fraction: 0.2,
            max_hypotheses: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub corpus: Corpus,
    pub proofs: Vec<Proof>,
    /// Keyword of each premise, by id.
    pub keys: Vec<String>,
}

fn filler_term(rng: &mut impl Rng, depth: usize) -> String {
    let v = *VARS.choose(rng).expect("vars");
    if depth == 0 || rng.random_bool(0.4) {
        return v.to_string();
    }
    let f = FILLER_FNS.choose(rng).expect("fns");
    format!("{f} ({}) {}", filler_term(rng, depth - 1), VARS.choose(rng).expect("vars"))
}

fn filler_hyp(rng: &mut impl Rng, i: usize) -> String {
    if rng.random_bool(0.5) {
        let ty = FILLER_TYPES.choose(rng).expect("types");
        format!("{} {} : {ty}", VARS.choose(rng).expect("vars"), VARS.choose(rng).expect("vars"))
    } else {
        let rel = FILLER_RELS.choose(rng).expect("rels");
        format!("h{i} : {} {rel} {}", filler_term(rng, 1), filler_term(rng, 1))
    }
}

fn make_keys(rng: &mut impl Rng, n: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut keys = Vec::with_capacity(n);
    while keys.len() < n {
        let k: String = (0..3).map(|_| *SYLLABLES.choose(rng).expect("syllables")).collect();
        if seen.insert(k.clone()) {
            keys.push(k);
        }
    }
    keys
}

fn keyed_state(rng: &mut impl Rng, key: &str, max_hyps: usize) -> ProofState {
    let n_hyps = rng.random_range(1..=max_hyps.max(1));
    let hyps = (0..n_hyps).map(|i| filler_hyp(rng, i)).collect();
    let rel = FILLER_RELS.choose(rng).expect("rels");
    let goal = format!("{} ({key} {} {}) {rel} {}", FILLER_FNS.choose(rng).expect("fns"), VARS.choose(rng).expect("vars"), VARS.choose(rng).expect("vars"), filler_term(rng, 2));
    ProofState {
        cases: vec![StateCase::new(hyps, goal)],
    }
}

/// Generates a corpus where each premise is used by exactly
/// `n_proofs * steps_per_proof / n_premises` steps (rounded by cycling) and
/// every rendered state is distinct. Consecutive steps do not chain.
pub fn generate(config: &SynthConfig) -> Result<Synthetic> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let keys = make_keys(&mut rng, config.n_premises);
    let n_modules = config.n_modules.max(1);
    let premises = keys.iter().enumerate().map(|(i, key)| {
        let args = if rng.random_bool(config.no_args_fraction) {
            Vec::new()
        } else {
            let ty = FILLER_TYPES.choose(&mut rng).expect("types");
            vec![format!("x y : {ty}"), format!("h : {} x {} y", key, FILLER_RELS.choose(&mut rng).expect("rels"))]
        };
        let goal = format!("{key} x y = {}", filler_term(&mut rng, 2));
        Premise {
            id: 0,
            name: format!("Synth.M{}.{key}_{i}", i % n_modules),
            module: format!("Synth.M{}", i % n_modules),
            args,
            goal,
        }
    });
    let corpus = Corpus::from_premises(premises.collect::<Vec<_>>())?;

    let n_steps = config.n_proofs * config.steps_per_proof;
    let mut uses: Vec<usize> = (0..n_steps).map(|i| i % config.n_premises.max(1)).collect();
    uses.shuffle(&mut rng);
    let mut seen = HashSet::new();
    let mut fresh_state = |rng: &mut ChaCha8Rng, key: &str| loop {
        let s = keyed_state(rng, key, config.max_hypotheses);
        if seen.insert(crate::corpus::render_state(&s)) {
            return s;
        }
    };
    let mut proofs = Vec::with_capacity(config.n_proofs);
    for p in 0..config.n_proofs {
        let steps = (0..config.steps_per_proof)
            .map(|s| {
                let pid = uses[p * config.steps_per_proof + s];
                let premise = corpus.get(pid as u32).expect("premise id");
                let key = &keys[pid];
                TacticStep {
                    state_before: fresh_state(&mut rng, key),
                    tactic: format!("rw [{}]", premise.name),
                    premises: vec![premise.name.clone()],
                    state_after: fresh_state(&mut rng, key),
                }
            })
            .collect();
        proofs.push(Proof {
            theorem: format!("Synth.thm{p}"),
            steps,
        });
    }
    Ok(Synthetic { corpus, proofs, keys })
}

impl Synthetic {
    /// The corpus as ingestible JSON Lines.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in self.corpus.iter() {
            let rec = serde_json::json!({"kind": "premise", "name": p.name, "module": p.module, "args": p.args, "goal": p.goal});
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        for proof in &self.proofs {
            let rec = serde_json::json!({"kind": "proof", "theorem": proof.theorem, "steps": proof.steps});
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

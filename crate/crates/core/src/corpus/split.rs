use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{premise_freq, proof_length, Proof};
use crate::artifact;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitStrategy {
    /// Uniform random.
    #[serde(rename = "RD")]
    Random,
    /// No premise cited in val/test is cited in train.
    #[serde(rename = "RI")]
    ReferenceIsolated,
    /// Val/test drawn with probability proportional to proof length.
    #[serde(rename = "PL")]
    ProofLength,
    /// Val/test drawn with probability proportional to premise frequency.
    #[serde(rename = "PF")]
    PremiseFrequency,
}

impl SplitStrategy {
    pub fn code(self) -> &'static str {
        match self {
            SplitStrategy::Random => "RD",
            SplitStrategy::ReferenceIsolated => "RI",
            SplitStrategy::ProofLength => "PL",
            SplitStrategy::PremiseFrequency => "PF",
        }
    }
}

impl std::fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RD" => Ok(SplitStrategy::Random),
            "RI" => Ok(SplitStrategy::ReferenceIsolated),
            "PL" => Ok(SplitStrategy::ProofLength),
            "PF" => Ok(SplitStrategy::PremiseFrequency),
            other => Err(Error::InvalidArgument(format!("unknown split strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    pub seed: u64,
    pub n_val: usize,
    pub n_test: usize,
}

/// Indices into the input proof slice for each partition.
///
/// `train` keeps input order; `val` and `test` keep draw order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn materialize(&self, proofs: &[Proof]) -> (Vec<Proof>, Vec<Proof>, Vec<Proof>) {
        let pick = |ix: &[usize]| ix.iter().map(|&i| proofs[i].clone()).collect::<Vec<_>>();
        (pick(&self.train), pick(&self.val), pick(&self.test))
    }
}

pub fn split(proofs: &[Proof], spec: &SplitSpec) -> Result<SplitAssignment> {
    let held = spec.n_val + spec.n_test;
    if held > proofs.len() {
        return Err(Error::InsufficientProofs {
            requested: held,
            available: proofs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let drawn: Vec<usize> = match spec.strategy {
        SplitStrategy::Random | SplitStrategy::ReferenceIsolated => {
            index::sample(&mut rng, proofs.len(), held).into_vec()
        }
        SplitStrategy::ProofLength => {
            let w: Vec<f64> = proofs.iter().map(|p| proof_length(p) as f64).collect();
            weighted_without_replacement(&w, held, &mut rng)?
        }
        SplitStrategy::PremiseFrequency => {
            let w: Vec<f64> = proofs.iter().map(|p| premise_freq(p).unwrap_or(0.0)).collect();
            weighted_without_replacement(&w, held, &mut rng)?
        }
    };

    let val = drawn[..spec.n_val].to_vec();
    let test = drawn[spec.n_val..].to_vec();
    let held_set: HashSet<usize> = drawn.iter().copied().collect();

    let train: Vec<usize> = if spec.strategy == SplitStrategy::ReferenceIsolated {
        let held_premises: HashSet<&str> = drawn
            .iter()
            .flat_map(|&i| proofs[i].steps.iter())
            .flat_map(|s| s.premises.iter().map(String::as_str))
            .collect();
        (0..proofs.len())
            .filter(|i| !held_set.contains(i))
            .filter(|&i| {
                proofs[i]
                    .steps
                    .iter()
                    .all(|s| s.premises.iter().all(|p| !held_premises.contains(p.as_str())))
            })
            .collect()
    } else {
        (0..proofs.len()).filter(|i| !held_set.contains(i)).collect()
    };

    Ok(SplitAssignment { train, val, test })
}

/// Sequential weighted draws without replacement; weights renormalize after
/// every draw. Items with zero weight are never drawn.
fn weighted_without_replacement(weights: &[f64], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let available = weights.iter().filter(|w| **w > 0.0).count();
    if available < k {
        return Err(Error::InsufficientProofs {
            requested: k,
            available,
        });
    }
    let mut live: Vec<f64> = weights.iter().map(|w| w.max(0.0)).collect();
    let mut tree = Fenwick::new(&live);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total = tree.total();
        let target = rng.random::<f64>() * total;
        let mut i = tree.find(target).min(live.len() - 1);
        if live[i] <= 0.0 {
            // Accumulated rounding in the tree can land on a removed slot;
            // move to the nearest live item.
            i = (i..live.len())
                .chain((0..i).rev())
                .find(|&j| live[j] > 0.0)
                .expect("live item exists");
        }
        out.push(i);
        tree.add(i, -live[i]);
        live[i] = 0.0;
    }
    Ok(out)
}

struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    fn new(values: &[f64]) -> Self {
        let mut fw = Fenwick {
            tree: vec![0.0; values.len() + 1],
        };
        for (i, &v) in values.iter().enumerate() {
            fw.add(i, v);
        }
        fw
    }

    fn add(&mut self, i: usize, delta: f64) {
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut j = self.tree.len() - 1;
        let mut s = 0.0;
        while j > 0 {
            s += self.tree[j];
            j -= j & j.wrapping_neg();
        }
        s
    }

    /// Smallest index whose inclusive prefix sum exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub strategy: SplitStrategy,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub run_config: serde_json::Value,
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` (one JSON string theorem
/// name per line) and `manifest.json` into `dir`.
pub fn write_split(
    dir: impl AsRef<Path>,
    proofs: &[Proof],
    assignment: &SplitAssignment,
    spec: &SplitSpec,
    run_config: &serde_json::Value,
) -> Result<SplitManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut counts = BTreeMap::new();
    for (part, ix) in [("train", &assignment.train), ("val", &assignment.val), ("test", &assignment.test)] {
        let names: Vec<&str> = ix.iter().map(|&i| proofs[i].theorem.as_str()).collect();
        artifact::write_jsonl(dir.join(format!("{part}.jsonl")), &names)?;
        counts.insert(part.to_string(), ix.len());
    }
    let manifest = SplitManifest {
        format_version: artifact::FORMAT_VERSION,
        strategy: spec.strategy,
        seed: spec.seed,
        counts,
        run_config: run_config.clone(),
    };
    artifact::write_json(dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads the theorem names of one partition (`train`, `val` or `test`).
pub fn read_split_names(dir: impl AsRef<Path>, part: &str) -> Result<Vec<String>> {
    artifact::read_jsonl(dir.as_ref().join(format!("{part}.jsonl")))
}

//! Corpus and dataset data model.
//!
//! A corpus is the searchable library of premises; proofs are chains of
//! tactic steps, each citing the premises it used. [`build_dataset`] turns
//! proofs into `(state, positives)` training pairs and [`split`] produces the
//! four train/val/test partitions.

mod dataset;
mod ingest;
mod render;
mod split;
mod stats;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use dataset::{build_dataset, Dataset, DatasetPair};
pub use ingest::{ingest_corpus, ingest_reader, normalize_whitespace, IngestReport, Ingested, UnresolvedPremise};
pub use render::{parse_rendered_state, render_case, render_premise, render_state, RenderedPremise, GOAL_MARK, VAR_MARK};
pub use split::{read_split_names, split, write_split, SplitAssignment, SplitManifest, SplitSpec, SplitStrategy};
pub use stats::{premise_freq, proof_length};

pub type PremiseId = u32;

/// Goal string of the terminal proof state.
pub const NO_GOALS: &str = "No Goals";

/// A library theorem: argument list plus goal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Premise {
    pub id: PremiseId,
    pub name: String,
    pub module: String,
    pub args: Vec<String>,
    pub goal: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateCase {
    #[serde(default)]
    pub hypotheses: Vec<String>,
    pub goal: String,
}

impl StateCase {
    pub fn new(hypotheses: Vec<String>, goal: impl Into<String>) -> Self {
        StateCase {
            hypotheses,
            goal: goal.into(),
        }
    }
}

/// One or more cases; never empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProofState {
    pub cases: Vec<StateCase>,
}

impl ProofState {
    pub fn single(hypotheses: Vec<String>, goal: impl Into<String>) -> Self {
        ProofState {
            cases: vec![StateCase::new(hypotheses, goal)],
        }
    }

    pub fn terminal() -> Self {
        Self::single(Vec::new(), NO_GOALS)
    }

    pub fn is_terminal(&self) -> bool {
        self.cases.len() == 1 && self.cases[0].goal == NO_GOALS && self.cases[0].hypotheses.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TacticStep {
    pub state_before: ProofState,
    pub tactic: String,
    #[serde(default)]
    pub premises: Vec<String>,
    pub state_after: ProofState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proof {
    pub theorem: String,
    pub steps: Vec<TacticStep>,
}

/// The searchable premise library with a name lookup.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    premises: Vec<Premise>,
    by_name: HashMap<String, PremiseId>,
}

impl Corpus {
    /// Builds a corpus, assigning ids densely from 0 in the given order.
    pub fn from_premises(premises: impl IntoIterator<Item = Premise>) -> crate::Result<Self> {
        let mut corpus = Corpus::default();
        for p in premises {
            corpus.push(p)?;
        }
        Ok(corpus)
    }

    /// Appends a premise, overwriting its id with the next dense id.
    pub fn push(&mut self, mut premise: Premise) -> crate::Result<PremiseId> {
        if self.by_name.contains_key(&premise.name) {
            return Err(crate::Error::DuplicatePremise(premise.name));
        }
        let id = self.premises.len() as PremiseId;
        premise.id = id;
        self.by_name.insert(premise.name.clone(), id);
        self.premises.push(premise);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.premises.len()
    }

    pub fn is_empty(&self) -> bool {
        self.premises.is_empty()
    }

    pub fn get(&self, id: PremiseId) -> Option<&Premise> {
        self.premises.get(id as usize)
    }

    pub fn id_of(&self, name: &str) -> Option<PremiseId> {
        self.by_name.get(name).copied()
    }

    pub fn premises(&self) -> &[Premise] {
        &self.premises
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Premise> {
        self.premises.iter()
    }

    pub fn module_of(&self, id: PremiseId) -> Option<&str> {
        self.get(id).map(|p| p.module.as_str())
    }
}

/// Writes the premise list as a stamped JSON artifact.
pub fn save_corpus(path: impl AsRef<std::path::Path>, corpus: &Corpus, run_config: &serde_json::Value) -> crate::Result<()> {
    crate::artifact::write_stamped(path, corpus.premises(), run_config)
}

/// Reads a corpus written by [`save_corpus`]; ids must be dense and in order.
pub fn load_corpus(path: impl AsRef<std::path::Path>) -> crate::Result<Corpus> {
    let s: crate::artifact::Stamped<Vec<Premise>> = crate::artifact::read_stamped(path)?;
    for (i, p) in s.data.iter().enumerate() {
        if p.id as usize != i {
            return Err(crate::Error::Format(format!("premise `{}` has id {} at position {i}", p.name, p.id)));
        }
    }
    Corpus::from_premises(s.data)
}

pub fn save_proofs(path: impl AsRef<std::path::Path>, proofs: &[Proof], run_config: &serde_json::Value) -> crate::Result<()> {
    crate::artifact::write_stamped(path, proofs, run_config)
}

pub fn load_proofs(path: impl AsRef<std::path::Path>) -> crate::Result<Vec<Proof>> {
    Ok(crate::artifact::read_stamped(path)?.data)
}


#[cfg(test)]
mod tests {
    use super::testutil::premise;
    use super::*;

    #[test]
    fn ids_are_dense_and_names_unique() {
        let mut c = Corpus::from_premises([
            premise("A.x", "A", &[], "x"),
            premise("A.y", "A", &[], "y"),
        ])
        .unwrap();
        assert_eq!(c.id_of("A.y"), Some(1));
        assert!(matches!(
            c.push(premise("A.x", "B", &[], "z")),
            Err(crate::Error::DuplicatePremise(_))
        ));
        assert_eq!(c.push(premise("B.z", "B", &[], "z")).unwrap(), 2);
    }
}

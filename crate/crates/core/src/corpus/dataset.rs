use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{render_state, Corpus, PremiseId, Proof, ProofState};

/// A distinct proof state with the premises relevant to it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPair {
    pub state: ProofState,
    pub rendered: String,
    pub positives: BTreeSet<PremiseId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub pairs: Vec<DatasetPair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of `(state, positive premise)` training examples.
    pub fn n_examples(&self) -> usize {
        self.pairs.iter().map(|p| p.positives.len()).sum()
    }
}

/// Collects `(state, premises)` pairs from every tactic step that used at
/// least one resolvable premise. Both the state before and the state after
/// the step are paired with the step's premises; pairs whose rendered state
/// text coincides are merged and their positives unioned. Pairs keep the
/// order of first occurrence.
pub fn build_dataset(proofs: &[Proof], corpus: &Corpus) -> Dataset {
    let mut pairs: Vec<DatasetPair> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();

    for proof in proofs {
        for step in &proof.steps {
            let ids: BTreeSet<PremiseId> = step.premises.iter().filter_map(|n| corpus.id_of(n)).collect();
            if ids.is_empty() {
                continue;
            }
            for state in [&step.state_before, &step.state_after] {
                let rendered = render_state(state);
                match slot.get(&rendered) {
                    Some(&i) => pairs[i].positives.extend(ids.iter().copied()),
                    None => {
                        slot.insert(rendered.clone(), pairs.len());
                        pairs.push(DatasetPair {
                            state: state.clone(),
                            rendered,
                            positives: ids.clone(),
                        });
                    }
                }
            }
        }
    }
    Dataset { pairs }
}

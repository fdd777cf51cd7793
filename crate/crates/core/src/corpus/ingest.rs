use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Premise, Proof, ProofState, StateCase, TacticStep};
use crate::{Error, Result};

/// Collapses runs of whitespace to single spaces and trims the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Premise {
        name: String,
        #[serde(default)]
        module: String,
        #[serde(default)]
        args: Vec<String>,
        goal: String,
    },
    Proof {
        theorem: String,
        #[serde(default)]
        steps: Vec<RawStep>,
    },
}

#[derive(Deserialize)]
struct RawStep {
    state_before: RawState,
    #[serde(default)]
    tactic: String,
    #[serde(default)]
    premises: Vec<String>,
    state_after: RawState,
}

#[derive(Deserialize)]
struct RawState {
    #[serde(default)]
    cases: Vec<StateCase>,
}

/// A premise reference that did not resolve against the corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnresolvedPremise {
    pub theorem: String,
    pub step: usize,
    pub premise: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub premises: usize,
    pub proofs: usize,
    pub unresolved: Vec<UnresolvedPremise>,
    /// Steps whose `state_after` differs from the next step's `state_before`.
    pub chain_breaks: usize,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub corpus: Corpus,
    pub proofs: Vec<Proof>,
    pub report: IngestReport,
}

pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses a JSON-Lines corpus stream. Blank lines are skipped.
pub fn ingest_reader(reader: impl BufRead) -> Result<Ingested> {
    let mut corpus = Corpus::default();
    let mut proofs = Vec::new();
    let mut theorems = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let invalid = |message: &str| Error::Parse {
            line: line_no,
            message: message.to_string(),
        };
        match record {
            Record::Premise {
                name,
                module,
                args,
                goal,
            } => {
                let name = normalize_whitespace(&name);
                let goal = normalize_whitespace(&goal);
                if name.is_empty() {
                    return Err(invalid("premise name is empty"));
                }
                if goal.is_empty() {
                    return Err(invalid("premise goal is empty"));
                }
                corpus.push(Premise {
                    id: 0,
                    name,
                    module: module.trim().to_string(),
                    args: args.iter().map(|a| normalize_whitespace(a)).collect(),
                    goal,
                })?;
            }
            Record::Proof { theorem, steps } => {
                let theorem = normalize_whitespace(&theorem);
                if theorem.is_empty() {
                    return Err(invalid("proof theorem name is empty"));
                }
                if !theorems.insert(theorem.clone()) {
                    return Err(Error::DuplicateProof(theorem));
                }
                let steps = steps
                    .into_iter()
                    .map(|s| {
                        Ok(TacticStep {
                            state_before: convert_state(s.state_before).map_err(|m| invalid(&m))?,
                            tactic: normalize_whitespace(&s.tactic),
                            premises: s.premises.iter().map(|p| normalize_whitespace(p)).collect(),
                            state_after: convert_state(s.state_after).map_err(|m| invalid(&m))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                proofs.push(Proof { theorem, steps });
            }
        }
    }

    let mut report = IngestReport {
        premises: corpus.len(),
        proofs: proofs.len(),
        ..Default::default()
    };
    for proof in &proofs {
        for (i, step) in proof.steps.iter().enumerate() {
            for name in &step.premises {
                if corpus.id_of(name).is_none() {
                    report.unresolved.push(UnresolvedPremise {
                        theorem: proof.theorem.clone(),
                        step: i,
                        premise: name.clone(),
                    });
                }
            }
        }
        for (i, pair) in proof.steps.windows(2).enumerate() {
            if pair[0].state_after != pair[1].state_before {
                report.chain_breaks += 1;
                tracing::debug!(theorem = %proof.theorem, step = i, "state chain break");
            }
        }
    }
    if report.chain_breaks > 0 {
        tracing::warn!(count = report.chain_breaks, "proofs with inconsistent state chains");
    }
    if !report.unresolved.is_empty() {
        tracing::warn!(count = report.unresolved.len(), "unresolved premise references");
    }

    Ok(Ingested {
        corpus,
        proofs,
        report,
    })
}

fn convert_state(raw: RawState) -> std::result::Result<ProofState, String> {
    if raw.cases.is_empty() {
        return Ok(ProofState::terminal());
    }
    let cases = raw
        .cases
        .into_iter()
        .map(|c| {
            let goal = normalize_whitespace(&c.goal);
            if goal.is_empty() {
                return Err("state case goal is empty".to_string());
            }
            Ok(StateCase {
                hypotheses: c.hypotheses.iter().map(|h| normalize_whitespace(h)).collect(),
                goal,
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ProofState { cases })
}

use super::Proof;
use crate::{Error, Result};

/// Number of tactic steps.
pub fn proof_length(p: &Proof) -> usize {
    p.steps.len()
}

/// Mean number of cited premises per tactic step.
pub fn premise_freq(p: &Proof) -> Result<f64> {
    if p.steps.is_empty() {
        return Err(Error::EmptyProof(p.theorem.clone()));
    }
    let total: usize = p.steps.iter().map(|s| s.premises.len()).sum();
    Ok(total as f64 / p.steps.len() as f64)
}

//! Retrieve-then-rerank search over a premise index.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PremiseId};
use crate::reranker::Reranker;
use crate::retriever::{PremiseIndex, Retriever};
use crate::{Error, Exec, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub k: usize,
    /// First-stage depth when re-ranking.
    pub k1: usize,
    pub rerank: bool,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            k: 10,
            k1: 20,
            rerank: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: PremiseId,
    pub cfr_score: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank_probability: Option<f64>,
    /// 1-based.
    pub final_rank: usize,
}

/// Fails unless `index` was built by `retriever`'s encoder in its mode.
pub fn check_compatible(retriever: &Retriever, index: &PremiseIndex) -> Result<()> {
    if index.fingerprint() != retriever.fingerprint() {
        return Err(Error::Config(format!(
            "index was built with encoder {} but the retriever is {}",
            index.fingerprint(),
            retriever.fingerprint()
        )));
    }
    if index.mode() != retriever.mode || index.dim() != retriever.dim() {
        return Err(Error::Config("index mode or dimension differs from the retriever".into()));
    }
    Ok(())
}

/// Embeds `state_text`, takes the top `k` (or top `k1` when re-ranking)
/// from `index`, optionally re-ranks, and returns at most `k` hits.
pub fn search(
    retriever: &Retriever,
    index: &PremiseIndex,
    reranker: Option<&Reranker>,
    corpus: &Corpus,
    state_text: &str,
    params: SearchParams,
    exec: Exec,
) -> Result<Vec<SearchHit>> {
    if params.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if params.rerank && params.k > params.k1 {
        return Err(Error::InvalidArgument(format!("k ({}) exceeds k1 ({}) with re-ranking", params.k, params.k1)));
    }
    let query = retriever.embed_state_text(state_text)?;
    if !params.rerank {
        let hits = index.search(&query, params.k, exec)?;
        return Ok(hits
            .into_iter()
            .enumerate()
            .map(|(i, (id, s))| SearchHit {
                id,
                cfr_score: s,
                rerank_probability: None,
                final_rank: i + 1,
            })
            .collect());
    }
    let reranker = reranker.ok_or_else(|| Error::Config("re-ranking requested but no re-ranker is loaded".into()))?;
    let first = index.search(&query, params.k1, exec)?;
    let hits = reranker.rerank(state_text, corpus, &first, params.k, exec)?;
    Ok(hits
        .into_iter()
        .enumerate()
        .map(|(i, h)| SearchHit {
            id: h.id,
            cfr_score: h.cfr_score,
            rerank_probability: Some(h.probability),
            final_rank: i + 1,
        })
        .collect())
}

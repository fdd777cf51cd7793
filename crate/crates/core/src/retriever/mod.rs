//! Dense bi-encoder retrieval.
//!
//! States are embedded as the unit-normalized mean-pooled encoding of their
//! rendering. Premises are embedded either as a whole (conventional mode)
//! or as the average of the unit embeddings of their argument list and goal
//! (fine-grained mode). Scores are plain dot products.

mod index;
mod train;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use index::{build_index, insert_premise, IndexHeader, PremiseIndex, Segment, INDEX_MAGIC};
pub use train::{
    infonce_from_scores, infonce_loss, infonce_loss_and_grad, sample_negatives, train_retriever, ContrastiveBatch, PremiseInput,
    RetrieverTrainConfig, RetrieverTrainReport,
};

use crate::corpus::{render_premise, render_state, Premise, ProofState};
use crate::encoder::{encode_with_specials, Encoder, EncoderModel, Real};
use crate::tokenizer::Vocabulary;
use crate::{Error, Exec, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Cosine similarity against the whole rendered premise.
    Conventional,
    /// Dot product against the mean of unit argument and goal embeddings.
    #[default]
    FineGrained,
}

impl SimilarityMode {
    pub fn code(self) -> &'static str {
        match self {
            SimilarityMode::Conventional => "conv",
            SimilarityMode::FineGrained => "fine",
        }
    }
}

impl std::fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "conv" | "conventional" => Ok(SimilarityMode::Conventional),
            "fine" | "fine_grained" => Ok(SimilarityMode::FineGrained),
            _ => Err(Error::InvalidArgument(format!("unknown similarity mode `{s}` (expected conv or fine)"))),
        }
    }
}

/// Token budgets for retriever inputs, `[CLS]`/`[SEP]` included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextBudget {
    pub state: usize,
    pub premise: usize,
}

impl Default for TextBudget {
    fn default() -> Self {
        TextBudget { state: 512, premise: 256 }
    }
}

/// Token ids of a premise in the form each similarity mode consumes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PremiseTokens {
    pub whole: Vec<u32>,
    pub args: Option<Vec<u32>>,
    pub goal: Vec<u32>,
}

impl PremiseTokens {
    pub fn new(vocab: &Vocabulary, p: &Premise, max_len: usize) -> Self {
        let r = render_premise(p);
        PremiseTokens {
            whole: encode_with_specials(vocab, &r.full_text, max_len),
            args: (!r.args_text.is_empty()).then(|| encode_with_specials(vocab, &r.args_text, max_len)),
            goal: encode_with_specials(vocab, &r.goal_text, max_len),
        }
    }
}

/// Scales `v` to unit length, returning the original norm.
pub fn normalize_in_place<T: Real>(v: &mut [T]) -> Result<f64> {
    let norm = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    for x in v.iter_mut() {
        *x = T::of(x.as_f64() / norm);
    }
    Ok(norm)
}

/// Dot product accumulated left to right.
pub fn score(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Unit-normalized mean-pooled embedding of a token sequence.
pub fn embed_ids<T: Real>(enc: &Encoder<T>, ids: &[u32]) -> Result<Vec<T>> {
    let mut v = enc.forward(ids, None)?.pooled.to_vec();
    normalize_in_place(&mut v)?;
    Ok(v)
}

/// Combines unit argument and goal embeddings as `½(a + g)`, or returns the
/// goal embedding alone when there are no arguments. The result is not
/// re-normalized.
pub fn combine_fine<T: Real>(args: Option<&[T]>, goal: Vec<T>) -> Vec<T> {
    match args {
        None => goal,
        Some(a) => a.iter().zip(&goal).map(|(&x, &y)| T::of(0.5) * (x + y)).collect(),
    }
}

/// A trained bi-encoder together with its similarity mode and budgets.
#[derive(Clone, Debug)]
pub struct Retriever {
    pub model: EncoderModel,
    pub mode: SimilarityMode,
    pub budget: TextBudget,
}

impl Retriever {
    pub fn new(model: EncoderModel, mode: SimilarityMode) -> Self {
        Retriever {
            model,
            mode,
            budget: TextBudget::default(),
        }
    }

    /// Builds a retriever whose mode and budget come from the `retriever`
    /// section of the checkpoint's run config, with defaults for anything
    /// missing.
    pub fn from_model(model: EncoderModel) -> Result<Self> {
        let section = model.run_config.get("retriever");
        let mode = match section.and_then(|r| r.get("mode")) {
            Some(v) => serde_json::from_value(v.clone())?,
            None => SimilarityMode::default(),
        };
        let budget = match section.and_then(|r| r.get("budget")) {
            Some(v) => serde_json::from_value(v.clone())?,
            None => TextBudget::default(),
        };
        Ok(Retriever { model, mode, budget })
    }

    fn cap(&self, len: usize) -> usize {
        len.min(self.model.encoder.config.max_positions)
    }

    pub fn dim(&self) -> usize {
        self.model.encoder.config.hidden
    }

    pub fn fingerprint(&self) -> String {
        self.model.fingerprint()
    }

    pub fn state_ids(&self, text: &str) -> Vec<u32> {
        encode_with_specials(&self.model.vocab, text, self.cap(self.budget.state))
    }

    pub fn premise_tokens(&self, p: &Premise) -> PremiseTokens {
        PremiseTokens::new(&self.model.vocab, p, self.cap(self.budget.premise))
    }

    /// Unit embedding of already-rendered state text.
    pub fn embed_state_text(&self, text: &str) -> Result<Vec<f32>> {
        embed_ids(&self.model.encoder, &self.state_ids(text))
    }

    pub fn embed_state(&self, s: &ProofState) -> Result<Vec<f32>> {
        self.embed_state_text(&render_state(s))
    }

    pub fn embed_premise(&self, p: &Premise) -> Result<Vec<f32>> {
        self.embed_premise_tokens(&self.premise_tokens(p))
    }

    pub fn embed_premise_tokens(&self, t: &PremiseTokens) -> Result<Vec<f32>> {
        let enc = &self.model.encoder;
        match self.mode {
            SimilarityMode::Conventional => embed_ids(enc, &t.whole),
            SimilarityMode::FineGrained => {
                let goal = embed_ids(enc, &t.goal)?;
                let args = t.args.as_ref().map(|a| embed_ids(enc, a)).transpose()?;
                Ok(combine_fine(args.as_deref(), goal))
            }
        }
    }

    pub fn embed_premises(&self, premises: &[Premise], exec: Exec) -> Result<Vec<Vec<f32>>> {
        exec.map(premises, |p| self.embed_premise(p)).into_iter().collect()
    }
}

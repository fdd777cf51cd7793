//! Cross-encoder re-ranking.
//!
//! A state and a premise are packed into one sequence
//! `[CLS] state [SEP] premise [SEP]`; the relevance probability is
//! `σ(w·h_cls + b)`. Training contrasts one positive against hard negatives
//! mined from the retriever's top candidates.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_premise, Corpus, Dataset, Premise, PremiseId};
use crate::encoder::{accumulate_grads, mix_seed, AdamWConfig, Dropout, Encoder, EncoderModel, HeadIds, ParamStore, Real, Trainer};
use crate::retriever::{sample_negatives, PremiseIndex, Retriever};
use crate::tokenizer::{SpecialIds, Vocabulary};
use crate::{Error, Exec, Result};

/// Packs pre-tokenized state and premise content into
/// `[CLS] state [SEP] premise [SEP]` of at most `max_positions` ids.
///
/// The content budget `max_positions - 3` is split into a state share of
/// `ceil(budget / 2)` and a premise share of the rest. A side that needs
/// less than its share lends the slack to the other side.
pub fn pack_pair(special: SpecialIds, state: &[u32], premise: &[u32], max_positions: usize) -> Vec<u32> {
    let budget = max_positions.saturating_sub(3);
    let state_share = budget.div_ceil(2);
    let premise_share = budget - state_share;
    let (s, p) = if state.len() + premise.len() <= budget {
        (state.len(), premise.len())
    } else if state.len() <= state_share {
        (state.len(), budget - state.len())
    } else if premise.len() <= premise_share {
        (budget - premise.len(), premise.len())
    } else {
        (state_share, premise_share)
    };
    let mut ids = Vec::with_capacity(s + p + 3);
    ids.push(special.cls);
    ids.extend_from_slice(&state[..s]);
    ids.push(special.sep);
    ids.extend_from_slice(&premise[..p]);
    ids.push(special.sep);
    ids
}

/// Which loss normalizes the candidate group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankObjective {
    /// `-log(p_pos / Σ p)` over sigmoid probabilities.
    #[default]
    ProbabilityRatio,
    /// Softmax cross-entropy over the logits.
    SoftmaxLogits,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss of one candidate group (positive first) and its gradient with
/// respect to the logits.
pub fn group_loss_from_logits(logits: &[f64], objective: RerankObjective) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument("a candidate group needs a positive and at least one negative".into()));
    }
    match objective {
        RerankObjective::ProbabilityRatio => {
            let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let sum: f64 = p.iter().sum();
            if sum == 0.0 || p[0] == 0.0 {
                return Err(Error::InvalidArgument("all candidate probabilities are zero".into()));
            }
            // -log p0 computed as softplus(-z0) for stability.
            let z0 = logits[0];
            let neg_log_p0 = if z0 > 0.0 { (-z0).exp().ln_1p() } else { -z0 + z0.exp().ln_1p() };
            let loss = neg_log_p0 + sum.ln();
            let grad = p
                .iter()
                .enumerate()
                .map(|(j, &pj)| {
                    let from_sum = pj * (1.0 - pj) / sum;
                    if j == 0 {
                        from_sum - (1.0 - pj)
                    } else {
                        from_sum
                    }
                })
                .collect();
            Ok((loss, grad))
        }
        RerankObjective::SoftmaxLogits => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let grad = logits
                .iter()
                .enumerate()
                .map(|(j, z)| (z - lse).exp() - if j == 0 { 1.0 } else { 0.0 })
                .collect();
            Ok((lse - logits[0], grad))
        }
    }
}

fn head_ids<T>(enc: &Encoder<T>) -> Result<HeadIds> {
    enc.layout
        .head
        .ok_or_else(|| Error::Config("re-ranking requires an encoder with a relevance head".into()))
}

/// `w·h_cls + b` for one packed sequence.
pub fn logit<T: Real>(enc: &Encoder<T>, ids: &[u32]) -> Result<f64> {
    logit_with(enc, ids, None)
}

fn logit_with<T: Real>(enc: &Encoder<T>, ids: &[u32], dropout: Option<Dropout>) -> Result<f64> {
    let head = head_ids(enc)?;
    let out = enc.forward_with_dropout(ids, None, dropout)?;
    let w = enc.params.vec(head.w);
    let z = out.cls_hidden.iter().zip(w.iter()).map(|(h, w)| h.as_f64() * w.as_f64()).sum::<f64>() + enc.params.slice(head.b)[0].as_f64();
    Ok(z)
}

fn input_dropout(seed: Option<u64>, rate: f64, i: usize) -> Option<Dropout> {
    seed.map(|s| Dropout {
        rate,
        seed: mix_seed(s, i as u64),
    })
}

/// Mean group loss over `groups`; each group lists packed sequences with
/// the positive first.
pub fn rerank_loss<T: Real>(enc: &Encoder<T>, groups: &[Vec<Vec<u32>>], objective: RerankObjective, exec: Exec) -> Result<f64> {
    Ok(rerank_forward(enc, groups, objective, exec, None)?.0)
}

type Flat<'a> = Vec<(usize, &'a [u32])>;

fn rerank_forward<'a, T: Real>(
    enc: &Encoder<T>,
    groups: &'a [Vec<Vec<u32>>],
    objective: RerankObjective,
    exec: Exec,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<f64>, Flat<'a>)> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("empty re-ranking batch".into()));
    }
    let flat: Flat<'a> = groups.iter().enumerate().flat_map(|(g, seqs)| seqs.iter().map(move |s| (g, s.as_slice()))).collect();
    let rate = enc.config.dropout;
    let logits: Vec<f64> = exec
        .map_range(flat.len(), |i| logit_with(enc, flat[i].1, input_dropout(dropout_seed, rate, i)))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut dz = Vec::with_capacity(flat.len());
    let mut at = 0;
    let scale = 1.0 / groups.len() as f64;
    for seqs in groups {
        let (l, g) = group_loss_from_logits(&logits[at..at + seqs.len()], objective)?;
        loss += l * scale;
        dz.extend(g.into_iter().map(|x| x * scale));
        at += seqs.len();
    }
    Ok((loss, dz, flat))
}

/// Mean group loss and its exact gradient, head included.
pub fn rerank_loss_and_grad<T: Real>(
    enc: &Encoder<T>,
    groups: &[Vec<Vec<u32>>],
    objective: RerankObjective,
    exec: Exec,
    dropout_seed: Option<u64>,
) -> Result<(f64, ParamStore<T>)> {
    let head = head_ids(enc)?;
    let (loss, dz, flat) = rerank_forward(enc, groups, objective, exec, dropout_seed)?;
    let rate = enc.config.dropout;
    let w = enc.params.vec(head.w);
    let (_, grads) = accumulate_grads(enc, exec, flat.len(), |i, g| {
        let ids = flat[i].1;
        let (out, cache) = enc.forward_train(ids, None, input_dropout(dropout_seed, rate, i))?;
        let d = T::of(dz[i]);
        g.vec_mut(head.w).zip_mut_with(&out.cls_hidden, |a, &h| *a += d * h);
        g.slice_mut(head.b)[0] += d;
        let mut dh = Array2::zeros(out.last_hidden.dim());
        dh.row_mut(0).zip_mut_with(&w, |a, &wv| *a = d * wv);
        enc.backward(&cache, dh.view(), g);
        Ok(0.0)
    })?;
    Ok((loss, grads))
}

/// Uniformly samples `count` distinct non-positive ids from the retriever's
/// candidates, topping up from the whole corpus when the candidates run
/// short.
pub fn mine_hard_negatives(rng: &mut impl Rng, candidates: &[PremiseId], positives: &BTreeSet<PremiseId>, count: usize, corpus_len: usize) -> Vec<PremiseId> {
    let mut seen = BTreeSet::new();
    let pool: Vec<PremiseId> = candidates.iter().copied().filter(|p| !positives.contains(p) && seen.insert(*p)).collect();
    let take = count.min(pool.len());
    let mut out: Vec<PremiseId> = index::sample(rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
    if out.len() < count {
        let mut exclude = positives.clone();
        exclude.extend(out.iter().copied());
        out.extend(sample_negatives(rng, corpus_len, &exclude, count - out.len()));
    }
    out
}

/// A re-ranked candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankHit {
    pub id: PremiseId,
    pub cfr_score: f32,
    /// 0-based position in the first-stage list.
    pub cfr_rank: usize,
    pub probability: f64,
}

/// A trained cross-encoder.
#[derive(Clone, Debug)]
pub struct Reranker {
    pub model: EncoderModel,
    /// Token budget for each side before packing.
    pub max_side_len: usize,
}

impl Reranker {
    pub fn new(model: EncoderModel) -> Result<Self> {
        head_ids(&model.encoder)?;
        Ok(Reranker { model, max_side_len: 1024 })
    }

    /// Like [`Reranker::new`], taking `max_side_len` from the `reranker`
    /// section of the checkpoint's run config when present.
    pub fn from_model(model: EncoderModel) -> Result<Self> {
        let side = model.run_config.pointer("/reranker/max_side_len").and_then(|v| v.as_u64());
        let mut r = Reranker::new(model)?;
        if let Some(side) = side {
            r.max_side_len = side as usize;
        }
        Ok(r)
    }

    fn vocab(&self) -> &Vocabulary {
        &self.model.vocab
    }

    pub fn pack(&self, state_text: &str, premise: &Premise) -> Vec<u32> {
        let v = self.vocab();
        let max = self.model.encoder.config.max_positions;
        let s = v.encode(state_text, self.max_side_len.min(max));
        let p = v.encode(&render_premise(premise).full_text, self.max_side_len.min(max));
        pack_pair(v.special(), &s, &p, max)
    }

    pub fn relevance(&self, state_text: &str, premise: &Premise) -> Result<f64> {
        Ok(sigmoid(logit(&self.model.encoder, &self.pack(state_text, premise))?))
    }

    /// Scores every first-stage candidate and returns the best `k`, by
    /// probability descending and then by first-stage rank.
    pub fn rerank(&self, state_text: &str, corpus: &Corpus, cfr: &[(PremiseId, f32)], k: usize, exec: Exec) -> Result<Vec<RerankHit>> {
        let scored = exec.map_range(cfr.len(), |rank| {
            let (id, cfr_score) = cfr[rank];
            let premise = corpus
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("candidate id {id} is not in the corpus")))?;
            Ok(RerankHit {
                id,
                cfr_score,
                cfr_rank: rank,
                probability: self.relevance(state_text, premise)?,
            })
        });
        let mut hits = scored.into_iter().collect::<Result<Vec<_>>>()?;
        hits.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.cfr_rank.cmp(&b.cfr_rank)));
        hits.truncate(k);
        Ok(hits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankTrainConfig {
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Group size: one positive plus hard negatives.
    pub candidates: usize,
    /// Depth of the retriever list that hard negatives come from.
    pub k1: usize,
    /// Depth re-ranked at inference.
    pub rerank_depth: usize,
    pub epochs: usize,
    pub objective: RerankObjective,
    pub max_side_len: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for RerankTrainConfig {
    fn default() -> Self {
        RerankTrainConfig {
            batch_size: 2,
            grad_accum: 8,
            candidates: 8,
            k1: 100,
            rerank_depth: 20,
            epochs: 1,
            objective: RerankObjective::ProbabilityRatio,
            max_side_len: 1024,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl RerankTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates < 2 {
            return Err(Error::Config("candidates must be at least 2".into()));
        }
        if self.rerank_depth > self.k1 {
            return Err(Error::Config("rerank_depth must not exceed k1".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.k1 == 0 {
            return Err(Error::Config("batch_size, grad_accum and k1 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RerankTrainReport {
    pub losses: Vec<f64>,
    pub examples: usize,
}

/// Trains the cross-encoder `enc` (which must carry a head) in place.
/// Hard-negative pools come from `retriever` searching `index` once per
/// dataset state; negatives are resampled from those pools every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_reranker(
    enc: &mut Encoder<f32>,
    vocab: &Vocabulary,
    dataset: &Dataset,
    corpus: &Corpus,
    retriever: &Retriever,
    index: &PremiseIndex,
    config: &RerankTrainConfig,
    exec: Exec,
) -> Result<RerankTrainReport> {
    config.validate()?;
    head_ids(enc)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let max = enc.config.max_positions;
    let side = config.max_side_len.min(max);
    let states: Vec<Vec<u32>> = dataset.pairs.iter().map(|p| vocab.encode(&p.rendered, side)).collect();
    let premises: Vec<Vec<u32>> = corpus.iter().map(|p| vocab.encode(&render_premise(p).full_text, side)).collect();
    let pools: Vec<Vec<PremiseId>> = exec
        .map(&dataset.pairs, |p| {
            let q = retriever.embed_state_text(&p.rendered)?;
            Ok(index.search(&q, config.k1, Exec::Sequential)?.into_iter().map(|h| h.0).collect())
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let mut items: Vec<(usize, PremiseId)> = dataset
        .pairs
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.positives.iter().map(move |&pid| (i, pid)))
        .collect();
    let steps_per_epoch = items.len().div_ceil(config.batch_size).div_ceil(config.grad_accum);
    let mut opt = config.optimizer.clone();
    opt.total_steps = steps_per_epoch * config.epochs;
    let mut trainer = Trainer::new(opt, &enc.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = RerankTrainReport {
        losses: Vec::with_capacity(steps_per_epoch * config.epochs),
        examples: items.len(),
    };
    let sp = vocab.special();

    for epoch in 0..config.epochs {
        items.shuffle(&mut rng);
        let batches: Vec<&[(usize, PremiseId)]> = items.chunks(config.batch_size).collect();
        for group in batches.chunks(config.grad_accum) {
            let built: Vec<Vec<Vec<Vec<u32>>>> = group
                .iter()
                .map(|chunk| {
                    chunk
                        .iter()
                        .map(|&(pi, pid)| {
                            let negs = mine_hard_negatives(&mut rng, &pools[pi], &dataset.pairs[pi].positives, config.candidates - 1, corpus.len());
                            std::iter::once(pid)
                                .chain(negs)
                                .map(|c| pack_pair(sp, &states[pi], &premises[c as usize], max))
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let drop_seed: u64 = rng.random();
            let loss = trainer.train_step(enc, built.len(), |e, i| {
                rerank_loss_and_grad(e, &built[i], config.objective, exec, Some(mix_seed(drop_seed, i as u64)))
            })?;
            tracing::debug!(epoch, step = trainer.step, loss, "reranker step");
            report.losses.push(loss);
        }
    }
    Ok(report)
}

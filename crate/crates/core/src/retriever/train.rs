//! Contrastive training of the bi-encoder with homogeneous in-batch
//! negatives.
//!
//! Every query in a batch is scored against the candidates of the whole
//! batch: its own positive, its own sampled negatives and every other
//! query's candidates. Candidates that are known positives of the query
//! (other than the one being trained) are removed from its pool.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_in_place, PremiseTokens, SimilarityMode, TextBudget};
use crate::corpus::{Corpus, Dataset, PremiseId};
use crate::encoder::{accumulate_grads, encode_with_specials, pooled_grad_to_hidden, AdamWConfig, Dropout, Encoder, ParamStore, Real, Trainer};
use crate::tokenizer::Vocabulary;
use crate::{Error, Exec, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PremiseInput {
    /// Whole rendered premise (conventional similarity).
    Whole(Vec<u32>),
    /// Argument list and goal encoded separately (fine-grained similarity).
    Split { args: Option<Vec<u32>>, goal: Vec<u32> },
}

impl PremiseInput {
    pub fn from_tokens(t: &PremiseTokens, mode: SimilarityMode) -> Self {
        match mode {
            SimilarityMode::Conventional => PremiseInput::Whole(t.whole.clone()),
            SimilarityMode::FineGrained => PremiseInput::Split {
                args: t.args.clone(),
                goal: t.goal.clone(),
            },
        }
    }
}

/// One InfoNCE batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub queries: Vec<Vec<u32>>,
    pub candidates: Vec<(PremiseId, PremiseInput)>,
    /// Index into `candidates` of each query's positive.
    pub positive: Vec<usize>,
    /// All known positives of each query.
    pub known_positives: Vec<BTreeSet<PremiseId>>,
}

impl ContrastiveBatch {
    fn validate(&self) -> Result<()> {
        let b = self.queries.len();
        if b == 0 || self.positive.len() != b || self.known_positives.len() != b {
            return Err(Error::InvalidArgument("inconsistent contrastive batch".into()));
        }
        if self.positive.iter().any(|&j| j >= self.candidates.len()) {
            return Err(Error::InvalidArgument("positive index out of range".into()));
        }
        Ok(())
    }

    /// `mask[i][j]` is true when candidate `j` belongs to query `i`'s pool.
    pub fn pool_mask(&self) -> Vec<Vec<bool>> {
        (0..self.queries.len())
            .map(|i| {
                self.candidates
                    .iter()
                    .enumerate()
                    .map(|(j, (pid, _))| j == self.positive[i] || !self.known_positives[i].contains(pid))
                    .collect()
            })
            .collect()
    }
}

/// InfoNCE from a score matrix: the mean over queries of
/// `-s[i][pos]/τ + logsumexp_{j in pool} s[i][j]/τ`.
/// Returns the loss and its gradient with respect to the scores.
pub fn infonce_from_scores(scores: &[Vec<f64>], positive: &[usize], mask: &[Vec<bool>], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let b = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (i, row) in scores.iter().enumerate() {
        let pos = positive[i];
        let logits: Vec<f64> = row.iter().map(|s| s / tau).collect();
        let max = logits
            .iter()
            .zip(&mask[i])
            .filter(|(_, m)| **m)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().zip(&mask[i]).filter(|(_, m)| **m).map(|(l, _)| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[pos];
        let g = logits
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let p = if mask[i][j] { (l - lse).exp() } else { 0.0 };
                let t = if j == pos { 1.0 } else { 0.0 };
                (p - t) / (tau * b)
            })
            .collect();
        grad.push(g);
    }
    Ok((loss / b, grad))
}

enum CandUnits {
    Whole(usize),
    Split(Option<usize>, usize),
}

struct Forwarded {
    units: Vec<Vec<u32>>,
    cand: Vec<CandUnits>,
    unit_vecs: Vec<Vec<f64>>,
    unit_norms: Vec<f64>,
    queries: Vec<Vec<f64>>,
    cands: Vec<Vec<f64>>,
}

fn unit_dropout(seed: Option<u64>, rate: f64, u: usize) -> Option<Dropout> {
    seed.map(|s| Dropout {
        rate,
        seed: crate::encoder::mix_seed(s, u as u64),
    })
}

fn forward_batch<T: Real>(enc: &Encoder<T>, batch: &ContrastiveBatch, exec: Exec, dropout_seed: Option<u64>) -> Result<Forwarded> {
    batch.validate()?;
    let mut units: Vec<Vec<u32>> = batch.queries.clone();
    let mut cand = Vec::with_capacity(batch.candidates.len());
    for (_, input) in &batch.candidates {
        match input {
            PremiseInput::Whole(ids) => {
                units.push(ids.clone());
                cand.push(CandUnits::Whole(units.len() - 1));
            }
            PremiseInput::Split { args, goal } => {
                let a = args.as_ref().map(|a| {
                    units.push(a.clone());
                    units.len() - 1
                });
                units.push(goal.clone());
                cand.push(CandUnits::Split(a, units.len() - 1));
            }
        }
    }
    let rate = enc.config.dropout;
    let pooled = exec.map_range(units.len(), |u| {
        let out = enc.forward_with_dropout(&units[u], None, unit_dropout(dropout_seed, rate, u))?;
        let mut v: Vec<f64> = out.pooled.iter().map(|x| x.as_f64()).collect();
        let n = normalize_in_place(&mut v)?;
        Ok::<_, Error>((v, n))
    });
    let mut unit_vecs = Vec::with_capacity(units.len());
    let mut unit_norms = Vec::with_capacity(units.len());
    for p in pooled {
        let (v, n) = p?;
        unit_vecs.push(v);
        unit_norms.push(n);
    }
    let queries = (0..batch.queries.len()).map(|i| unit_vecs[i].clone()).collect();
    let cands = cand
        .iter()
        .map(|c| match *c {
            CandUnits::Whole(u) => unit_vecs[u].clone(),
            CandUnits::Split(None, g) => unit_vecs[g].clone(),
            CandUnits::Split(Some(a), g) => unit_vecs[a].iter().zip(&unit_vecs[g]).map(|(x, y)| 0.5 * (x + y)).collect(),
        })
        .collect();
    Ok(Forwarded {
        units,
        cand,
        unit_vecs,
        unit_norms,
        queries,
        cands,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn score_matrix(f: &Forwarded) -> Vec<Vec<f64>> {
    f.queries.iter().map(|q| f.cands.iter().map(|c| dot(q, c)).collect()).collect()
}

/// InfoNCE loss of `batch` at temperature `tau`, without dropout.
pub fn infonce_loss<T: Real>(enc: &Encoder<T>, batch: &ContrastiveBatch, tau: f64, exec: Exec) -> Result<f64> {
    let f = forward_batch(enc, batch, exec, None)?;
    infonce_from_scores(&score_matrix(&f), &batch.positive, &batch.pool_mask(), tau).map(|r| r.0)
}

/// InfoNCE loss and its exact gradient with respect to every encoder
/// parameter. With `dropout_seed` set, the encoder's dropout rate applies.
pub fn infonce_loss_and_grad<T: Real>(enc: &Encoder<T>, batch: &ContrastiveBatch, tau: f64, exec: Exec, dropout_seed: Option<u64>) -> Result<(f64, ParamStore<T>)> {
    let f = forward_batch(enc, batch, exec, dropout_seed)?;
    let (loss, ds) = infonce_from_scores(&score_matrix(&f), &batch.positive, &batch.pool_mask(), tau)?;

    let h = enc.config.hidden;
    let mut d_unit = vec![vec![0.0f64; h]; f.units.len()];
    for (i, row) in ds.iter().enumerate() {
        for (j, &g) in row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, c) in d_unit[i].iter_mut().zip(&f.cands[j]) {
                *d += g * c;
            }
            let add = |u: usize, w: f64, d: &mut Vec<Vec<f64>>| {
                for (dk, q) in d[u].iter_mut().zip(&f.queries[i]) {
                    *dk += w * g * q;
                }
            };
            match f.cand[j] {
                CandUnits::Whole(u) | CandUnits::Split(None, u) => add(u, 1.0, &mut d_unit),
                CandUnits::Split(Some(a), gl) => {
                    add(a, 0.5, &mut d_unit);
                    add(gl, 0.5, &mut d_unit);
                }
            }
        }
    }

    // Through the normalization: dx = (dy - y (y . dy)) / |x|.
    let d_pooled: Vec<Vec<f64>> = d_unit
        .iter()
        .enumerate()
        .map(|(u, dy)| {
            let y = &f.unit_vecs[u];
            let yd = dot(y, dy);
            dy.iter().zip(y).map(|(d, yv)| (d - yv * yd) / f.unit_norms[u]).collect()
        })
        .collect();

    let rate = enc.config.dropout;
    let (_, grads) = accumulate_grads(enc, exec, f.units.len(), |u, g| {
        if d_pooled[u].iter().all(|x| *x == 0.0) {
            return Ok(0.0);
        }
        let ids = &f.units[u];
        let (_, cache) = enc.forward_train(ids, None, unit_dropout(dropout_seed, rate, u))?;
        let dp = ndarray::Array1::from_iter(d_pooled[u].iter().map(|&x| T::of(x)));
        let dh = pooled_grad_to_hidden(dp.view(), cache.attend());
        enc.backward(&cache, dh.view(), g);
        Ok(0.0)
    })?;
    Ok((loss, grads))
}

/// Up to `count` distinct ids drawn uniformly from `0..corpus_len` minus
/// `exclude`.
pub fn sample_negatives(rng: &mut impl Rng, corpus_len: usize, exclude: &BTreeSet<PremiseId>, count: usize) -> Vec<PremiseId> {
    let excluded = exclude.iter().filter(|&&p| (p as usize) < corpus_len).count();
    let available = corpus_len - excluded;
    if available <= count {
        let mut all: Vec<PremiseId> = (0..corpus_len as PremiseId).filter(|p| !exclude.contains(p)).collect();
        all.shuffle(rng);
        return all;
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p = rng.random_range(0..corpus_len as PremiseId);
        if !exclude.contains(&p) && seen.insert(p) {
            out.push(p);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverTrainConfig {
    pub batch_size: usize,
    /// Candidates per query: one positive plus sampled negatives.
    pub candidates_per_positive: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub grad_accum: usize,
    pub mode: SimilarityMode,
    pub budget: TextBudget,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        RetrieverTrainConfig {
            batch_size: 32,
            candidates_per_positive: 2,
            temperature: 0.05,
            epochs: 1,
            grad_accum: 1,
            mode: SimilarityMode::FineGrained,
            budget: TextBudget::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl RetrieverTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be at least 1".into()));
        }
        if self.candidates_per_positive < 2 {
            return Err(Error::Config("candidates_per_positive must be at least 2".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrieverTrainReport {
    /// Mean loss per optimizer step.
    pub losses: Vec<f64>,
    /// Number of (state, positive) training examples per epoch.
    pub examples: usize,
}

/// Trains `enc` in place on every (state, positive premise) example of
/// `dataset`, reshuffled each epoch.
pub fn train_retriever(
    enc: &mut Encoder<f32>,
    vocab: &Vocabulary,
    dataset: &Dataset,
    corpus: &Corpus,
    config: &RetrieverTrainConfig,
    exec: Exec,
) -> Result<RetrieverTrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let cap = |n: usize| n.min(enc.config.max_positions);
    let states: Vec<Vec<u32>> = dataset
        .pairs
        .iter()
        .map(|p| encode_with_specials(vocab, &p.rendered, cap(config.budget.state)))
        .collect();
    let premises: Vec<PremiseInput> = corpus
        .iter()
        .map(|p| PremiseInput::from_tokens(&PremiseTokens::new(vocab, p, cap(config.budget.premise)), config.mode))
        .collect();
    let mut items: Vec<(usize, PremiseId)> = dataset
        .pairs
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.positives.iter().map(move |&pid| (i, pid)))
        .collect();

    let n_batches = items.len().div_ceil(config.batch_size);
    let steps_per_epoch = n_batches.div_ceil(config.grad_accum);
    let mut opt = config.optimizer.clone();
    opt.total_steps = steps_per_epoch * config.epochs;
    let mut trainer = Trainer::new(opt, &enc.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = RetrieverTrainReport {
        losses: Vec::with_capacity(steps_per_epoch * config.epochs),
        examples: items.len(),
    };

    for epoch in 0..config.epochs {
        items.shuffle(&mut rng);
        let batches: Vec<&[(usize, PremiseId)]> = items.chunks(config.batch_size).collect();
        for group in batches.chunks(config.grad_accum) {
            let built: Vec<ContrastiveBatch> = group
                .iter()
                .map(|chunk| {
                    let mut b = ContrastiveBatch {
                        queries: Vec::with_capacity(chunk.len()),
                        candidates: Vec::with_capacity(chunk.len() * config.candidates_per_positive),
                        positive: Vec::with_capacity(chunk.len()),
                        known_positives: Vec::with_capacity(chunk.len()),
                    };
                    for &(pi, pid) in chunk.iter() {
                        let positives = &dataset.pairs[pi].positives;
                        b.queries.push(states[pi].clone());
                        b.positive.push(b.candidates.len());
                        b.candidates.push((pid, premises[pid as usize].clone()));
                        for neg in sample_negatives(&mut rng, corpus.len(), positives, config.candidates_per_positive - 1) {
                            b.candidates.push((neg, premises[neg as usize].clone()));
                        }
                        b.known_positives.push(positives.clone());
                    }
                    b
                })
                .collect();
            let drop_seed: u64 = rng.random();
            let tau = config.temperature;
            let loss = trainer.train_step(enc, built.len(), |e, i| {
                infonce_loss_and_grad(e, &built[i], tau, exec, Some(crate::encoder::mix_seed(drop_seed, i as u64)))
            })?;
            tracing::debug!(epoch, step = trainer.step, loss, "retriever step");
            report.losses.push(loss);
        }
    }
    Ok(report)
}

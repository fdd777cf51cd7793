//! Masked-language-model pretraining.

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{gelu_array, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward};
use super::optim::{accumulate_grads, mix_seed};
use super::{AdamWConfig, Dropout, Encoder, ParamStore, Real, Trainer};
use crate::tokenizer::Vocabulary;
use crate::{Error, Exec, Result};

/// An input sequence with some positions corrupted, plus the original ids
/// at those positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub input: Vec<u32>,
    /// `(position, original id)` pairs, ascending by position.
    pub targets: Vec<(usize, u32)>,
}

/// Selects `max(1, round(rate * eligible))` non-special positions. Each is
/// replaced by `[MASK]` with probability 0.8, by a random non-special token
/// with probability 0.1, and left unchanged otherwise. Returns `None` when
/// the sequence has no non-special position.
pub fn mask_sequence(ids: &[u32], vocab: &Vocabulary, rate: f64, rng: &mut impl Rng) -> Option<MaskedSequence> {
    let eligible: Vec<usize> = (0..ids.len()).filter(|&i| !vocab.is_special(ids[i])).collect();
    if eligible.is_empty() {
        return None;
    }
    let n = ((rate * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
    let mut picked: Vec<usize> = index::sample(rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect();
    picked.sort_unstable();
    let first_ordinary = crate::tokenizer::SPECIAL_TOKENS.len() as u32;
    let mut input = ids.to_vec();
    let mut targets = Vec::with_capacity(n);
    for pos in picked {
        targets.push((pos, ids[pos]));
        let r: f64 = rng.random();
        if r < 0.8 {
            input[pos] = vocab.special().mask;
        } else if r < 0.9 && (vocab.len() as u32) > first_ordinary {
            input[pos] = rng.random_range(first_ordinary..vocab.len() as u32);
        }
    }
    Some(MaskedSequence { input, targets })
}

fn total_targets(batch: &[MaskedSequence]) -> Result<usize> {
    let n: usize = batch.iter().map(|s| s.targets.len()).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("masked-language-model batch has no masked position".into()));
    }
    Ok(n)
}

/// Cross-entropy summed over one sequence's targets; optionally backprops
/// `scale * d(sum)` into `grads`.
fn sequence_loss<T: Real>(enc: &Encoder<T>, seq: &MaskedSequence, dropout: Option<Dropout>, grads: Option<(&mut ParamStore<T>, T)>) -> Result<f64> {
    if seq.targets.is_empty() {
        return Ok(0.0);
    }
    let p = &enc.params;
    let mlm = &enc.layout.mlm;
    let (out, cache) = enc.forward_train(&seq.input, None, dropout)?;
    let rows: Vec<usize> = seq.targets.iter().map(|t| t.0).collect();
    let hsel = out.last_hidden.select(Axis(0), &rows);
    let pre = linear(&hsel.view(), p.mat(mlm.transform.w), p.vec(mlm.transform.b));
    let act = gelu_array(&pre);
    let (normed, ln_cache) = layer_norm(&act, p, mlm.ln, enc.config.layer_norm_eps);
    let logits = linear(&normed.view(), p.mat(mlm.decoder.w), p.vec(mlm.decoder.b));

    let mut loss = 0.0;
    let mut dlogits = Array2::<T>::zeros(logits.dim());
    for (r, &(_, target)) in seq.targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).as_f64().exp()).sum();
        let lse = max.as_f64() + sum.ln();
        loss += lse - row[target as usize].as_f64();
        for (j, &v) in row.iter().enumerate() {
            dlogits[[r, j]] = T::of((v.as_f64() - lse).exp());
        }
        dlogits[[r, target as usize]] -= T::one();
    }

    if let Some((grads, scale)) = grads {
        dlogits *= scale;
        let dnormed = linear_backward(&normed.view(), &dlogits, p, mlm.decoder, grads);
        let dact = layer_norm_backward(&dnormed, &ln_cache, p, mlm.ln, grads);
        let dpre = gelu_backward(&pre, &dact);
        let dsel = linear_backward(&hsel.view(), &dpre, p, mlm.transform, grads);
        let mut dh = Array2::zeros(out.last_hidden.dim());
        for (r, &row) in rows.iter().enumerate() {
            let mut d = dh.row_mut(row);
            d += &dsel.row(r);
        }
        enc.backward(&cache, dh.view(), grads);
    }
    Ok(loss)
}

fn dropout_for(enc_rate: f64, seed: Option<u64>, i: usize) -> Option<Dropout> {
    seed.map(|s| Dropout {
        rate: enc_rate,
        seed: mix_seed(s, i as u64),
    })
}

/// Mean cross-entropy over every masked position in the batch.
pub fn mlm_loss<T: Real>(enc: &Encoder<T>, batch: &[MaskedSequence], exec: Exec) -> Result<f64> {
    let n = total_targets(batch)?;
    let parts = exec.map(batch, |s| sequence_loss(enc, s, None, None));
    let mut sum = 0.0;
    for p in parts {
        sum += p?;
    }
    Ok(sum / n as f64)
}

/// Loss as in [`mlm_loss`] and its gradient. With `dropout_seed` set, the
/// encoder's dropout rate applies with per-sequence masks derived from it.
pub fn mlm_loss_and_grad<T: Real>(enc: &Encoder<T>, batch: &[MaskedSequence], exec: Exec, dropout_seed: Option<u64>) -> Result<(f64, ParamStore<T>)> {
    let n = total_targets(batch)?;
    let scale = T::of(1.0 / n as f64);
    let (sum, grads) = accumulate_grads(enc, exec, batch.len(), |i, g| {
        sequence_loss(enc, &batch[i], dropout_for(enc.config.dropout, dropout_seed, i), Some((g, scale)))
    })?;
    Ok((sum / n as f64, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub mask_rate: f64,
    pub max_len: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            batch_size: 32,
            grad_accum: 1,
            mask_rate: 0.15,
            max_len: 128,
            optimizer: AdamWConfig {
                lr: 5e-5,
                warmup_steps: 100,
                total_steps: 1000,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean masked-token loss per optimizer step.
    pub losses: Vec<f64>,
}

/// Encodes `text` as `[CLS] tokens [SEP]` within `max_len` positions.
pub fn encode_with_specials(vocab: &Vocabulary, text: &str, max_len: usize) -> Vec<u32> {
    let sp = vocab.special();
    let mut ids = Vec::with_capacity(max_len.min(64));
    ids.push(sp.cls);
    ids.extend(vocab.encode(text, max_len.saturating_sub(2)));
    ids.push(sp.sep);
    ids
}

/// MLM pretraining on `texts`. Batches are drawn uniformly with
/// replacement from a seeded generator, so runs are reproducible.
pub fn pretrain(enc: &mut Encoder<f32>, vocab: &Vocabulary, texts: &[String], config: &PretrainConfig, exec: Exec) -> Result<PretrainReport> {
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch_size == 0 || config.grad_accum == 0 {
        return Err(Error::Config("batch_size and grad_accum must be positive".into()));
    }
    let max_len = config.max_len.min(enc.config.max_positions);
    let encoded: Vec<Vec<u32>> = texts.iter().map(|t| encode_with_specials(vocab, t, max_len)).collect();
    let mut opt = config.optimizer.clone();
    opt.total_steps = config.steps;
    let mut trainer = Trainer::new(opt, &enc.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = PretrainReport::default();
    for step in 0..config.steps {
        let mut batches = Vec::with_capacity(config.grad_accum);
        for _ in 0..config.grad_accum {
            let mut batch = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size {
                let ids = &encoded[rng.random_range(0..encoded.len())];
                if let Some(m) = mask_sequence(ids, vocab, config.mask_rate, &mut rng) {
                    batch.push(m);
                } else if encoded.iter().all(|e| e.iter().all(|&t| vocab.is_special(t))) {
                    return Err(Error::InvalidArgument("no text contains a maskable token".into()));
                }
            }
            batches.push(batch);
        }
        let drop_seed = rng.random::<u64>();
        let loss = trainer.train_step(enc, config.grad_accum, |e, i| mlm_loss_and_grad(e, &batches[i], exec, Some(mix_seed(drop_seed, i as u64))))?;
        tracing::debug!(step, loss, "mlm step");
        report.losses.push(loss);
    }
    Ok(report)
}

//! AdamW with a linear warmup/decay schedule and gradient accumulation.

use serde::{Deserialize, Serialize};

use super::{Encoder, ParamStore, Real};
use crate::{Error, Exec, Result};

/// Examples per gradient-accumulation chunk. Fixed so that the floating-point
/// summation order never depends on the number of worker threads.
pub(crate) const GRAD_CHUNK: usize = 4;

/// splitmix64 finalizer, used to derive per-example seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `f(i, grads)` for `i in 0..n`, accumulating into per-chunk gradient
/// stores that are then summed in chunk order. Returns the sum of the values
/// returned by `f` together with the summed gradients.
pub fn accumulate_grads<T, F>(enc: &Encoder<T>, exec: Exec, n: usize, f: F) -> Result<(f64, ParamStore<T>)>
where
    T: Real,
    F: Fn(usize, &mut ParamStore<T>) -> Result<f64> + Sync + Send,
{
    let parts = exec.map_chunks(n, GRAD_CHUNK, |range| {
        let mut g = enc.zero_grads();
        let mut value = 0.0;
        for i in range {
            value += f(i, &mut g)?;
        }
        Ok::<_, Error>((value, g))
    });
    let mut total = 0.0;
    let mut stores = Vec::with_capacity(parts.len());
    for part in parts {
        let (v, g) = part?;
        total += v;
        stores.push(g);
    }
    Ok((total, ParamStore::sum_ordered(stores).unwrap_or_else(|| enc.zero_grads())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            total_steps: 1,
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    /// Learning rate for 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let left = self.total.saturating_sub(step);
        self.peak * left as f64 / span as f64
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: ParamStore<T>,
    v: ParamStore<T>,
    t: u32,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        AdamW {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update with learning rate `lr`. Weight decay is decoupled and
    /// applies only to tensors flagged for it.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let layout = params.layout().clone();
        for spec in layout.tensors() {
            let r = spec.offset..spec.offset + spec.len();
            let decay = if spec.decay { c.weight_decay } else { 0.0 };
            let p = &mut params.data_mut()[r.clone()];
            let g = &grads.data()[r.clone()];
            let m = &mut self.m.data_mut()[r.clone()];
            let v = &mut self.v.data_mut()[r];
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let pi = p[i].as_f64();
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps) + decay * pi;
                p[i] = T::of(pi - lr * update);
            }
        }
    }
}

/// Optimizer, schedule and step counter for one training run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub optimizer: AdamW<T>,
    pub schedule: LinearSchedule,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let schedule = LinearSchedule {
            peak: config.lr,
            warmup: config.warmup_steps,
            total: config.total_steps,
        };
        Trainer {
            optimizer: AdamW::new(config, params),
            schedule,
            step: 0,
        }
    }

    /// Runs `micro_batches` loss/gradient evaluations, averages them and
    /// applies one optimizer update. Returns the mean loss.
    ///
    /// `loss_and_grad(encoder, i)` evaluates micro-batch `i`; its loss and
    /// gradients must already be means over that micro-batch.
    pub fn train_step<F>(&mut self, enc: &mut Encoder<T>, micro_batches: usize, mut loss_and_grad: F) -> Result<f64>
    where
        F: FnMut(&Encoder<T>, usize) -> Result<(f64, ParamStore<T>)>,
    {
        if micro_batches == 0 {
            return Err(Error::InvalidArgument("micro_batches must be at least 1".into()));
        }
        let mut total_loss = 0.0;
        let mut grads = enc.zero_grads();
        for i in 0..micro_batches {
            let (loss, g) = loss_and_grad(enc, i)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    loss,
                    detail: format!("micro-batch {i} of {micro_batches}"),
                });
            }
            total_loss += loss;
            grads.add_assign(&g);
        }
        let inv = T::of(1.0 / micro_batches as f64);
        grads.scale(inv);
        let loss = total_loss / micro_batches as f64;
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss,
                detail: format!("gradient contains non-finite values (norm {})", grads.l2_norm()),
            });
        }
        let lr = self.schedule.lr(self.step);
        self.optimizer.step(&mut enc.params, &grads, lr);
        self.step += 1;
        Ok(loss)
    }
}

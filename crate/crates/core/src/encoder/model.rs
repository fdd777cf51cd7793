//! Forward pass with activation caching and the matching backward pass.
//!
//! Post-layernorm BERT layout:
//! `x = LN(tok[ids] + pos)`, then per layer
//! `h = LN(x + Attn(x))`, `x' = LN(h + W2·gelu(W1·h))`.
//! Weights are stored `(in, out)` so every projection is `y = x·W + b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Encoder, LayerIds, LinearIds, LnIds, ParamStore, Real};
use crate::{Error, Result};

/// Inverted dropout with a per-sequence seed, so masks are reproducible and
/// a forward/backward pair sees the same mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub last_hidden: Array2<T>,
    /// Mean of `last_hidden` over attended positions.
    pub pooled: Array1<T>,
    /// Row 0 of `last_hidden`.
    pub cls_hidden: Array1<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    attn_drop: Option<Array2<T>>,
    ln1: LnCache<T>,
    h1: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
    ff_drop: Option<Array2<T>>,
    ln2: LnCache<T>,
}

/// Activations saved by a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    ids: Vec<u32>,
    attend: Vec<bool>,
    emb_ln: LnCache<T>,
    emb_drop: Option<Array2<T>>,
    layers: Vec<LayerCache<T>>,
}

impl<T> ForwardCache<T> {
    pub fn attend(&self) -> &[bool] {
        &self.attend
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x)
}

pub(crate) fn gelu_array<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(gelu)
}

pub(crate) fn gelu_backward<T: Real>(pre: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut d = pre.mapv(gelu_grad);
    d *= dy;
    d
}

pub(crate) fn linear<T: Real>(x: &ArrayView2<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub(crate) fn linear_backward<T: Real>(
    x: &ArrayView2<T>,
    dy: &Array2<T>,
    params: &ParamStore<T>,
    ids: LinearIds,
    grads: &mut ParamStore<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grads.mat_mut(ids.w));
    let db = dy.sum_axis(Axis(0));
    grads.vec_mut(ids.b).zip_mut_with(&db, |a, b| *a += *b);
    dy.dot(&params.mat(ids.w).t())
}

pub(crate) fn layer_norm<T: Real>(x: &Array2<T>, params: &ParamStore<T>, ids: LnIds, eps: f64) -> (Array2<T>, LnCache<T>) {
    let (n, h) = x.dim();
    let hf = T::of(h as f64);
    let mut xhat = Array2::zeros((n, h));
    let mut inv_std = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / hf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hf;
        let is = (var + T::of(eps)).sqrt().recip();
        inv_std[i] = is;
        xhat.row_mut(i).zip_mut_with(&row, |o, &v| *o = (v - mean) * is);
    }
    let mut y = &xhat * &params.vec(ids.g);
    y += &params.vec(ids.b);
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<T: Real>(dy: &Array2<T>, cache: &LnCache<T>, params: &ParamStore<T>, ids: LnIds, grads: &mut ParamStore<T>) -> Array2<T> {
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    grads.vec_mut(ids.g).zip_mut_with(&dg, |a, b| *a += *b);
    let db = dy.sum_axis(Axis(0));
    grads.vec_mut(ids.b).zip_mut_with(&db, |a, b| *a += *b);

    let dxhat = dy * &params.vec(ids.g);
    let h = T::of(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let d = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = d.sum() / h;
        let m2 = d.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / h;
        let is = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = is * (d[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn dropout_mask<T: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), rate: f64) -> Array2<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < rate { T::zero() } else { keep })
}

/// Row-wise softmax restricted to attended keys; masked keys get exactly 0.
fn masked_softmax<T: Real>(scores: &mut Array2<T>, attend: &[bool]) {
    for mut row in scores.outer_iter_mut() {
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if attend[j] && v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if attend[j] {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Spreads a pooled-embedding gradient evenly over the attended rows.
pub fn pooled_grad_to_hidden<T: Real>(d_pooled: ArrayView1<T>, attend: &[bool]) -> Array2<T> {
    let count = attend.iter().filter(|a| **a).count().max(1);
    let scale = T::of(1.0 / count as f64);
    let mut d = Array2::zeros((attend.len(), d_pooled.len()));
    for (i, &a) in attend.iter().enumerate() {
        if a {
            d.row_mut(i).zip_mut_with(&d_pooled, |o, &g| *o = g * scale);
        }
    }
    d
}

impl<T: Real> Encoder<T> {
    fn validate_input(&self, ids: &[u32], attend: Option<&[bool]>) -> Result<Vec<bool>> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::UnknownTokenId(bad));
        }
        let attend = match attend {
            Some(a) if a.len() != ids.len() => {
                return Err(Error::InvalidArgument("attention mask length differs from sequence length".into()))
            }
            Some(a) => a.to_vec(),
            None => vec![true; ids.len()],
        };
        if !attend.iter().any(|a| *a) {
            return Err(Error::InvalidArgument("attention mask selects no position".into()));
        }
        Ok(attend)
    }

    /// Inference forward pass. `attend[i] == false` marks padding, which is
    /// excluded both as an attention key and from the pooled mean.
    pub fn forward(&self, ids: &[u32], attend: Option<&[bool]>) -> Result<ForwardOutput<T>> {
        self.run(ids, attend, None, false).map(|(out, _)| out)
    }

    /// Forward pass with dropout but without keeping activations.
    pub fn forward_with_dropout(&self, ids: &[u32], attend: Option<&[bool]>, dropout: Option<Dropout>) -> Result<ForwardOutput<T>> {
        self.run(ids, attend, dropout, false).map(|(out, _)| out)
    }

    /// Training forward pass returning the activation cache.
    pub fn forward_train(&self, ids: &[u32], attend: Option<&[bool]>, dropout: Option<Dropout>) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        self.run(ids, attend, dropout, true)
            .map(|(out, cache)| (out, cache.expect("cache requested")))
    }

    fn run(&self, ids: &[u32], attend: Option<&[bool]>, dropout: Option<Dropout>, keep: bool) -> Result<(ForwardOutput<T>, Option<ForwardCache<T>>)> {
        let attend = self.validate_input(ids, attend)?;
        let cfg = &self.config;
        let p = &self.params;
        let lay = &*self.layout;
        let n = ids.len();
        let h = cfg.hidden;
        let d = cfg.head_dim();
        let eps = cfg.layer_norm_eps;

        let dropout = dropout.filter(|dr| dr.rate > 0.0);
        let mut rng = dropout.map(|dr| ChaCha8Rng::seed_from_u64(dr.seed));
        let mut next_mask = |shape: (usize, usize)| -> Option<Array2<T>> {
            match (&mut rng, dropout) {
                (Some(rng), Some(dr)) => Some(dropout_mask(rng, shape, dr.rate)),
                _ => None,
            }
        };

        let tok = p.mat(lay.tok_emb);
        let pos = p.mat(lay.pos_emb);
        let mut emb = Array2::zeros((n, h));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = emb.row_mut(i);
            row.assign(&tok.row(id as usize));
            row += &pos.row(i);
        }
        let (mut x, emb_ln) = layer_norm(&emb, p, lay.emb_ln, eps);
        let emb_drop = next_mask((n, h));
        if let Some(m) = &emb_drop {
            x *= m;
        }

        let scale = T::of(1.0 / (d as f64).sqrt());
        let mut layer_caches = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });
        for l in &lay.layers {
            let xv = x.view();
            let q = linear(&xv, p.mat(l.q.w), p.vec(l.q.b));
            let k = linear(&xv, p.mat(l.k.w), p.vec(l.k.b));
            let v = linear(&xv, p.mat(l.v.w), p.vec(l.v.b));
            let mut ctx = Array2::zeros((n, h));
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let cols = s![.., head * d..(head + 1) * d];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t());
                sc *= scale;
                masked_softmax(&mut sc, &attend);
                ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let mut a = linear(&ctx.view(), p.mat(l.o.w), p.vec(l.o.b));
            let attn_drop = next_mask((n, h));
            if let Some(m) = &attn_drop {
                a *= m;
            }
            a += &x;
            let (h1, ln1) = layer_norm(&a, p, l.ln1, eps);

            let pre_act = linear(&h1.view(), p.mat(l.ff1.w), p.vec(l.ff1.b));
            let act = gelu_array(&pre_act);
            let mut f = linear(&act.view(), p.mat(l.ff2.w), p.vec(l.ff2.b));
            let ff_drop = next_mask((n, h));
            if let Some(m) = &ff_drop {
                f *= m;
            }
            f += &h1;
            let (out, ln2) = layer_norm(&f, p, l.ln2, eps);

            if keep {
                layer_caches.push(LayerCache {
                    x: std::mem::replace(&mut x, out),
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    attn_drop,
                    ln1,
                    h1,
                    pre_act,
                    act,
                    ff_drop,
                    ln2,
                });
            } else {
                x = out;
            }
        }

        let count = attend.iter().filter(|a| **a).count();
        let mut pooled = Array1::zeros(h);
        for (i, row) in x.outer_iter().enumerate() {
            if attend[i] {
                pooled += &row;
            }
        }
        pooled.mapv_inplace(|v| v / T::of(count as f64));
        let cls_hidden = x.row(0).to_owned();

        let cache = keep.then(|| ForwardCache {
            ids: ids.to_vec(),
            attend,
            emb_ln,
            emb_drop,
            layers: layer_caches,
        });
        Ok((
            ForwardOutput {
                last_hidden: x,
                pooled,
                cls_hidden,
            },
            cache,
        ))
    }

    /// Backpropagates `d_hidden` (gradient w.r.t. `last_hidden`) through the
    /// encoder, accumulating into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_hidden: ArrayView2<T>, grads: &mut ParamStore<T>) {
        let p = &self.params;
        let lay = &*self.layout;
        let cfg = &self.config;
        let d = cfg.head_dim();
        let scale = T::of(1.0 / (d as f64).sqrt());

        let mut dx = d_hidden.to_owned();
        for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(l, c, dx, scale, grads);
        }

        if let Some(m) = &cache.emb_drop {
            dx *= m;
        }
        let de = layer_norm_backward(&dx, &cache.emb_ln, p, lay.emb_ln, grads);
        {
            let mut dtok = grads.mat_mut(lay.tok_emb);
            for (i, &id) in cache.ids.iter().enumerate() {
                let mut row = dtok.row_mut(id as usize);
                row += &de.row(i);
            }
        }
        let mut dpos = grads.mat_mut(lay.pos_emb);
        for i in 0..cache.ids.len() {
            let mut row = dpos.row_mut(i);
            row += &de.row(i);
        }
    }

    fn layer_backward(&self, l: &LayerIds, c: &LayerCache<T>, dout: Array2<T>, scale: T, grads: &mut ParamStore<T>) -> Array2<T> {
        let p = &self.params;
        let d = self.config.head_dim();

        let dr2 = layer_norm_backward(&dout, &c.ln2, p, l.ln2, grads);
        let mut dh1 = dr2.clone();
        let mut df2 = dr2;
        if let Some(m) = &c.ff_drop {
            df2 *= m;
        }
        let dact = linear_backward(&c.act.view(), &df2, p, l.ff2, grads);
        let dpre = gelu_backward(&c.pre_act, &dact);
        dh1 += &linear_backward(&c.h1.view(), &dpre, p, l.ff1, grads);

        let dr1 = layer_norm_backward(&dh1, &c.ln1, p, l.ln1, grads);
        let mut dx = dr1.clone();
        let mut da = dr1;
        if let Some(m) = &c.attn_drop {
            da *= m;
        }
        let dctx = linear_backward(&c.ctx.view(), &da, p, l.o, grads);

        let mut dq = Array2::zeros(c.q.dim());
        let mut dk = Array2::zeros(c.k.dim());
        let mut dv = Array2::zeros(c.v.dim());
        for (head, probs) in c.probs.iter().enumerate() {
            let cols = s![.., head * d..(head + 1) * d];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
            let mut ds = Array2::zeros(probs.dim());
            for i in 0..probs.nrows() {
                let pr = probs.row(i);
                let dpr = dp.row(i);
                let dot = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for j in 0..probs.ncols() {
                    ds[[i, j]] = pr[j] * (dpr[j] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let xv = c.x.view();
        dx += &linear_backward(&xv, &dq, p, l.q, grads);
        dx += &linear_backward(&xv, &dk, p, l.k, grads);
        dx += &linear_backward(&xv, &dv, p, l.v, grads);
        dx
    }
}

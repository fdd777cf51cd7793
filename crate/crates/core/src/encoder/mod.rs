//! Transformer encoder with mean pooling, masked-language-model head and
//! exact hand-written gradients.
//!
//! The same backbone serves the bi-encoder retriever (mean-pooled
//! embeddings) and the cross-encoder re-ranker (the `[CLS]` row plus an
//! affine head). Models are generic over [`Real`] so training runs in `f32`
//! while gradient checks run in `f64`.

mod checkpoint;
mod mlm;
mod model;
mod optim;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{EncoderModel, ModelKind, CHECKPOINT_MAGIC};
pub use mlm::{encode_with_specials, mask_sequence, mlm_loss, mlm_loss_and_grad, pretrain, MaskedSequence, PretrainConfig, PretrainReport};
pub use model::{pooled_grad_to_hidden, Dropout, ForwardCache, ForwardOutput};
pub(crate) use optim::mix_seed;
pub use optim::{accumulate_grads, AdamW, AdamWConfig, LinearSchedule, Trainer};
pub use params::{Layout, ParamStore, TensorId, TensorSpec};

use crate::{Error, Result};

/// Floating-point element type of model tensors.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small configuration trainable on a laptop CPU.
    pub fn desk() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            hidden: 128,
            intermediate: 512,
            max_positions: 128,
            vocab_size: 4096,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
            seed: 0,
        }
    }

    /// BERT-style 6-layer retriever configuration.
    pub fn paper_retriever() -> Self {
        EncoderConfig {
            n_layers: 6,
            n_heads: 12,
            hidden: 768,
            intermediate: 3072,
            max_positions: 512,
            vocab_size: 30_522,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            seed: 0,
        }
    }

    /// Re-ranker variant with 1,024 positions.
    pub fn paper_reranker() -> Self {
        EncoderConfig {
            max_positions: 1024,
            ..Self::paper_retriever()
        }
    }

    /// Two layers, hidden 16: the gradient-check configuration.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            hidden: 16,
            intermediate: 32,
            max_positions: 32,
            vocab_size,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_heads == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return bad("hidden must be divisible by n_heads");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be at least 1");
        }
        if self.vocab_size == 0 || self.intermediate == 0 || self.n_layers == 0 {
            return bad("vocab_size, intermediate and n_layers must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIds {
    pub g: TensorId,
    pub b: TensorId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub w: TensorId,
    pub b: TensorId,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub ln1: LnIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
    pub ln2: LnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct MlmIds {
    pub transform: LinearIds,
    pub ln: LnIds,
    pub decoder: LinearIds,
}

/// Tensor handles of the relevance head `σ(w·h_cls + b)`.
#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub w: TensorId,
    pub b: TensorId,
}

/// Typed handles into a model's [`Layout`].
#[derive(Clone, Debug)]
pub struct EncoderLayout {
    pub(crate) tok_emb: TensorId,
    pub(crate) pos_emb: TensorId,
    pub(crate) emb_ln: LnIds,
    pub(crate) layers: Vec<LayerIds>,
    pub(crate) mlm: MlmIds,
    pub head: Option<HeadIds>,
}

impl EncoderLayout {
    pub fn build(config: &EncoderConfig, with_head: bool) -> (Self, Layout) {
        let mut l = Layout::default();
        let h = config.hidden;
        let linear = |l: &mut Layout, name: &str, i: usize, o: usize| LinearIds {
            w: l.push(format!("{name}.weight"), &[i, o], true),
            b: l.push(format!("{name}.bias"), &[o], false),
        };
        let ln = |l: &mut Layout, name: &str| LnIds {
            g: l.push(format!("{name}.gamma"), &[h], false),
            b: l.push(format!("{name}.beta"), &[h], false),
        };
        let tok_emb = l.push("embeddings.token", &[config.vocab_size, h], true);
        let pos_emb = l.push("embeddings.position", &[config.max_positions, h], true);
        let emb_ln = ln(&mut l, "embeddings.ln");
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("layers.{i}");
                LayerIds {
                    q: linear(&mut l, &format!("{p}.attention.query"), h, h),
                    k: linear(&mut l, &format!("{p}.attention.key"), h, h),
                    v: linear(&mut l, &format!("{p}.attention.value"), h, h),
                    o: linear(&mut l, &format!("{p}.attention.output"), h, h),
                    ln1: ln(&mut l, &format!("{p}.attention.ln")),
                    ff1: linear(&mut l, &format!("{p}.ffn.intermediate"), h, config.intermediate),
                    ff2: linear(&mut l, &format!("{p}.ffn.output"), config.intermediate, h),
                    ln2: ln(&mut l, &format!("{p}.ffn.ln")),
                }
            })
            .collect();
        let mlm = MlmIds {
            transform: linear(&mut l, "mlm.transform", h, h),
            ln: ln(&mut l, "mlm.ln"),
            decoder: linear(&mut l, "mlm.decoder", h, config.vocab_size),
        };
        let head = with_head.then(|| HeadIds {
            w: l.push("rerank_head.weight", &[h], true),
            b: l.push("rerank_head.bias", &[1], false),
        });
        (
            EncoderLayout {
                tok_emb,
                pos_emb,
                emb_ln,
                layers,
                mlm,
                head,
            },
            l,
        )
    }
}

/// A transformer encoder: configuration, layout handles and parameters.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub layout: Arc<EncoderLayout>,
    pub params: ParamStore<T>,
}

/// Truncated normal, resampled outside two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("valid std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

impl<T: Real> Encoder<T> {
    /// Fresh parameters: weights and embeddings from a truncated normal with
    /// std 0.02, biases zero, layer-norm scale one and offset zero.
    pub fn init(config: EncoderConfig, with_head: bool) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = EncoderLayout::build(&config, with_head);
        let specs = Arc::new(specs);
        let mut params = ParamStore::zeros(specs.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (i, spec) in specs.tensors().iter().enumerate() {
            let slice = params.slice_mut(TensorId(i));
            if spec.name.ends_with(".gamma") {
                slice.fill(T::one());
            } else if spec.name.ends_with(".weight") || spec.name.starts_with("embeddings.token") || spec.name.starts_with("embeddings.position") {
                for x in slice.iter_mut() {
                    *x = T::of(truncated_normal(&mut rng, 0.02));
                }
            }
        }
        Ok(Encoder {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn has_head(&self) -> bool {
        self.layout.head.is_some()
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Copy of this encoder with a freshly initialized relevance head (or
    /// without one). Tensors shared by name are carried over.
    pub fn with_head(&self, head: bool, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.seed = seed;
        let mut out = Encoder::<T>::init(config, head)?;
        out.config.seed = self.config.seed;
        let src = self.params.layout().clone();
        let dst = out.params.layout().clone();
        for (i, spec) in dst.tensors().iter().enumerate() {
            if let Some(j) = src.find(&spec.name) {
                out.params.slice_mut(TensorId(i)).copy_from_slice(self.params.slice(j));
            }
        }
        Ok(out)
    }

    pub fn zero_grads(&self) -> ParamStore<T> {
        self.params.zeros_like()
    }
}

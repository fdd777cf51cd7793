//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every parameter
//! as a little-endian `f32` in layout order.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Encoder, EncoderConfig, EncoderLayout, ParamStore, TensorSpec};
use crate::tokenizer::{TokenizerConfig, Vocabulary};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PREMSEL\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Backbone after masked-language-model pretraining.
    Pretrained,
    /// Bi-encoder for first-stage retrieval.
    Retriever,
    /// Cross-encoder with a relevance head.
    Reranker,
}

/// An encoder bundled with its vocabulary and the configuration of the run
/// that produced it.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub kind: ModelKind,
    pub encoder: Encoder<f32>,
    pub vocab: Vocabulary,
    pub run_config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: EncoderConfig,
    tokenizer: TokenizerConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorSpec>,
    #[serde(default)]
    run_config: serde_json::Value,
}

/// The part of the header that identifies the model, excluding run metadata.
#[derive(Serialize)]
struct Identity<'a> {
    kind: ModelKind,
    config: &'a EncoderConfig,
    tokenizer: &'a TokenizerConfig,
    vocab: &'a [String],
    tensors: &'a [TensorSpec],
}

impl EncoderModel {
    pub fn new(kind: ModelKind, encoder: Encoder<f32>, vocab: Vocabulary) -> Result<Self> {
        if vocab.len() > encoder.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the encoder embeds only {}",
                vocab.len(),
                encoder.config.vocab_size
            )));
        }
        Ok(EncoderModel {
            kind,
            encoder,
            vocab,
            run_config: serde_json::Value::Null,
        })
    }

    fn identity(&self) -> Identity<'_> {
        Identity {
            kind: self.kind,
            config: &self.encoder.config,
            tokenizer: self.vocab.config(),
            vocab: self.vocab.tokens(),
            tensors: self.encoder.params.layout().tensors(),
        }
    }

    /// Hex SHA-256 over the model identity and parameter bytes. Run
    /// metadata does not contribute.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.identity()).expect("serializable identity"));
        for x in self.encoder.params.data() {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            config: self.encoder.config.clone(),
            tokenizer: self.vocab.config().clone(),
            vocab: self.vocab.tokens().to_vec(),
            tensors: self.encoder.params.layout().tensors().to_vec(),
            run_config: self.run_config.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let data = self.encoder.params.data();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * data.len());
        out.write_all(CHECKPOINT_MAGIC).expect("vec write");
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).expect("vec write");
        out.write_all(&(header.len() as u64).to_le_bytes()).expect("vec write");
        out.write_all(&header).expect("vec write");
        for x in data {
            out.write_all(&x.to_le_bytes()).expect("vec write");
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        let short = |_| Error::Format("truncated checkpoint".into());
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(short)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(short)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        if r.len() < hlen {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])?;
        let payload = &r[hlen..];

        header.config.validate()?;
        let with_head = header.tensors.iter().any(|t| t.name.starts_with("rerank_head."));
        let (layout, specs) = EncoderLayout::build(&header.config, with_head);
        if specs.tensors() != header.tensors.as_slice() {
            return Err(Error::Format("tensor manifest does not match the configuration".into()));
        }
        if payload.len() != 4 * specs.len() {
            return Err(Error::Format(format!(
                "payload has {} bytes, manifest needs {}",
                payload.len(),
                4 * specs.len()
            )));
        }
        let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let params = ParamStore::from_data(Arc::new(specs), data)?;
        if !params.is_finite() {
            return Err(Error::Format("checkpoint contains non-finite parameters".into()));
        }
        let vocab = Vocabulary::from_tokens(header.vocab, header.tokenizer)?;
        let encoder = Encoder {
            config: header.config,
            layout: Arc::new(layout),
            params,
        };
        let mut model = EncoderModel::new(header.kind, encoder, vocab)?;
        model.run_config = header.run_config;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

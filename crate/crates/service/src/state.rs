use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use premsel_core::corpus::{load_corpus, Corpus, Premise, PremiseId};
use premsel_core::encoder::{EncoderModel, ModelKind};
use premsel_core::pipeline::check_compatible;
use premsel_core::reranker::Reranker;
use premsel_core::retriever::{insert_premise, PremiseIndex, Retriever};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] premsel_core::Error),
    #[error("append log {path}: {message}")]
    AppendLog { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
}

/// The fields a client supplies to add a premise; the id is assigned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewPremise {
    pub name: String,
    #[serde(default)]
    pub module: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub goal: String,
}

impl NewPremise {
    pub fn into_premise(self) -> Premise {
        Premise {
            id: 0,
            name: self.name,
            module: self.module,
            args: self.args,
            goal: self.goal,
        }
    }
}

/// Inserts add one index segment each; past this many they are merged.
const MAX_SEGMENTS: usize = 64;

/// Corpus and index as seen by one request.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub corpus: Corpus,
    pub index: PremiseIndex,
}

pub struct Models {
    pub retriever: Retriever,
    pub reranker: Option<Reranker>,
}

/// JSON-lines log of premises added at runtime, one [`NewPremise`] per line.
pub struct AppendLog {
    path: PathBuf,
    file: File,
}

impl AppendLog {
    fn err(path: &Path, message: impl ToString) -> ServiceError {
        ServiceError::AppendLog {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// Opens (creating if needed) the log and returns its complete records.
    /// A torn final line, left by a crash mid-write, is cut off.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<NewPremise>), ServiceError> {
        let path = path.as_ref();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| Self::err(path, e))?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(|e| Self::err(path, e))?;
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            tracing::warn!(path = %path.display(), bytes = text.len() - complete, "dropping torn append-log tail");
            file.set_len(complete as u64).map_err(|e| Self::err(path, e))?;
        }
        let mut records = Vec::new();
        for (i, line) in text[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line).map_err(|e| Self::err(path, format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok((
            AppendLog {
                path: path.to_path_buf(),
                file,
            },
            records,
        ))
    }

    pub fn append(&mut self, rec: &NewPremise) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(rec).map_err(|e| Self::err(&self.path, e))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Self::err(&self.path, e))?;
        self.file.sync_data().map_err(|e| Self::err(&self.path, e))
    }
}

/// Loaded models plus the current snapshot. Readers clone the snapshot
/// `Arc`; the single writer builds a new snapshot and swaps it in.
pub struct Engine {
    pub models: Models,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<AppendLog>,
}

#[derive(Debug, thiserror::Error)]
pub enum InsertError {
    #[error("premise `{0}` already exists")]
    Duplicate(String),
    #[error("invalid premise: {0}")]
    Invalid(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

impl Engine {
    pub fn new(models: Models, corpus: Corpus, index: PremiseIndex, log_path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        check_compatible(&models.retriever, &index)?;
        if index.len() != corpus.len() || index.ids().enumerate().any(|(i, id)| id as usize != i) {
            return Err(ServiceError::Config("index rows do not line up with the corpus".into()));
        }
        let (log, records) = AppendLog::open(log_path)?;
        let mut snap = Snapshot { corpus, index };
        let replayed = records.len();
        for rec in records {
            insert_premise(&mut snap.corpus, &mut snap.index, &models.retriever, rec.into_premise())?;
        }
        if replayed > 0 {
            snap.index.compact();
            tracing::info!(replayed, "replayed append log");
        }
        Ok(Engine {
            models,
            snapshot: RwLock::new(Arc::new(snap)),
            writer: Mutex::new(log),
        })
    }

    /// Loads every artifact named in `config` and replays the append log.
    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let corpus = load_corpus(&config.corpus)?;
        let index = PremiseIndex::load(&config.index)?;
        let model = EncoderModel::load(&config.retriever)?;
        if model.kind != ModelKind::Retriever {
            return Err(ServiceError::Config(format!("{} is not a retriever checkpoint", config.retriever.display())));
        }
        let retriever = Retriever::from_model(model)?;
        let reranker = match &config.reranker {
            Some(p) => {
                let m = EncoderModel::load(p)?;
                if m.kind != ModelKind::Reranker {
                    return Err(ServiceError::Config(format!("{} is not a re-ranker checkpoint", p.display())));
                }
                Some(Reranker::from_model(m)?)
            }
            None => None,
        };
        Engine::new(Models { retriever, reranker }, corpus, index, config.append_log_path())
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Embeds and inserts `rec`, logs it, then publishes the new snapshot.
    /// Searches running meanwhile keep the snapshot they started with.
    pub fn insert(&self, rec: NewPremise) -> Result<PremiseId, InsertError> {
        if rec.name.trim().is_empty() {
            return Err(InsertError::Invalid("name is empty".into()));
        }
        if rec.goal.trim().is_empty() {
            return Err(InsertError::Invalid("goal is empty".into()));
        }
        let mut log = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.snapshot();
        if current.corpus.id_of(&rec.name).is_some() {
            return Err(InsertError::Duplicate(rec.name));
        }
        let mut next = Snapshot::clone(&current);
        drop(current);
        let id = insert_premise(&mut next.corpus, &mut next.index, &self.models.retriever, rec.clone().into_premise()).map_err(|e| match e {
            premsel_core::Error::DuplicatePremise(n) => InsertError::Duplicate(n),
            other => InsertError::Service(other.into()),
        })?;
        if next.index.segments().len() > MAX_SEGMENTS {
            next.index.compact();
        }
        log.append(&rec)?;
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        Ok(id)
    }
}

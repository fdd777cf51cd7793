use std::net::SocketAddr;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// Environment variables read by [`ServiceConfig::apply_env`].
pub const ENV_LISTEN: &str = "PREMSEL_LISTEN";
pub const ENV_CORPUS: &str = "PREMSEL_CORPUS";
pub const ENV_INDEX: &str = "PREMSEL_INDEX";
pub const ENV_RETRIEVER: &str = "PREMSEL_RETRIEVER";
pub const ENV_RERANKER: &str = "PREMSEL_RERANKER";
pub const ENV_APPEND_LOG: &str = "PREMSEL_APPEND_LOG";
pub const ENV_CORS_ORIGIN: &str = "PREMSEL_CORS_ORIGIN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub corpus: PathBuf,
    pub index: PathBuf,
    pub retriever: PathBuf,
    pub reranker: Option<PathBuf>,
    /// Defaults to the index path with `.log` appended.
    pub append_log: Option<PathBuf>,
    pub default_k: usize,
    pub default_k1: usize,
    pub max_body_bytes: usize,
    /// `*` allows any origin.
    pub cors_origin: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            corpus: PathBuf::from("corpus.json"),
            index: PathBuf::from("index.bin"),
            retriever: PathBuf::from("retriever.ckpt"),
            reranker: None,
            append_log: None,
            default_k: 10,
            default_k1: 20,
            max_body_bytes: 1 << 20,
            cors_origin: "*".into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid service configuration: {0}")]
pub struct ConfigError(pub String);

impl ServiceConfig {
    /// Overrides fields from environment variables, looked up through `get`
    /// so tests need not touch the process environment.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get(ENV_LISTEN) {
            self.listen = v.parse().map_err(|e| ConfigError(format!("{ENV_LISTEN}={v}: {e}")))?;
        }
        if let Some(v) = get(ENV_CORPUS) {
            self.corpus = v.into();
        }
        if let Some(v) = get(ENV_INDEX) {
            self.index = v.into();
        }
        if let Some(v) = get(ENV_RETRIEVER) {
            self.retriever = v.into();
        }
        if let Some(v) = get(ENV_RERANKER) {
            self.reranker = if v.is_empty() { None } else { Some(v.into()) };
        }
        if let Some(v) = get(ENV_APPEND_LOG) {
            self.append_log = Some(v.into());
        }
        if let Some(v) = get(ENV_CORS_ORIGIN) {
            self.cors_origin = v;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.default_k == 0 {
            return Err(ConfigError("default_k must be at least 1".into()));
        }
        if self.reranker.is_some() && self.default_k > self.default_k1 {
            return Err(ConfigError(format!(
                "default_k ({}) exceeds default_k1 ({}) with a re-ranker loaded",
                self.default_k, self.default_k1
            )));
        }
        if self.max_body_bytes == 0 {
            return Err(ConfigError("max_body_bytes must be positive".into()));
        }
        Ok(())
    }

    pub fn append_log_path(&self) -> PathBuf {
        self.append_log.clone().unwrap_or_else(|| {
            let mut s = self.index.clone().into_os_string();
            s.push(".log");
            s.into()
        })
    }
}

//! Run configuration, resolved from defaults, an optional TOML file,
//! `PREMSEL__SECTION__KEY` environment variables and command-line flags, in
//! increasing precedence.

use std::path::Path;

use premsel_core::corpus::SplitStrategy;
use premsel_core::encoder::{EncoderConfig, PretrainConfig};
use premsel_core::eval::PerturbKind;
use premsel_core::reranker::RerankTrainConfig;
use premsel_core::retriever::RetrieverTrainConfig;
use premsel_core::synth::SynthConfig;
use premsel_core::tokenizer::TokenizerConfig;
use premsel_service::ServiceConfig;
use serde::{Deserialize, Serialize};

/// Prefix of environment variables that override config keys. Sections and
/// keys are separated by `__`: `PREMSEL__RETRIEVER__EPOCHS=3`.
pub const ENV_PREFIX: &str = "PREMSEL__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub strategy: SplitStrategy,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            strategy: SplitStrategy::Random,
            n_val: 2000,
            n_test: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub k1: usize,
    pub rerank: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![1, 5, 10],
            k1: 20,
            rerank: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    pub kind: PerturbKind,
    pub ratio: f64,
    pub removal_fraction: f64,
    pub min_context: usize,
}

impl Default for PerturbSection {
    fn default() -> Self {
        PerturbSection {
            kind: PerturbKind::ShuffleContext,
            ratio: 1.0,
            removal_fraction: 0.2,
            min_context: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FractionSection {
    pub fractions: Vec<f64>,
}

impl Default for FractionSection {
    fn default() -> Self {
        FractionSection {
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

/// Dropout used while fine-tuning each stage. `None` keeps the rate stored
/// in the starting checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutSection {
    pub retriever: Option<f64>,
    pub reranker: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides the seed of every section.
    pub seed: Option<u64>,
    /// Single-threaded execution; results are bit-identical either way.
    pub sequential: bool,
    pub synth: SynthConfig,
    pub split: SplitSection,
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub retriever: RetrieverTrainConfig,
    pub reranker: RerankTrainConfig,
    pub dropout: DropoutSection,
    pub eval: EvalSection,
    pub perturb: PerturbSection,
    pub data_fraction: FractionSection,
    pub serve: ServiceConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn parse_env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (lowercased, `__`-separated) in `table`, creating sections.
fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().ok_or_else(|| ConfigError::Invalid("empty override key".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn check_known(given: &toml::Table, known: &toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => return Err(ConfigError::Invalid(format!("unknown key `{path}`"))),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => check_known(g, kn, &path)?,
            _ => {}
        }
    }
    Ok(())
}

impl RunConfig {
    /// Layers `file` (if any) and the `PREMSEL__*` variables yielded by `env`
    /// over the defaults.
    pub fn resolve(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
            set_path(&mut table, &path, parse_env_value(&v))?;
        }
        let cfg: RunConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        // Several section types come from the library and tolerate unknown
        // keys, so typos are caught by comparing against the resolved shape.
        let resolved = toml::Table::try_from(&cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        check_known(&table, &resolved, "")?;
        Ok(cfg)
    }

    /// Copies the global seed, if any, into every section.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.encoder.seed = s;
            self.pretrain.seed = s;
            self.retriever.seed = s;
            self.reranker.seed = s;
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

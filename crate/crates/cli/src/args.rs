use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use premsel_core::corpus::SplitStrategy;
use premsel_core::eval::PerturbKind;
use premsel_core::retriever::SimilarityMode;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "premsel", version, about = "Premise retrieval for formal mathematics libraries")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration. `PREMSEL__SECTION__KEY` variables override
    /// it and flags override both.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every randomized stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run on one thread. Outputs are identical to the parallel path.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Log verbosity: -v for debug, -vv for trace. `RUST_LOG` takes
    /// precedence when set.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a planted synthetic corpus in the ingest format.
    Synth(SynthArgs),
    /// Parse a JSON-Lines corpus into corpus and proof artifacts.
    Ingest(IngestArgs),
    /// Partition proofs into train/val/test.
    Split(SplitArgs),
    /// Train a WordPiece vocabulary.
    TrainTokenizer(TrainTokenizerArgs),
    /// Masked-language-model pretraining of a fresh encoder.
    Pretrain(PretrainArgs),
    /// Contrastive training of the bi-encoder retriever.
    TrainRetriever(TrainRetrieverArgs),
    /// Embed every premise and write a search index.
    EmbedCorpus(EmbedCorpusArgs),
    /// Train the cross-encoder re-ranker on retriever hard negatives.
    TrainReranker(TrainRerankerArgs),
    /// Retrieve (and optionally re-rank) premises for one proof state.
    Search(SearchArgs),
    /// Score a retriever, optionally with re-ranking, on a split partition.
    Evaluate(EvaluateArgs),
    /// Write a perturbed copy of a split partition.
    Perturb(PerturbArgs),
    /// Train and evaluate retrievers on nested fractions of the training set.
    DataFraction(DataFractionArgs),
    /// Run the HTTP search service.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Split(_) => "split",
            Command::TrainTokenizer(_) => "train-tokenizer",
            Command::Pretrain(_) => "pretrain",
            Command::TrainRetriever(_) => "train-retriever",
            Command::EmbedCorpus(_) => "embed-corpus",
            Command::TrainReranker(_) => "train-reranker",
            Command::Search(_) => "search",
            Command::Evaluate(_) => "evaluate",
            Command::Perturb(_) => "perturb",
            Command::DataFraction(_) => "data-fraction",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output directory for corpus.jsonl plus the ingested artifacts.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_premises: Option<usize>,
    #[arg(long)]
    pub n_proofs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// JSON-Lines corpus file.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Directory holding corpus.json and proofs.json.
    #[arg(long)]
    pub data: PathBuf,
    /// RD, RI, PL or PF.
    #[arg(long)]
    pub strategy: Option<SplitStrategy>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainTokenizerArgs {
    /// Data or split directory. A split directory contributes only its
    /// training proofs.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<u64>,
    /// Vocabulary file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Data or split directory.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainRetrieverArgs {
    #[arg(long)]
    pub split: PathBuf,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub mode: Option<SimilarityMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedCorpusArgs {
    /// Data or split directory.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub retriever: PathBuf,
    /// Index file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainRerankerArgs {
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub retriever: PathBuf,
    #[arg(long)]
    pub retriever_index: PathBuf,
    /// Pretrained checkpoint to start from. A fresh relevance head is added.
    #[arg(long)]
    pub init: PathBuf,
    /// Retriever depth that hard negatives are mined from.
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    /// Data or split directory.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub retriever: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// File holding a rendered proof state.
    #[arg(long, conflicts_with = "state", required_unless_present = "state")]
    pub state_file: Option<PathBuf>,
    /// Rendered proof state given inline.
    #[arg(long)]
    pub state: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Must match the mode the index was built with.
    #[arg(long)]
    pub mode: Option<SimilarityMode>,
    #[arg(long, requires = "reranker")]
    pub rerank: bool,
    #[arg(long)]
    pub reranker: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub k1: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub split: PathBuf,
    /// Partition to score.
    #[arg(long, default_value = "test")]
    pub part: String,
    /// Score this perturbed dataset instead of a partition.
    #[arg(long, conflicts_with = "part")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub retriever: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, requires = "reranker")]
    pub rerank: bool,
    #[arg(long)]
    pub reranker: Option<PathBuf>,
    #[arg(long)]
    pub k1: Option<usize>,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// JSON report to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the metrics as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PerturbArgs {
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value = "test")]
    pub part: String,
    /// shuffle or remove.
    #[arg(long)]
    pub kind: Option<PerturbKind>,
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Perturbed dataset file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DataFractionArgs {
    #[arg(long)]
    pub split: PathBuf,
    /// Pretrained checkpoint every run starts from.
    #[arg(long)]
    pub init: PathBuf,
    /// Comma-separated fractions in (0, 1].
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub listen: Option<std::net::SocketAddr>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub retriever: Option<PathBuf>,
    #[arg(long)]
    pub reranker: Option<PathBuf>,
}

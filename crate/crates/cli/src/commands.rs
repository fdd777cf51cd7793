use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use premsel_core::artifact::{self, read_stamped, write_stamped};
use premsel_core::corpus::{
    build_dataset, ingest_corpus, load_corpus, load_proofs, read_split_names, render_premise, save_corpus, save_proofs, split, write_split, Corpus,
    Dataset, Proof, SplitSpec,
};
use premsel_core::encoder::{pretrain, Encoder, EncoderModel, ModelKind};
use premsel_core::eval::{data_fraction_runs, evaluate, perturb, EvalReport, PerturbationSpec};
use premsel_core::pipeline::{check_compatible, search, SearchParams};
use premsel_core::reranker::{train_reranker, Reranker};
use premsel_core::retriever::{build_index, train_retriever, PremiseIndex, Retriever};
use premsel_core::synth::generate;
use premsel_core::tokenizer::{train_tokenizer, Vocabulary};
use premsel_core::Exec;
use serde::Serialize;

use crate::args::*;
use crate::config::RunConfig;

pub const CORPUS_FILE: &str = "corpus.json";
pub const PROOFS_FILE: &str = "proofs.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Resolved configuration plus what every artifact gets stamped with.
pub struct Ctx {
    pub cfg: RunConfig,
    pub stamp: serde_json::Value,
    pub exec: Exec,
}

impl Ctx {
    pub fn new(cfg: RunConfig, command: &Command) -> Self {
        let mut stamp = cfg.to_json();
        stamp["command"] = serde_json::to_value(command).expect("command serializes");
        let exec = if cfg.sequential { Exec::Sequential } else { Exec::default() };
        Ctx { cfg, stamp, exec }
    }

    fn seed(&self) -> u64 {
        self.cfg.seed.unwrap_or(0)
    }
}

/// Applies subcommand flags to the run config. For `serve` the service's own
/// environment overrides are applied first so flags still win.
pub fn apply_flags(cfg: &mut RunConfig, command: &Command) -> Result<()> {
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    match command {
        Command::Synth(a) => {
            set(&mut cfg.synth.n_premises, &a.n_premises);
            set(&mut cfg.synth.n_proofs, &a.n_proofs);
        }
        Command::Split(a) => {
            set(&mut cfg.split.strategy, &a.strategy);
            set(&mut cfg.split.n_val, &a.n_val);
            set(&mut cfg.split.n_test, &a.n_test);
        }
        Command::TrainTokenizer(a) => {
            set(&mut cfg.tokenizer.vocab_size, &a.vocab_size);
            set(&mut cfg.tokenizer.min_frequency, &a.min_freq);
        }
        Command::Pretrain(a) => set(&mut cfg.pretrain.steps, &a.steps),
        Command::TrainRetriever(a) => {
            set(&mut cfg.retriever.mode, &a.mode);
            set(&mut cfg.retriever.epochs, &a.epochs);
        }
        Command::TrainReranker(a) => {
            set(&mut cfg.reranker.k1, &a.k1);
            set(&mut cfg.reranker.epochs, &a.epochs);
        }
        Command::Evaluate(a) => {
            set(&mut cfg.eval.ks, &a.ks);
            set(&mut cfg.eval.k1, &a.k1);
            cfg.eval.rerank |= a.rerank;
        }
        Command::Perturb(a) => {
            set(&mut cfg.perturb.kind, &a.kind);
            set(&mut cfg.perturb.ratio, &a.ratio);
        }
        Command::DataFraction(a) => {
            set(&mut cfg.data_fraction.fractions, &a.fractions);
            set(&mut cfg.eval.ks, &a.ks);
        }
        Command::Serve(a) => {
            cfg.serve.apply_env(|k| std::env::var(k).ok())?;
            set(&mut cfg.serve.listen, &a.listen);
            set(&mut cfg.serve.corpus, &a.corpus);
            set(&mut cfg.serve.index, &a.index);
            set(&mut cfg.serve.retriever, &a.retriever);
            if a.reranker.is_some() {
                cfg.serve.reranker = a.reranker.clone();
            }
        }
        Command::Ingest(_) | Command::EmbedCorpus(_) | Command::Search(_) => {}
    }
    Ok(())
}

pub fn run(ctx: &Ctx, command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth_cmd(ctx, a),
        Command::Ingest(a) => ingest_cmd(ctx, a),
        Command::Split(a) => split_cmd(ctx, a),
        Command::TrainTokenizer(a) => train_tokenizer_cmd(ctx, a),
        Command::Pretrain(a) => pretrain_cmd(ctx, a),
        Command::TrainRetriever(a) => train_retriever_cmd(ctx, a),
        Command::EmbedCorpus(a) => embed_cmd(ctx, a),
        Command::TrainReranker(a) => train_reranker_cmd(ctx, a),
        Command::Search(a) => search_cmd(ctx, a),
        Command::Evaluate(a) => evaluate_cmd(ctx, a),
        Command::Perturb(a) => perturb_cmd(ctx, a),
        Command::DataFraction(a) => data_fraction_cmd(ctx, a),
        Command::Serve(a) => serve_cmd(ctx, a),
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Refuses to write `out` over one of the inputs.
fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    for i in inputs {
        ensure!(!same_path(out, i), "output {} would overwrite input {}", out.display(), i.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn guard_output_dir(out: &Path, inputs: &[&Path]) -> Result<()> {
    for i in inputs {
        ensure!(!same_path(out, i), "output directory {} is also an input", out.display());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// A data directory (from `ingest`) or split directory (from `split`).
struct Source {
    dir: PathBuf,
    corpus: Corpus,
    proofs: Vec<Proof>,
}

impl Source {
    fn open(dir: &Path) -> Result<Self> {
        let corpus = load_corpus(dir.join(CORPUS_FILE)).with_context(|| format!("loading corpus from {}", dir.display()))?;
        let proofs = load_proofs(dir.join(PROOFS_FILE)).with_context(|| format!("loading proofs from {}", dir.display()))?;
        Ok(Source {
            dir: dir.to_path_buf(),
            corpus,
            proofs,
        })
    }

    fn is_split(&self) -> bool {
        self.dir.join(MANIFEST_FILE).exists()
    }

    fn part(&self, name: &str) -> Result<Vec<Proof>> {
        ensure!(self.is_split(), "{} is not a split directory", self.dir.display());
        let by_name: HashMap<&str, &Proof> = self.proofs.iter().map(|p| (p.theorem.as_str(), p)).collect();
        read_split_names(&self.dir, name)?
            .iter()
            .map(|n| by_name.get(n.as_str()).map(|p| (*p).clone()).ok_or_else(|| anyhow!("split lists unknown theorem `{n}`")))
            .collect()
    }

    /// Training proofs of a split directory, or every proof otherwise.
    fn training(&self) -> Result<Vec<Proof>> {
        if self.is_split() {
            self.part("train")
        } else {
            Ok(self.proofs.clone())
        }
    }

    fn dataset(&self, part: &str) -> Result<Dataset> {
        Ok(build_dataset(&self.part(part)?, &self.corpus))
    }
}

/// Rendered training states plus every premise's argument list and goal.
pub fn pretraining_texts(ds: &Dataset, corpus: &Corpus) -> Vec<String> {
    let mut texts: Vec<String> = ds.pairs.iter().map(|p| p.rendered.clone()).collect();
    for p in corpus.iter() {
        let r = render_premise(p);
        if !r.args_text.is_empty() {
            texts.push(r.args_text);
        }
        texts.push(r.goal_text);
    }
    texts
}

fn load_model(path: &Path, kind: ModelKind) -> Result<EncoderModel> {
    let m = EncoderModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    ensure!(m.kind == kind, "{} holds a {:?} model, expected {:?}", path.display(), m.kind, kind);
    Ok(m)
}

fn load_retriever(path: &Path) -> Result<Retriever> {
    Ok(Retriever::from_model(load_model(path, ModelKind::Retriever)?)?)
}

fn load_index(path: &Path, retriever: &Retriever) -> Result<PremiseIndex> {
    let index = PremiseIndex::load(path).with_context(|| format!("loading {}", path.display()))?;
    check_compatible(retriever, &index)?;
    Ok(index)
}

/// Writes `value` as JSON with the format version and run config beside
/// its own fields.
fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    if let Some(o) = v.as_object_mut() {
        o.insert("format_version".into(), artifact::FORMAT_VERSION.into());
    }
    artifact::write_json(path, &v)?;
    Ok(())
}

fn write_data_dir(ctx: &Ctx, out: &Path, corpus: &Corpus, proofs: &[Proof]) -> Result<()> {
    save_corpus(out.join(CORPUS_FILE), corpus, &ctx.stamp)?;
    save_proofs(out.join(PROOFS_FILE), proofs, &ctx.stamp)?;
    Ok(())
}

fn synth_cmd(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    guard_output_dir(&a.out, &[])?;
    let syn = generate(&ctx.cfg.synth)?;
    let raw = a.out.join("corpus.jsonl");
    std::fs::write(&raw, syn.to_jsonl()).with_context(|| format!("writing {}", raw.display()))?;
    write_data_dir(ctx, &a.out, &syn.corpus, &syn.proofs)?;
    tracing::info!(premises = syn.corpus.len(), proofs = syn.proofs.len(), out = %a.out.display(), "synthetic corpus written");
    Ok(())
}

fn ingest_cmd(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    guard_output_dir(&a.out, &[])?;
    ensure!(!same_path(&a.out.join(CORPUS_FILE), &a.input), "output would overwrite the input corpus");
    let ing = ingest_corpus(&a.input)?;
    if !ing.report.unresolved.is_empty() {
        tracing::warn!(count = ing.report.unresolved.len(), "premise references did not resolve and were dropped");
    }
    write_data_dir(ctx, &a.out, &ing.corpus, &ing.proofs)?;
    write_stamped(a.out.join("ingest_report.json"), &ing.report, &ctx.stamp)?;
    tracing::info!(premises = ing.report.premises, proofs = ing.report.proofs, "ingested");
    Ok(())
}

fn split_cmd(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    guard_output_dir(&a.out, &[&a.data])?;
    let src = Source::open(&a.data)?;
    let spec = SplitSpec {
        strategy: ctx.cfg.split.strategy,
        seed: ctx.seed(),
        n_val: ctx.cfg.split.n_val,
        n_test: ctx.cfg.split.n_test,
    };
    let asg = split(&src.proofs, &spec)?;
    let manifest = write_split(&a.out, &src.proofs, &asg, &spec, &ctx.stamp)?;
    // The split directory is self-contained so later stages need one path.
    write_data_dir(ctx, &a.out, &src.corpus, &src.proofs)?;
    tracing::info!(strategy = %spec.strategy, counts = ?manifest.counts, "split written");
    Ok(())
}

fn train_tokenizer_cmd(ctx: &Ctx, a: &TrainTokenizerArgs) -> Result<()> {
    guard_output(&a.out, &[])?;
    let src = Source::open(&a.corpus)?;
    let ds = build_dataset(&src.training()?, &src.corpus);
    let vocab = train_tokenizer(&pretraining_texts(&ds, &src.corpus), &ctx.cfg.tokenizer)?;
    vocab.save_with_run_config(&a.out, &ctx.stamp)?;
    tracing::info!(size = vocab.len(), out = %a.out.display(), "vocabulary written");
    Ok(())
}

fn pretrain_cmd(ctx: &Ctx, a: &PretrainArgs) -> Result<()> {
    guard_output(&a.out, &[&a.vocab])?;
    let src = Source::open(&a.corpus)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let ds = build_dataset(&src.training()?, &src.corpus);
    let mut ecfg = ctx.cfg.encoder.clone();
    ecfg.vocab_size = vocab.len();
    let mut enc = Encoder::<f32>::init(ecfg, false)?;
    let report = pretrain(&mut enc, &vocab, &pretraining_texts(&ds, &src.corpus), &ctx.cfg.pretrain, ctx.exec)?;
    tracing::info!(first = report.losses.first(), last = report.losses.last(), "pretraining done");
    let mut model = EncoderModel::new(ModelKind::Pretrained, enc, vocab)?;
    model.run_config = ctx.stamp.clone();
    model.save(&a.out)?;
    write_stamped(sidecar(&a.out, ".report.json"), &report, &ctx.stamp)?;
    Ok(())
}

fn fine_tune_backbone(init: &EncoderModel, head: bool, dropout: Option<f64>, seed: u64) -> Result<Encoder<f32>> {
    let mut enc = if init.encoder.has_head() == head {
        init.encoder.clone()
    } else {
        init.encoder.with_head(head, seed)?
    };
    if let Some(p) = dropout {
        enc.config.dropout = p;
    }
    Ok(enc)
}

fn train_retriever_model(ctx: &Ctx, init: &EncoderModel, ds: &Dataset, corpus: &Corpus) -> Result<(Retriever, Vec<f64>)> {
    let mut enc = fine_tune_backbone(init, false, ctx.cfg.dropout.retriever, ctx.seed())?;
    let report = train_retriever(&mut enc, &init.vocab, ds, corpus, &ctx.cfg.retriever, ctx.exec)?;
    let mut model = EncoderModel::new(ModelKind::Retriever, enc, init.vocab.clone())?;
    model.run_config = ctx.stamp.clone();
    Ok((Retriever::from_model(model)?, report.losses))
}

fn train_retriever_cmd(ctx: &Ctx, a: &TrainRetrieverArgs) -> Result<()> {
    guard_output(&a.out, &[&a.init])?;
    let src = Source::open(&a.split)?;
    let ds = src.dataset("train")?;
    let init = EncoderModel::load(&a.init).with_context(|| format!("loading {}", a.init.display()))?;
    let (retriever, losses) = train_retriever_model(ctx, &init, &ds, &src.corpus)?;
    tracing::info!(pairs = ds.len(), steps = losses.len(), last = losses.last(), "retriever trained");
    retriever.model.save(&a.out)?;
    write_stamped(sidecar(&a.out, ".report.json"), &losses, &ctx.stamp)?;
    Ok(())
}

fn embed_cmd(ctx: &Ctx, a: &EmbedCorpusArgs) -> Result<()> {
    guard_output(&a.out, &[&a.retriever])?;
    let src = Source::open(&a.corpus)?;
    let retriever = load_retriever(&a.retriever)?;
    let mut index = build_index(&src.corpus, &retriever, ctx.exec)?;
    index.run_config = ctx.stamp.clone();
    index.save(&a.out)?;
    tracing::info!(rows = index.len(), dim = index.dim(), mode = %index.mode(), "index written");
    Ok(())
}

fn train_reranker_cmd(ctx: &Ctx, a: &TrainRerankerArgs) -> Result<()> {
    guard_output(&a.out, &[&a.init, &a.retriever, &a.retriever_index])?;
    let src = Source::open(&a.split)?;
    let ds = src.dataset("train")?;
    let retriever = load_retriever(&a.retriever)?;
    let index = load_index(&a.retriever_index, &retriever)?;
    let init = EncoderModel::load(&a.init).with_context(|| format!("loading {}", a.init.display()))?;
    let mut enc = fine_tune_backbone(&init, true, ctx.cfg.dropout.reranker, ctx.seed())?;
    let report = train_reranker(&mut enc, &init.vocab, &ds, &src.corpus, &retriever, &index, &ctx.cfg.reranker, ctx.exec)?;
    tracing::info!(pairs = ds.len(), steps = report.losses.len(), last = report.losses.last(), "re-ranker trained");
    let mut model = EncoderModel::new(ModelKind::Reranker, enc, init.vocab)?;
    model.run_config = ctx.stamp.clone();
    model.save(&a.out)?;
    write_stamped(sidecar(&a.out, ".report.json"), &report, &ctx.stamp)?;
    Ok(())
}

#[derive(Serialize)]
struct SearchOutput<'a> {
    premise_id: u32,
    name: &'a str,
    module: &'a str,
    cfr_score: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    rerank_probability: Option<f64>,
    final_rank: usize,
}

fn search_cmd(ctx: &Ctx, a: &SearchArgs) -> Result<()> {
    let src = Source::open(&a.corpus)?;
    let retriever = load_retriever(&a.retriever)?;
    if let Some(m) = a.mode {
        ensure!(m == retriever.mode, "retriever was trained for {} similarity, not {m}", retriever.mode);
    }
    let index = load_index(&a.index, &retriever)?;
    let reranker = match (&a.reranker, a.rerank) {
        (Some(p), true) => Some(Reranker::from_model(load_model(p, ModelKind::Reranker)?)?),
        _ => None,
    };
    let state = match (&a.state, &a.state_file) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (None, None) => bail!("either --state or --state-file is required"),
    };
    let params = SearchParams {
        k: a.k,
        k1: a.k1,
        rerank: a.rerank,
    };
    let hits = search(&retriever, &index, reranker.as_ref(), &src.corpus, state.trim_end(), params, ctx.exec)?;
    let out: Vec<SearchOutput> = hits
        .iter()
        .map(|h| {
            let p = src.corpus.get(h.id).expect("index ids resolve in the corpus");
            SearchOutput {
                premise_id: h.id,
                name: &p.name,
                module: &p.module,
                cfr_score: h.cfr_score,
                rerank_probability: h.rerank_probability,
                final_rank: h.final_rank,
            }
        })
        .collect();
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &out)?;
    writeln!(stdout)?;
    Ok(())
}

fn eval_dataset(src: &Source, part: &str, perturbed: Option<&Path>) -> Result<Dataset> {
    match perturbed {
        Some(p) => Ok(read_stamped::<Dataset>(p)?.data),
        None => src.dataset(part),
    }
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    guard_output(&a.out, &[&a.index, &a.retriever])?;
    let src = Source::open(&a.split)?;
    let ds = eval_dataset(&src, &a.part, a.dataset.as_deref())?;
    let retriever = load_retriever(&a.retriever)?;
    let index = load_index(&a.index, &retriever)?;
    let rerank = ctx.cfg.eval.rerank;
    let reranker = match (&a.reranker, rerank) {
        (Some(p), true) => Some(Reranker::from_model(load_model(p, ModelKind::Reranker)?)?),
        (None, true) => bail!("re-ranking needs --reranker"),
        _ => None,
    };
    let ks = &ctx.cfg.eval.ks;
    let params = SearchParams {
        k: ks.iter().copied().max().unwrap_or(1),
        k1: ctx.cfg.eval.k1,
        rerank,
    };
    let mut report = evaluate(
        |p| Ok(search(&retriever, &index, reranker.as_ref(), &src.corpus, &p.rendered, params, Exec::Sequential)?.into_iter().map(|h| h.id).collect()),
        &ds,
        &src.corpus,
        ks,
        ctx.exec,
    )?;
    report.config = ctx.stamp.clone();
    write_report(&a.out, &report)?;
    if let Some(csv) = &a.csv {
        guard_output(csv, &[])?;
        std::fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    }
    print!("{}", report.to_csv());
    tracing::info!(queries = report.counts.queries, skipped = report.counts.skipped, "evaluation done");
    Ok(())
}

fn perturb_cmd(ctx: &Ctx, a: &PerturbArgs) -> Result<()> {
    guard_output(&a.out, &[])?;
    let src = Source::open(&a.split)?;
    let ds = src.dataset(&a.part)?;
    let p = &ctx.cfg.perturb;
    let spec = PerturbationSpec {
        kind: p.kind,
        ratio: p.ratio,
        removal_fraction: p.removal_fraction,
        min_context: p.min_context,
        seed: ctx.seed(),
    };
    let out = perturb(&ds, &spec)?;
    write_stamped(&a.out, &out, &ctx.stamp)?;
    tracing::info!(pairs = out.len(), "perturbed dataset written");
    Ok(())
}

fn data_fraction_cmd(ctx: &Ctx, a: &DataFractionArgs) -> Result<()> {
    guard_output(&a.out, &[&a.init])?;
    let src = Source::open(&a.split)?;
    let train = src.dataset("train")?;
    let test = src.dataset("test")?;
    let init = EncoderModel::load(&a.init).with_context(|| format!("loading {}", a.init.display()))?;
    let ks = ctx.cfg.eval.ks.clone();
    let k = ks.iter().copied().max().unwrap_or(1);
    let mut report = data_fraction_runs(&train, &ctx.cfg.data_fraction.fractions, ctx.seed(), |subset| {
        let (retriever, _) = train_retriever_model(ctx, &init, subset, &src.corpus).map_err(|e| premsel_core::Error::InvalidArgument(format!("{e:#}")))?;
        let index = build_index(&src.corpus, &retriever, ctx.exec)?;
        let r: EvalReport = evaluate(
            |p| Ok(index.search(&retriever.embed_state_text(&p.rendered)?, k, Exec::Sequential)?.into_iter().map(|h| h.0).collect()),
            &test,
            &src.corpus,
            &ks,
            ctx.exec,
        )?;
        tracing::info!(pairs = subset.len(), recall = ?r.metrics.values().map(|m| m.recall).collect::<Vec<_>>(), "fraction done");
        Ok(r)
    })?;
    report.config = ctx.stamp.clone();
    write_report(&a.out, &report)?;
    Ok(())
}

fn serve_cmd(ctx: &Ctx, _a: &ServeArgs) -> Result<()> {
    let state = premsel_service::AppState::load(ctx.cfg.serve.clone())?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(premsel_service::serve(state))?;
    Ok(())
}

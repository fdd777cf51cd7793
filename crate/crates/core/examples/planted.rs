//! Runs the full pipeline on a planted synthetic corpus and prints retrieval
//! metrics on held-out proofs, with and without re-ranking.
//!
//! `cargo run --release -p premsel-core --example planted -- [seed]`

use std::time::Instant;

use premsel_core::corpus::{build_dataset, render_premise, split, SplitSpec, SplitStrategy};
use premsel_core::encoder::{pretrain, AdamWConfig, Encoder, EncoderConfig, EncoderModel, ModelKind, PretrainConfig};
use premsel_core::eval::evaluate;
use premsel_core::pipeline::{search, SearchParams};
use premsel_core::reranker::{train_reranker, RerankTrainConfig, Reranker};
use premsel_core::retriever::{build_index, train_retriever, Retriever, RetrieverTrainConfig, SimilarityMode, TextBudget};
use premsel_core::synth::{generate, SynthConfig};
use premsel_core::tokenizer::{train_tokenizer, TokenizerConfig};
use premsel_core::Exec;

const MAX_LEN: usize = 128;

fn main() -> premsel_core::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let exec = Exec::default();
    let t0 = Instant::now();
    let elapsed = || t0.elapsed().as_secs_f64();

    let syn = generate(&SynthConfig { seed, ..Default::default() })?;
    let asg = split(&syn.proofs, &SplitSpec { strategy: SplitStrategy::Random, seed, n_val: 0, n_test: 20 })?;
    let (train, _, test) = asg.materialize(&syn.proofs);
    let train_ds = build_dataset(&train, &syn.corpus);
    let test_ds = build_dataset(&test, &syn.corpus);

    let mut texts: Vec<String> = train_ds.pairs.iter().map(|p| p.rendered.clone()).collect();
    for p in syn.corpus.iter() {
        let r = render_premise(p);
        if !r.args_text.is_empty() {
            texts.push(r.args_text);
        }
        texts.push(r.goal_text);
    }
    let vocab = train_tokenizer(&texts, &TokenizerConfig::default())?;
    println!("vocabulary {} tokens, {} train / {} test pairs", vocab.len(), train_ds.len(), test_ds.len());

    let cfg = EncoderConfig {
        n_layers: 2,
        n_heads: 4,
        hidden: 64,
        intermediate: 128,
        max_positions: MAX_LEN,
        vocab_size: vocab.len(),
        dropout: 0.0,
        layer_norm_eps: 1e-12,
        seed,
    };
    let mut enc = Encoder::<f32>::init(cfg, false)?;
    let pre = PretrainConfig {
        steps: 60,
        batch_size: 16,
        grad_accum: 1,
        mask_rate: 0.15,
        max_len: MAX_LEN,
        optimizer: AdamWConfig { lr: 1e-3, warmup_steps: 6, ..Default::default() },
        seed,
    };
    let rep = pretrain(&mut enc, &vocab, &texts, &pre, exec)?;
    println!("pretrain loss {:.3} -> {:.3} ({:.0}s)", rep.losses[0], rep.losses.last().unwrap(), elapsed());
    let backbone = enc.clone();

    let rcfg = RetrieverTrainConfig {
        batch_size: 16,
        temperature: 0.2,
        epochs: 20,
        budget: TextBudget { state: MAX_LEN, premise: MAX_LEN },
        optimizer: AdamWConfig { lr: 1e-3, warmup_steps: 10, ..Default::default() },
        seed,
        mode: SimilarityMode::FineGrained,
        ..Default::default()
    };
    train_retriever(&mut enc, &vocab, &train_ds, &syn.corpus, &rcfg, exec)?;
    let mut retriever = Retriever::new(EncoderModel::new(ModelKind::Retriever, enc, vocab.clone())?, SimilarityMode::FineGrained);
    retriever.budget = rcfg.budget;
    let index = build_index(&syn.corpus, &retriever, exec)?;
    let cfr = evaluate(
        |p| Ok(index.search(&retriever.embed_state_text(&p.rendered)?, 10, Exec::Sequential)?.into_iter().map(|h| h.0).collect()),
        &test_ds,
        &syn.corpus,
        &[1, 5, 10],
        exec,
    )?;
    println!("retriever R@1 {:.3} R@10 {:.3} ({:.0}s)", cfr.at(1).unwrap().recall, cfr.at(10).unwrap().recall, elapsed());

    let mut renc = backbone.with_head(true, seed)?;
    renc.config.dropout = 0.1;
    let kcfg = RerankTrainConfig {
        batch_size: 4,
        grad_accum: 1,
        candidates: 4,
        k1: 10,
        rerank_depth: 10,
        epochs: 40,
        optimizer: AdamWConfig { lr: 1e-3, warmup_steps: 5, ..Default::default() },
        seed,
        ..Default::default()
    };
    train_reranker(&mut renc, &vocab, &train_ds, &syn.corpus, &retriever, &index, &kcfg, exec)?;
    let reranker = Reranker::new(EncoderModel::new(ModelKind::Reranker, renc, vocab)?)?;
    let params = SearchParams { k: 10, k1: 10, rerank: true };
    let car = evaluate(
        |p| Ok(search(&retriever, &index, Some(&reranker), &syn.corpus, &p.rendered, params, Exec::Sequential)?.into_iter().map(|h| h.id).collect()),
        &test_ds,
        &syn.corpus,
        &[1, 5, 10],
        exec,
    )?;
    println!("re-ranked R@1 {:.3} R@10 {:.3} ({:.0}s)", car.at(1).unwrap().recall, car.at(10).unwrap().recall, elapsed());
    Ok(())
}

use std::collections::BTreeSet;

use premsel_core::corpus::{build_dataset, render_premise};
use premsel_core::encoder::{pretrain, AdamWConfig, Encoder, EncoderConfig, PretrainConfig};
use premsel_core::reranker::{rerank_loss, RerankObjective};
use premsel_core::retriever::{infonce_loss, train_retriever, ContrastiveBatch, PremiseInput, RetrieverTrainConfig, TextBudget};
use premsel_core::synth::{generate, SynthConfig};
use premsel_core::tokenizer::{train_tokenizer, TokenizerConfig};
use premsel_core::Exec;

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn short_pretraining_beats_the_uniform_baseline() {
    let subjects = ["n", "m", "a", "b", "x"];
    let ops = ["+", "*", "-"];
    let texts: Vec<String> = (0..50)
        .map(|i| {
            let (s, t, o) = (subjects[i % 5], subjects[(i / 5) % 5], ops[i % 3]);
            format!("{s} {o} {t} = {t} {o} {s}")
        })
        .collect();
    let vocab = train_tokenizer(&texts, &TokenizerConfig { min_frequency: 1, ..Default::default() }).unwrap();
    let cfg = EncoderConfig {
        hidden: 32,
        intermediate: 64,
        max_positions: 32,
        ..EncoderConfig::tiny(vocab.len())
    };
    let mut enc = Encoder::<f32>::init(cfg, false).unwrap();
    let pc = PretrainConfig {
        steps: 200,
        batch_size: 8,
        max_len: 32,
        optimizer: AdamWConfig { lr: 2e-3, warmup_steps: 10, ..Default::default() },
        ..Default::default()
    };
    let report = pretrain(&mut enc, &vocab, &texts, &pc, Exec::default()).unwrap();
    assert_eq!(report.losses.len(), 200);
    let ln_v = (vocab.len() as f64).ln();
    let first = window_mean(&report.losses[..20]);
    let last = window_mean(&report.losses[180..]);
    assert!(last < ln_v, "final window {last} vs ln V {ln_v}");
    assert!(last < first, "final window {last} vs first {first}");
}

struct Toy {
    enc: Encoder<f32>,
    vocab: premsel_core::tokenizer::Vocabulary,
    dataset: premsel_core::corpus::Dataset,
    corpus: premsel_core::corpus::Corpus,
}

fn toy() -> Toy {
    let syn = generate(&SynthConfig { n_premises: 30, n_proofs: 20, ..Default::default() }).unwrap();
    let dataset = build_dataset(&syn.proofs, &syn.corpus);
    let texts: Vec<String> = dataset.pairs.iter().map(|p| p.rendered.clone()).chain(syn.corpus.iter().map(|p| render_premise(p).full_text)).collect();
    let vocab = train_tokenizer(&texts, &TokenizerConfig::default()).unwrap();
    let enc = Encoder::init(EncoderConfig { max_positions: 64, ..EncoderConfig::tiny(vocab.len()) }, false).unwrap();
    Toy { enc, vocab, dataset, corpus: syn.corpus }
}

fn retriever_cfg(epochs: usize) -> RetrieverTrainConfig {
    RetrieverTrainConfig {
        batch_size: 8,
        epochs,
        grad_accum: 2,
        budget: TextBudget { state: 64, premise: 64 },
        optimizer: AdamWConfig { lr: 1e-3, ..Default::default() },
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn retriever_training_is_reproducible_across_runs_and_policies() {
    let t = toy();
    let run = |exec| {
        let mut enc = t.enc.clone();
        let r = train_retriever(&mut enc, &t.vocab, &t.dataset, &t.corpus, &retriever_cfg(2), exec).unwrap();
        (enc.params.data().to_vec(), r.losses)
    };
    let a = run(Exec::Sequential);
    assert_eq!(a, run(Exec::Sequential));
    assert_eq!(a, run(Exec::Parallel));
    assert_ne!(a.0, t.enc.params.data());
}

#[test]
fn zero_epochs_leave_the_encoder_untouched() {
    let t = toy();
    let mut enc = t.enc.clone();
    let r = train_retriever(&mut enc, &t.vocab, &t.dataset, &t.corpus, &retriever_cfg(0), Exec::default()).unwrap();
    assert!(r.losses.is_empty());
    assert_eq!(enc.params.data(), t.enc.params.data());
}

#[test]
fn identical_candidates_give_log_group_size() {
    let enc = Encoder::<f64>::init(EncoderConfig::tiny(24), false).unwrap();
    let premise = PremiseInput::Whole(vec![2, 7, 11, 3]);
    let batch = ContrastiveBatch {
        queries: vec![vec![2, 5, 9, 3]],
        candidates: vec![(0, premise.clone()), (1, premise)],
        positive: vec![0],
        known_positives: vec![BTreeSet::from([0])],
    };
    for tau in [0.05, 0.2, 1.0] {
        let loss = infonce_loss(&enc, &batch, tau, Exec::Sequential).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-9, "tau {tau}: {loss}");
    }

    let cross = Encoder::<f64>::init(EncoderConfig::tiny(24), true).unwrap();
    let pair = vec![2u32, 5, 9, 3, 7, 11, 3];
    let groups = vec![vec![pair; 8]];
    let loss = rerank_loss(&cross, &groups, RerankObjective::ProbabilityRatio, Exec::Sequential).unwrap();
    assert!((loss - 8f64.ln()).abs() < 1e-9, "{loss}");
}

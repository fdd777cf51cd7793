//! Acceptance gate. Each test checks one criterion and writes a `PASS` or
//! `FAIL` line straight to stdout, so the lines show up even when the
//! harness captures test output.

#[path = "../../core/tests/support/gradcheck.rs"]
#[allow(dead_code)]
mod gradcheck;

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use premsel_core::corpus::{
    premise_freq, proof_length, render_state, split, Corpus, Dataset, DatasetPair, Premise, PremiseId, Proof, ProofState, SplitSpec, SplitStrategy,
    StateCase, TacticStep,
};
use premsel_core::encoder::{mlm_loss, mlm_loss_and_grad, Encoder, EncoderConfig, EncoderModel, MaskedSequence, ModelKind};
use premsel_core::eval::{evaluate, ndcg, perturb, PerturbKind, PerturbationSpec};
use premsel_core::reranker::{group_loss_from_logits, rerank_loss, rerank_loss_and_grad, RerankObjective};
use premsel_core::retriever::{
    combine_fine, infonce_from_scores, infonce_loss, infonce_loss_and_grad, score, ContrastiveBatch, PremiseIndex, PremiseInput, SimilarityMode,
};
use premsel_core::Exec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! require {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

/// Runs `f`, reports one line, and fails the test on a failed check.
fn gate(name: &str, f: impl FnOnce() -> Check) {
    let t = Instant::now();
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = t.elapsed().as_secs_f64();
    let line = match &outcome {
        Ok(detail) => format!("PASS  {name}: {detail} ({secs:.1}s)\n"),
        Err(why) => format!("FAIL  {name}: {why} ({secs:.1}s)\n"),
    };
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    if let Err(why) = outcome {
        panic!("{name}: {why}");
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_premsel")
}

fn run(dir: &Path, args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(bin())
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("premsel {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out)
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- metrics

fn corpus_with_modules(modules: &[usize]) -> Corpus {
    Corpus::from_premises(modules.iter().enumerate().map(|(i, m)| Premise {
        id: 0,
        name: format!("p{i}"),
        module: format!("M{m}"),
        args: vec![],
        goal: format!("g{i}"),
    }))
    .unwrap()
}

/// Recall, precision, F1 and nDCG at `k` from the definitions alone.
fn oracle(modules: &[usize], ranked: &[PremiseId], pos: &BTreeSet<PremiseId>, k: usize) -> [f64; 4] {
    let gain = |id: PremiseId| {
        if pos.contains(&id) {
            1.0
        } else if pos.iter().any(|&p| modules[p as usize] == modules[id as usize]) {
            0.3
        } else {
            0.0
        }
    };
    let top = &ranked[..k.min(ranked.len())];
    let hits = top.iter().filter(|i| pos.contains(i)).count() as f64;
    let (r, p) = (hits / pos.len() as f64, hits / k as f64);
    let f = if hits == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let dcg = |g: &[f64]| g.iter().enumerate().map(|(i, x)| x / ((i + 2) as f64).log2()).sum::<f64>();
    let mut ideal: Vec<f64> = (0..modules.len() as PremiseId).map(gain).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    ideal.truncate(k);
    let idcg = dcg(&ideal);
    let got = dcg(&top.iter().map(|&i| gain(i)).collect::<Vec<_>>());
    [r, p, f, if idcg == 0.0 { 0.0 } else { got / idcg }]
}

#[test]
fn metric_oracle_equality() {
    gate("metric oracle equality", || {
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let ks = [1, 2, 5, 10];
        let mut instances = 0;
        let mut worst = 0.0f64;
        while instances < 1200 {
            let n = rng.random_range(3..40);
            let n_mod = rng.random_range(1..6);
            let modules: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_mod)).collect();
            let corpus = corpus_with_modules(&modules);
            let mut pairs = Vec::new();
            let mut rankings = Vec::new();
            for q in 0..rng.random_range(1..6) {
                let mut ids: Vec<PremiseId> = (0..n as PremiseId).collect();
                ids.shuffle(&mut rng);
                let positives: BTreeSet<PremiseId> = ids[..rng.random_range(1..4)].iter().copied().collect();
                ids.shuffle(&mut rng);
                ids.truncate(rng.random_range(0..=n));
                pairs.push(DatasetPair {
                    state: ProofState::single(vec![], format!("{q}")),
                    rendered: format!("{q}"),
                    positives,
                });
                rankings.push(ids);
            }
            let ds = Dataset { pairs };
            let rep = evaluate(|p| Ok(rankings[p.rendered.parse::<usize>().unwrap()].clone()), &ds, &corpus, &ks, Exec::default()).map_err(|e| e.to_string())?;
            for &k in &ks {
                let mut sum = [0.0; 4];
                for (pair, ranked) in ds.pairs.iter().zip(&rankings) {
                    let m = oracle(&modules, ranked, &pair.positives, k);
                    (0..4).for_each(|j| sum[j] += m[j] / ds.len() as f64);
                }
                let got = rep.at(k).unwrap();
                for (j, v) in [got.recall, got.precision, got.f1, got.ndcg].into_iter().enumerate() {
                    worst = worst.max((v - sum[j]).abs());
                }
            }
            instances += ds.len();
        }
        require!(worst < 1e-9, "max abs error {worst:e}");
        let v = ndcg(&[2, 1, 0], &BTreeSet::from([0]), &corpus_with_modules(&[0, 0, 1]), 3);
        require!((v * 1e4).round() / 1e4 == 0.5796, "hand example gives {v}");
        require!(t.elapsed() < Duration::from_secs(60), "took {:?}", t.elapsed());
        Ok(format!("{instances} instances, max abs error {worst:.1e}, hand nDCG {v:.4}"))
    });
}

// -------------------------------------------------------------- gradients

const VOCAB: usize = 24;

fn jittered(head: bool, seed: u64) -> Encoder<f64> {
    let cfg = EncoderConfig { seed, ..EncoderConfig::tiny(VOCAB) };
    let mut enc = Encoder::init(cfg, head).unwrap();
    gradcheck::jitter(&mut enc, 0.3, seed + 100);
    enc
}

#[test]
fn gradient_suite() {
    gate("gradient suite", || {
        let t = Instant::now();
        let (step, tol) = (1e-3, 1e-4);
        let mut tensors = BTreeSet::new();
        let mut worst = (0.0f64, String::new());
        let mut record = |what: &str, checks: Vec<gradcheck::TensorCheck>| {
            for c in checks {
                if c.analytic_norm > 0.0 || c.numeric_norm > 0.0 {
                    tensors.insert(c.name.clone());
                }
                if c.rel_err > worst.0 {
                    worst = (c.rel_err, format!("{what}/{}", c.name));
                }
            }
        };

        let enc = jittered(false, 1);
        let batch = vec![
            MaskedSequence { input: vec![2, 8, 4, 12, 9, 3], targets: vec![(2, 17), (4, 9)] },
            MaskedSequence { input: vec![2, 21, 10, 4, 3], targets: vec![(3, 11)] },
        ];
        let (_, g) = mlm_loss_and_grad(&enc, &batch, Exec::Sequential, None).unwrap();
        record("mlm", gradcheck::check(&enc, &g, step, |e| mlm_loss(e, &batch, Exec::Sequential).unwrap()));

        for fine in [false, true] {
            let input = |whole: Vec<u32>, args: Option<Vec<u32>>, goal: Vec<u32>| {
                if fine {
                    PremiseInput::Split { args, goal }
                } else {
                    PremiseInput::Whole(whole)
                }
            };
            let batch = ContrastiveBatch {
                queries: vec![vec![2, 5, 9, 13, 6, 14, 3], vec![2, 6, 20, 11, 3]],
                candidates: vec![
                    (0, input(vec![2, 5, 9, 6, 14, 3], Some(vec![2, 5, 9, 3]), vec![2, 6, 14, 3])),
                    (7, input(vec![2, 6, 18, 3], None, vec![2, 6, 18, 3])),
                    (1, input(vec![2, 5, 20, 6, 11, 3], Some(vec![2, 5, 20, 3]), vec![2, 6, 11, 3])),
                    (4, input(vec![2, 19, 3], Some(vec![2, 19, 3]), vec![2, 22, 3])),
                ],
                positive: vec![0, 2],
                known_positives: vec![BTreeSet::from([0]), BTreeSet::from([1])],
            };
            let enc = jittered(false, 2);
            for tau in [0.05, 1.0] {
                let (_, g) = infonce_loss_and_grad(&enc, &batch, tau, Exec::Sequential, None).unwrap();
                record("infonce", gradcheck::check(&enc, &g, step, |e| infonce_loss(e, &batch, tau, Exec::Sequential).unwrap()));
            }
        }

        let enc = jittered(true, 3);
        let groups = vec![
            vec![vec![2, 7, 9, 3, 7, 12, 3], vec![2, 7, 9, 3, 15, 3], vec![2, 7, 9, 3, 19, 22, 3]],
            vec![vec![2, 8, 3, 8, 3], vec![2, 8, 3, 11, 16, 3]],
        ];
        let obj = RerankObjective::ProbabilityRatio;
        let (_, g) = rerank_loss_and_grad(&enc, &groups, obj, Exec::Sequential, None).unwrap();
        record("rerank", gradcheck::check(&enc, &g, step, |e| rerank_loss(e, &groups, obj, Exec::Sequential).unwrap()));

        let all: BTreeSet<String> = enc.params.layout().tensors().iter().chain(jittered(false, 0).params.layout().tensors()).map(|s| s.name.clone()).collect();
        let untouched: Vec<&String> = all.difference(&tensors).collect();
        require!(worst.0 < tol, "{} relative error {:e}", worst.1, worst.0);
        require!(untouched.is_empty(), "no gradient reached {untouched:?}");
        require!(t.elapsed() < Duration::from_secs(300), "took {:?}", t.elapsed());
        Ok(format!("{} tensors, worst relative error {:.1e} at {}", all.len(), worst.0, worst.1))
    });
}

// ------------------------------------------------------ closed-form losses

#[test]
fn closed_form_losses() {
    gate("closed-form loss values", || {
        let (l2, _) = infonce_from_scores(&[vec![0.37, 0.37]], &[0], &[vec![true, true]], 0.05).map_err(|e| e.to_string())?;
        let (l8, _) = group_loss_from_logits(&[0.8; 8], RerankObjective::ProbabilityRatio).map_err(|e| e.to_string())?;
        require!((l2 - 2f64.ln()).abs() < 1e-9, "InfoNCE {l2}");
        require!((l8 - 8f64.ln()).abs() < 1e-9, "ratio loss {l8}");

        // Same values through the full encoders with identical candidates.
        let enc = Encoder::<f64>::init(EncoderConfig::tiny(VOCAB), false).unwrap();
        let p = PremiseInput::Whole(vec![2, 7, 11, 3]);
        let batch = ContrastiveBatch {
            queries: vec![vec![2, 5, 9, 3]],
            candidates: vec![(0, p.clone()), (1, p)],
            positive: vec![0],
            known_positives: vec![BTreeSet::from([0])],
        };
        let m2 = infonce_loss(&enc, &batch, 0.05, Exec::Sequential).unwrap();
        let cross = Encoder::<f64>::init(EncoderConfig::tiny(VOCAB), true).unwrap();
        let m8 = rerank_loss(&cross, &[vec![vec![2, 5, 3, 7, 3]; 8]], RerankObjective::ProbabilityRatio, Exec::Sequential).unwrap();
        require!((m2 - 2f64.ln()).abs() < 1e-9, "encoder InfoNCE {m2}");
        require!((m8 - 8f64.ln()).abs() < 1e-9, "encoder ratio loss {m8}");
        Ok(format!("ln 2 err {:.1e}, ln 8 err {:.1e}", (m2 - 2f64.ln()).abs(), (m8 - 8f64.ln()).abs()))
    });
}

// ------------------------------------------------------ similarity algebra

#[test]
fn similarity_algebra() {
    gate("similarity algebra", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let unit = |v: Vec<f32>| {
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f32>>()
        };
        let mut worst_half = 0.0f32;
        for dim in [2, 64, 768] {
            let u = unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            let raw: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let along = score(&raw, &u);
            let g = unit(raw.iter().zip(&u).map(|(r, x)| r - along * x).collect());
            worst_half = worst_half.max((score(&u, &combine_fine(Some(&u), g)) - 0.5).abs());
        }
        require!(worst_half < 1e-6, "orthogonal case off by {worst_half}");

        let mut searches = 0;
        let mut max_norm = 0.0f32;
        for trial in 0..200 {
            let dim = rng.random_range(1..9);
            let n = rng.random_range(1..300);
            let grid = |rng: &mut ChaCha8Rng| rng.random_range(-4..=4) as f32 * 0.25;
            let rows: Vec<f32> = (0..n * dim).map(|_| grid(&mut rng)).collect();
            let mut index = PremiseIndex::new(dim, SimilarityMode::FineGrained, "t");
            let cut = rng.random_range(0..=n);
            let ids: Vec<u32> = (0..n as u32).collect();
            index.append(ids[..cut].to_vec(), rows[..cut * dim].to_vec()).unwrap();
            index.append(ids[cut..].to_vec(), rows[cut * dim..].to_vec()).unwrap();
            let q: Vec<f32> = (0..dim).map(|_| grid(&mut rng)).collect();
            let mut all: Vec<(u32, f32)> = ids.iter().map(|&i| (i, score(&rows[i as usize * dim..(i as usize + 1) * dim], &q))).collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for k in [1, 3, n, n + 5] {
                let exec = if trial % 2 == 0 { Exec::Sequential } else { Exec::Parallel };
                let got = index.search(&q, k, exec).unwrap();
                require!(got[..] == all[..k.min(n)], "search differs from brute force (n={n}, k={k})");
                searches += 1;
            }
        }

        // Norms of a real fine-grained index over the planted corpus.
        let fx = service_fixture();
        let index = PremiseIndex::load(fx.dir.join("index.bin")).map_err(|e| e.to_string())?;
        for (_, row) in index.rows() {
            max_norm = max_norm.max(row.iter().map(|x| x * x).sum::<f32>().sqrt());
        }
        require!(max_norm <= 1.0 + 1e-6, "premise vector norm {max_norm}");
        Ok(format!("0.5 case err {worst_half:.1e}; {searches} searches equal brute force; max premise norm {max_norm:.4}"))
    });
}

// ------------------------------------------------------ planted benchmark

const SEEDS: [u64; 3] = [0, 1, 2];

struct PlantedRun {
    cfr_r1: f64,
    cfr_r10: f64,
    car_r1: f64,
    cfr_secs: f64,
}

fn planted_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/planted.toml")
}

fn recall(report: &serde_json::Value, k: usize) -> f64 {
    report["metrics"][k.to_string()]["recall"].as_f64().unwrap_or(f64::NAN)
}

fn planted_seed(seed: u64) -> Result<PlantedRun, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let cfg = planted_config();
    let s = seed.to_string();
    let base = ["--config", cfg.to_str().unwrap(), "--seed", &s];
    let step = |rest: &[&str]| run(d, &[&base[..], rest].concat());
    let t = Instant::now();
    step(&["synth", "--out", "data"])?;
    step(&["split", "--data", "data", "--out", "split"])?;
    step(&["train-tokenizer", "--corpus", "split", "--out", "vocab.txt"])?;
    step(&["pretrain", "--corpus", "split", "--vocab", "vocab.txt", "--out", "pre.ckpt"])?;
    step(&["train-retriever", "--split", "split", "--init", "pre.ckpt", "--out", "ret.ckpt"])?;
    step(&["embed-corpus", "--corpus", "split", "--retriever", "ret.ckpt", "--out", "index.bin"])?;
    step(&["evaluate", "--split", "split", "--retriever", "ret.ckpt", "--index", "index.bin", "--out", "cfr.json"])?;
    let cfr_secs = t.elapsed().as_secs_f64();
    step(&["train-reranker", "--split", "split", "--retriever", "ret.ckpt", "--retriever-index", "index.bin", "--init", "pre.ckpt", "--out", "rr.ckpt"])?;
    step(&["evaluate", "--split", "split", "--retriever", "ret.ckpt", "--index", "index.bin", "--rerank", "--reranker", "rr.ckpt", "--out", "car.json"])?;
    let cfr = read_json(&d.join("cfr.json"))?;
    let car = read_json(&d.join("car.json"))?;
    Ok(PlantedRun {
        cfr_r1: recall(&cfr, 1),
        cfr_r10: recall(&cfr, 10),
        car_r1: recall(&car, 1),
        cfr_secs,
    })
}

fn planted() -> &'static Result<Vec<PlantedRun>, String> {
    static RUNS: OnceLock<Result<Vec<PlantedRun>, String>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| planted_seed(s)).collect())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn planted_end_to_end_recall_at_10() {
    gate("planted end-to-end: retriever Recall@10 >= 0.9", || {
        let runs = planted().as_ref().map_err(Clone::clone)?;
        let r10 = mean(runs.iter().map(|r| r.cfr_r10));
        let secs: f64 = runs.iter().map(|r| r.cfr_secs).sum();
        let per: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.cfr_r10)).collect();
        require!(r10 >= 0.9, "mean Recall@10 {r10:.3} (per seed {per:?})");
        require!(secs < 600.0, "tokenizer to evaluation took {secs:.0}s over {} seeds", runs.len());
        Ok(format!("mean Recall@10 {r10:.3} (per seed {per:?}), pipeline {secs:.0}s for {} seeds", runs.len()))
    });
}

#[test]
fn planted_rerank_keeps_recall_at_1() {
    gate("planted end-to-end: re-ranking does not lower Recall@1", || {
        let runs = planted().as_ref().map_err(Clone::clone)?;
        let before = mean(runs.iter().map(|r| r.cfr_r1));
        let after = mean(runs.iter().map(|r| r.car_r1));
        let per: Vec<String> = runs.iter().map(|r| format!("{:.3}->{:.3}", r.cfr_r1, r.car_r1)).collect();
        require!(after >= before, "mean Recall@1 {before:.3} before re-ranking, {after:.3} after ({per:?})");
        Ok(format!("mean Recall@1 {before:.3} -> {after:.3} ({per:?})"))
    });
}

// ---------------------------------------------------------------- splits

fn proofs(n: usize, pool: usize, seed: u64) -> Vec<Proof> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let per_step = rng.random_range(0..=4);
            Proof {
                theorem: format!("t{i}"),
                steps: (0..rng.random_range(1..=20))
                    .map(|_| TacticStep {
                        state_before: ProofState::single(vec![], "P"),
                        tactic: "simp".into(),
                        premises: (0..rng.random_range(0..=per_step)).map(|_| format!("p{}", rng.random_range(0..pool))).collect(),
                        state_after: ProofState::terminal(),
                    })
                    .collect(),
            }
        })
        .collect()
}

type Statistic = fn(&Proof) -> f64;

#[test]
fn split_invariants() {
    gate("split invariants", || {
        for seed in 0..50 {
            let ps = proofs(300, 150, seed);
            let a = split(&ps, &SplitSpec { strategy: SplitStrategy::ReferenceIsolated, seed, n_val: 5, n_test: 5 }).map_err(|e| e.to_string())?;
            let cited = |ix: &[usize]| -> BTreeSet<&String> { ix.iter().flat_map(|&i| ps[i].steps.iter().flat_map(|s| &s.premises)).collect() };
            let held: Vec<usize> = a.val.iter().chain(&a.test).copied().collect();
            require!(cited(&a.train).is_disjoint(&cited(&held)), "RI seed {seed} shares premises");
        }
        let mut worst_gap = f64::INFINITY;
        for seed in 0..50 {
            let ps = proofs(600, 200, 500 + seed);
            let stats: [(SplitStrategy, Statistic); 2] = [
                (SplitStrategy::ProofLength, |p| proof_length(p) as f64),
                (SplitStrategy::PremiseFrequency, |p| premise_freq(p).unwrap()),
            ];
            for (strategy, stat) in stats {
                let a = split(&ps, &SplitSpec { strategy, seed, n_val: 0, n_test: 60 }).map_err(|e| e.to_string())?;
                let test = mean(a.test.iter().map(|&i| stat(&ps[i])));
                let train = mean(a.train.iter().map(|&i| stat(&ps[i])));
                require!(test > train, "{strategy} seed {seed}: test mean {test:.3} <= train mean {train:.3}");
                worst_gap = worst_gap.min(test - train);
            }
        }
        let big: Vec<Proof> = (0..69_567)
            .map(|i| Proof {
                theorem: format!("t{i}"),
                steps: vec![TacticStep { state_before: ProofState::single(vec![], "P"), tactic: "simp".into(), premises: vec![format!("p{}", i % 50)], state_after: ProofState::terminal() }; 1 + i % 4],
            })
            .collect();
        let a = split(&big, &SplitSpec { strategy: SplitStrategy::Random, seed: 0, n_val: 2000, n_test: 2000 }).map_err(|e| e.to_string())?;
        let counts = (a.train.len(), a.val.len(), a.test.len());
        require!(counts == (65_567, 2000, 2000), "counts {counts:?}");
        Ok(format!("RI disjoint over 50 seeds; PL/PF held-out mean higher in all 50 seeds (min gap {worst_gap:.3}); counts {counts:?}"))
    });
}

// ---------------------------------------------------------- perturbation

#[test]
fn perturbation_harness() {
    gate("perturbation harness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut removals = 0;
        for round in 0..200 {
            let pairs: Vec<DatasetPair> = (0..rng.random_range(1..20))
                .map(|i| {
                    let state = ProofState {
                        cases: (0..rng.random_range(1..3)).map(|c| StateCase::new((0..rng.random_range(0..40)).map(|h| format!("h{h} : T{}", h % 4)).collect(), format!("g{i}{c}"))).collect(),
                    };
                    DatasetPair { rendered: render_state(&state), state, positives: BTreeSet::from([i as u32]) }
                })
                .collect();
            let ds = Dataset { pairs };
            let seed = round as u64;
            require!(perturb(&ds, &PerturbationSpec::new(PerturbKind::RemoveContext, 0.0, seed)).unwrap() == ds, "ratio 0 changed the split");
            require!(perturb(&ds, &PerturbationSpec::new(PerturbKind::ShuffleContext, 0.0, seed)).unwrap() == ds, "ratio 0 changed the split");
            let removed = perturb(&ds, &PerturbationSpec::new(PerturbKind::RemoveContext, 1.0, seed)).unwrap();
            let shuffled = perturb(&ds, &PerturbationSpec::new(PerturbKind::ShuffleContext, 1.0, seed)).unwrap();
            for ((b, r), s) in ds.pairs.iter().zip(&removed.pairs).zip(&shuffled.pairs) {
                for ((cb, cr), cs) in b.state.cases.iter().zip(&r.state.cases).zip(&s.state.cases) {
                    let n = cb.hypotheses.len();
                    let want = if n >= 15 { ((0.2 * n as f64).round() as usize).max(1) } else { 0 };
                    require!(n - cr.hypotheses.len() == want, "|Γ|={n} lost {} hypotheses", n - cr.hypotheses.len());
                    removals += want;
                    let (mut x, mut y) = (cb.hypotheses.clone(), cs.hypotheses.clone());
                    x.sort();
                    y.sort();
                    require!(x == y, "shuffle changed the hypothesis multiset");
                }
            }
        }
        Ok(format!("200 random splits, {removals} hypotheses removed exactly as required"))
    });
}

// --------------------------------------------------------------- service

struct ServiceFixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

/// Small trained artifacts on the planted corpus plus a zero-head reranker.
fn service_fixture() -> &'static ServiceFixture {
    static FX: OnceLock<ServiceFixture> = OnceLock::new();
    FX.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().to_path_buf();
        let cfg = planted_config();
        let base = ["--config", cfg.to_str().unwrap(), "--seed", "5"];
        let step = |rest: &[&str]| run(&d, &[&base[..], rest].concat()).unwrap();
        step(&["synth", "--out", "data"]);
        step(&["split", "--data", "data", "--out", "split"]);
        step(&["train-tokenizer", "--corpus", "split", "--out", "vocab.txt"]);
        step(&["pretrain", "--corpus", "split", "--vocab", "vocab.txt", "--steps", "10", "--out", "pre.ckpt"]);
        step(&["train-retriever", "--split", "split", "--init", "pre.ckpt", "--epochs", "2", "--out", "ret.ckpt"]);
        step(&["embed-corpus", "--corpus", "split", "--retriever", "ret.ckpt", "--out", "index.bin"]);

        let pre = EncoderModel::load(d.join("pre.ckpt")).unwrap();
        let mut enc = pre.encoder.with_head(true, 0).unwrap();
        for name in ["rerank_head.weight", "rerank_head.bias"] {
            let id = enc.params.layout().find(name).unwrap();
            enc.params.slice_mut(id).fill(0.0);
        }
        EncoderModel::new(ModelKind::Reranker, enc, pre.vocab).unwrap().save(d.join("zero.ckpt")).unwrap();
        ServiceFixture { _tmp: tmp, dir: d }
    })
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server(dir: &Path, log: &Path) -> Result<Server, String> {
    let port = TcpListener::bind("127.0.0.1:0").and_then(|l| l.local_addr()).map_err(|e| e.to_string())?.port();
    let addr = format!("127.0.0.1:{port}");
    let child = Command::new(bin())
        .current_dir(dir)
        .args(["serve", "--listen", &addr, "--corpus", "split/corpus.json", "--index", "index.bin", "--retriever", "ret.ckpt", "--reranker", "zero.ckpt"])
        .env("PREMSEL_APPEND_LOG", log)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let server = Server { child, addr };
    let deadline = Instant::now() + Duration::from_secs(60);
    while Instant::now() < deadline {
        if let Ok((200, _)) = http(&server.addr, "GET", "/api/health", None) {
            return Ok(server);
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    Err("service did not become healthy".into())
}

/// Minimal HTTP/1.1 client: one request per connection.
fn http(addr: &str, method: &str, path: &str, body: Option<&serde_json::Value>) -> Result<(u16, serde_json::Value), String> {
    let mut s = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    s.set_read_timeout(Some(Duration::from_secs(120))).map_err(|e| e.to_string())?;
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    let req = format!("{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}", payload.len());
    s.write_all(req.as_bytes()).map_err(|e| e.to_string())?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&raw);
    let status: u16 = text.split_whitespace().nth(1).and_then(|c| c.parse().ok()).ok_or("malformed response")?;
    let body = text.split_once("\r\n\r\n").map(|(_, b)| b).unwrap_or("");
    Ok((status, serde_json::from_str(body).unwrap_or(serde_json::Value::Null)))
}

fn search_ids(addr: &str, state: &str, rerank: bool) -> Result<Vec<(u64, Option<f64>)>, String> {
    let (code, v) = http(addr, "POST", "/api/search", Some(&serde_json::json!({"state": state, "k": 10, "k1": 20, "rerank": rerank})))?;
    require!(code == 200, "search returned {code}: {v}");
    Ok(v["results"].as_array().ok_or("no results")?.iter().map(|r| (r["premise_id"].as_u64().unwrap(), r["rerank_probability"].as_f64())).collect())
}

#[test]
fn service_integration() {
    gate("service integration", || {
        let fx = service_fixture();
        let logdir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let log = logdir.path().join("append.log");
        let goal = "mul (qorvex a b) = add (qorvex b a) a";

        let server = start_server(&fx.dir, &log)?;
        let (_, stats) = http(&server.addr, "GET", "/api/stats", None)?;
        let rows = stats["index_rows"].as_u64().ok_or("stats lack index_rows")?;
        let premise = serde_json::json!({"name": "Fresh.qorvex_comm", "module": "Fresh", "args": [], "goal": goal});
        let (code, created) = http(&server.addr, "POST", "/api/premises", Some(&premise))?;
        require!(code == 201, "add returned {code}: {created}");
        let id = created["id"].as_u64().ok_or("no id")?;
        let found = search_ids(&server.addr, goal, false)?;
        require!(found.iter().any(|h| h.0 == id), "new premise {id} missing from {found:?}");
        let (dup, _) = http(&server.addr, "POST", "/api/premises", Some(&premise))?;
        require!(dup == 409, "duplicate add returned {dup}");

        let state = "<VAR> x y : Nat <VAR> h1 : y < pred (y) x <GOAL> mul (vanyaspix n y) ≠ add (succ (c) a) y";
        let cfr = search_ids(&server.addr, state, false)?;
        let reranked = search_ids(&server.addr, state, true)?;
        require!(
            cfr.iter().map(|h| h.0).eq(reranked.iter().map(|h| h.0)),
            "zero-head order {reranked:?} differs from retriever order {cfr:?}"
        );
        require!(reranked.iter().all(|h| h.1 == Some(0.5)), "zero head must give probability 0.5");
        let (_, before) = http(&server.addr, "GET", &format!("/api/premises/{id}"), None)?;
        drop(server);

        let server = start_server(&fx.dir, &log)?;
        let (_, stats) = http(&server.addr, "GET", "/api/stats", None)?;
        require!(stats["index_rows"].as_u64() == Some(rows + 1), "after restart {stats} (expected {} rows)", rows + 1);
        let (code, after) = http(&server.addr, "GET", &format!("/api/premises/{id}"), None)?;
        require!(code == 200 && after == before, "replayed premise differs: {after} vs {before}");
        let again = search_ids(&server.addr, goal, false)?;
        require!(again == found, "results changed across restart");
        Ok(format!("added premise {id} found; restart kept {} rows; zero-head order equals retriever order", rows + 1))
    });
}

// ----------------------------------------------------------- determinism

#[test]
fn determinism() {
    gate("determinism", || {
        let cfg = planted_config();
        let pipeline: Vec<Vec<&str>> = vec![
            vec!["synth", "--out", "data"],
            vec!["split", "--data", "data", "--strategy", "RI", "--out", "split"],
            vec!["train-tokenizer", "--corpus", "split", "--out", "vocab.txt"],
            vec!["pretrain", "--corpus", "split", "--vocab", "vocab.txt", "--steps", "4", "--out", "pre.ckpt"],
            vec!["train-retriever", "--split", "split", "--init", "pre.ckpt", "--epochs", "1", "--out", "ret.ckpt"],
            vec!["embed-corpus", "--corpus", "split", "--retriever", "ret.ckpt", "--out", "index.bin"],
            vec!["train-reranker", "--split", "split", "--retriever", "ret.ckpt", "--retriever-index", "index.bin", "--init", "pre.ckpt", "--epochs", "1", "--out", "rr.ckpt"],
            vec!["perturb", "--split", "split", "--kind", "remove", "--out", "perturbed.json"],
            vec!["evaluate", "--split", "split", "--retriever", "ret.ckpt", "--index", "index.bin", "--out", "eval.json"],
        ];
        let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
        for d in &dirs {
            for args in &pipeline {
                let full = [&["--config", cfg.to_str().unwrap(), "--seed", "7", "--sequential"][..], &args[..]].concat();
                run(d.path(), &full)?;
            }
        }
        let mut files = Vec::new();
        for entry in walk(dirs[0].path()) {
            let rel = entry.strip_prefix(dirs[0].path()).unwrap().to_path_buf();
            let a = std::fs::read(&entry).map_err(|e| e.to_string())?;
            let b = std::fs::read(dirs[1].path().join(&rel)).map_err(|e| format!("{}: {e}", rel.display()))?;
            require!(a == b, "{} differs between runs", rel.display());
            files.push(rel);
        }
        require!(files.len() >= 15, "only {} artifacts compared", files.len());
        Ok(format!("{} artifacts byte-identical across two single-threaded runs", files.len()))
    });
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

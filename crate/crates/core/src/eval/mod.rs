//! Ranking metrics under graded relevance, evaluation runs, state
//! perturbations and data-fraction experiments.
//!
//! A retrieved premise is a *match* (gain 1) when it is one of the query's
//! positives, *relevant* (gain 0.3) when it shares a module with some
//! positive, and irrelevant (gain 0) otherwise.

mod perturb;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use perturb::{perturb, perturb_state, PerturbKind, PerturbationSpec};

use crate::corpus::{Corpus, Dataset, DatasetPair, PremiseId};
use crate::{Error, Exec, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Match,
    Relevant,
    Irrelevant,
}

impl Grade {
    pub fn gain(self) -> f64 {
        match self {
            Grade::Match => 1.0,
            Grade::Relevant => 0.3,
            Grade::Irrelevant => 0.0,
        }
    }
}

pub fn grade(retrieved: PremiseId, positives: &BTreeSet<PremiseId>, corpus: &Corpus) -> Grade {
    if positives.contains(&retrieved) {
        return Grade::Match;
    }
    match corpus.module_of(retrieved) {
        Some(m) if positives.iter().any(|&p| corpus.module_of(p) == Some(m)) => Grade::Relevant,
        _ => Grade::Irrelevant,
    }
}

/// Set-based recall, precision and F1 over the first `k` ranked ids.
pub fn recall_precision_f1(ranked: &[PremiseId], positives: &BTreeSet<PremiseId>, k: usize) -> (f64, f64, f64) {
    if positives.is_empty() || k == 0 {
        return (0.0, 0.0, 0.0);
    }
    let hits = ranked.iter().take(k).filter(|id| positives.contains(id)).count() as f64;
    let r = hits / positives.len() as f64;
    let p = hits / k as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (r, p, f)
}

/// `Σ gain_i / log2(i + 1)` with 1-based positions.
pub fn dcg(gains: &[f64]) -> f64 {
    gains.iter().enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum()
}

/// Number of premises per module, for ideal-ranking computation.
#[derive(Clone, Debug, Default)]
pub struct ModuleCounts {
    counts: HashMap<String, usize>,
}

impl ModuleCounts {
    pub fn new(corpus: &Corpus) -> Self {
        let mut counts = HashMap::new();
        for p in corpus.iter() {
            *counts.entry(p.module.clone()).or_insert(0) += 1;
        }
        ModuleCounts { counts }
    }

    /// Ideal gains truncated at `k`: every positive, then every other
    /// premise sharing a module with a positive.
    pub fn ideal_gains(&self, positives: &BTreeSet<PremiseId>, corpus: &Corpus, k: usize) -> Vec<f64> {
        let modules: BTreeSet<&str> = positives.iter().filter_map(|&p| corpus.module_of(p)).collect();
        let same_module: usize = modules.iter().map(|m| self.counts.get(*m).copied().unwrap_or(0)).sum();
        let in_corpus = positives.iter().filter(|&&p| corpus.get(p).is_some()).count();
        let relevant = same_module.saturating_sub(in_corpus);
        let mut g = vec![Grade::Match.gain(); positives.len().min(k)];
        g.resize(g.len() + relevant.min(k - g.len()), Grade::Relevant.gain());
        g
    }
}

fn ndcg_with(ranked: &[PremiseId], positives: &BTreeSet<PremiseId>, corpus: &Corpus, counts: &ModuleCounts, k: usize) -> f64 {
    let gains: Vec<f64> = ranked.iter().take(k).map(|&id| grade(id, positives, corpus).gain()).collect();
    let ideal = dcg(&counts.ideal_gains(positives, corpus, k));
    if ideal == 0.0 {
        0.0
    } else {
        dcg(&gains) / ideal
    }
}

/// nDCG@k with the ideal ranking drawn from the whole graded corpus.
pub fn ndcg(ranked: &[PremiseId], positives: &BTreeSet<PremiseId>, corpus: &Corpus, k: usize) -> f64 {
    ndcg_with(ranked, positives, corpus, &ModuleCounts::new(corpus), k)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub ndcg: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub queries: usize,
    /// Queries without positives, excluded from the averages.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub config: serde_json::Value,
    pub counts: EvalCounts,
    /// Macro-averaged metrics keyed by cutoff.
    pub metrics: BTreeMap<usize, Metrics>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&Metrics> {
        self.metrics.get(&k)
    }

    /// `k,recall,precision,f1,ndcg` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,recall,precision,f1,ndcg\n");
        for (k, m) in &self.metrics {
            let _ = writeln!(s, "{k},{},{},{},{}", m.recall, m.precision, m.f1, m.ndcg);
        }
        s
    }
}

/// Per-query metrics at each cutoff in `ks`.
pub fn query_metrics(ranked: &[PremiseId], positives: &BTreeSet<PremiseId>, corpus: &Corpus, counts: &ModuleCounts, ks: &[usize]) -> Vec<Metrics> {
    ks.iter()
        .map(|&k| {
            let (recall, precision, f1) = recall_precision_f1(ranked, positives, k);
            Metrics {
                recall,
                precision,
                f1,
                ndcg: ndcg_with(ranked, positives, corpus, counts, k),
            }
        })
        .collect()
}

/// Runs `ranker` on every pair of `dataset` and macro-averages the metrics.
pub fn evaluate<F>(ranker: F, dataset: &Dataset, corpus: &Corpus, ks: &[usize], exec: Exec) -> Result<EvalReport>
where
    F: Fn(&DatasetPair) -> Result<Vec<PremiseId>> + Sync + Send,
{
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("cutoffs must be a non-empty list of positive integers".into()));
    }
    let counts = ModuleCounts::new(corpus);
    let per_query = exec.map(&dataset.pairs, |pair| {
        if pair.positives.is_empty() {
            return Ok::<_, Error>(None);
        }
        let ranked = ranker(pair)?;
        Ok(Some(query_metrics(&ranked, &pair.positives, corpus, &counts, ks)))
    });
    let mut sums = vec![Metrics::default(); ks.len()];
    let mut report = EvalReport::default();
    for q in per_query {
        match q? {
            None => report.counts.skipped += 1,
            Some(ms) => {
                report.counts.queries += 1;
                for (s, m) in sums.iter_mut().zip(ms) {
                    s.recall += m.recall;
                    s.precision += m.precision;
                    s.f1 += m.f1;
                    s.ndcg += m.ndcg;
                }
            }
        }
    }
    let n = report.counts.queries.max(1) as f64;
    for (&k, s) in ks.iter().zip(sums) {
        report.metrics.insert(
            k,
            Metrics {
                recall: s.recall / n,
                precision: s.precision / n,
                f1: s.f1 / n,
                ndcg: s.ndcg / n,
            },
        );
    }
    Ok(report)
}

/// Nested subsets of `dataset`: one seeded permutation, and for each
/// fraction `f` its first `ceil(f·n)` pairs, restored to dataset order.
pub fn nested_subsets(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::InvalidArgument("fractions must lie in (0, 1]".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(fractions
        .iter()
        .map(|f| {
            let n = (f * dataset.len() as f64).ceil() as usize;
            let mut idx = order[..n.min(dataset.len())].to_vec();
            idx.sort_unstable();
            Dataset {
                pairs: idx.into_iter().map(|i| dataset.pairs[i].clone()).collect(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FractionRun {
    pub fraction: f64,
    pub train_pairs: usize,
    pub report: EvalReport,
    /// Metrics divided by those of the smallest-fraction run.
    pub normalized: BTreeMap<usize, Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataFractionReport {
    #[serde(default)]
    pub config: serde_json::Value,
    pub runs: Vec<FractionRun>,
}

fn ratio(v: f64, base: f64) -> f64 {
    if base == 0.0 {
        if v == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        v / base
    }
}

/// Trains and evaluates on nested subsets, smallest fraction first.
/// `run(subset)` performs one full train-then-evaluate cycle.
pub fn data_fraction_runs<F>(dataset: &Dataset, fractions: &[f64], seed: u64, mut run: F) -> Result<DataFractionReport>
where
    F: FnMut(&Dataset) -> Result<EvalReport>,
{
    let mut fr = fractions.to_vec();
    fr.sort_by(f64::total_cmp);
    fr.dedup();
    let subsets = nested_subsets(dataset, &fr, seed)?;
    let mut out = DataFractionReport::default();
    for (f, subset) in fr.iter().zip(&subsets) {
        let report = run(subset)?;
        out.runs.push(FractionRun {
            fraction: *f,
            train_pairs: subset.len(),
            report,
            normalized: BTreeMap::new(),
        });
    }
    if let Some(base) = out.runs.first().map(|r| r.report.metrics.clone()) {
        for r in &mut out.runs {
            r.normalized = r
                .report
                .metrics
                .iter()
                .map(|(k, m)| {
                    let b = base.get(k).copied().unwrap_or_default();
                    (
                        *k,
                        Metrics {
                            recall: ratio(m.recall, b.recall),
                            precision: ratio(m.precision, b.precision),
                            f1: ratio(m.f1, b.f1),
                            ndcg: ratio(m.ndcg, b.ndcg),
                        },
                    )
                })
                .collect();
        }
    }
    Ok(out)
}

//! Method comparison averaged over sampling seeds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    calibrated_accuracy, raw_accuracy, vote_greedy, vote_sc, vote_sc_delta, vote_sc_ic, DeltaAggregation, Method,
    PathRecord, VoteResult,
};
use crate::error::{Error, Result};
use crate::layerweights::{apply_transfer, tune_weights, HeldoutQuestion, LayerWeights, TuneConfig};
use crate::pipeline::QuestionPaths;
use crate::stats::mean_std;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Sampled paths drawn per question and seed (all when fewer exist).
    pub votes_per_question: usize,
    pub delta_aggregation: DeltaAggregation,
    /// Tune layer weights on a seeded held-out share of the questions; every
    /// method is then scored on the remainder.
    pub tune: Option<TuneSetup>,
    pub transfer: Option<LayerWeights>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            votes_per_question: 10,
            delta_aggregation: DeltaAggregation::Sum,
            tune: None,
            transfer: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneSetup {
    pub config: TuneConfig,
    /// Fraction of questions held out for tuning, capped at `config.n_heldout`.
    pub heldout_fraction: f64,
}

impl Default for TuneSetup {
    fn default() -> Self {
        Self {
            config: TuneConfig::default(),
            heldout_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub raw: (f64, f64),
    pub calibrated: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteTable {
    pub rows: Vec<MethodRow>,
    pub n_questions: usize,
    pub votes_per_question: usize,
    pub seeds: Vec<u64>,
}

impl VoteTable {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,raw_mean,raw_std,calibrated_mean,calibrated_std,n_questions,n_seeds\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.method.label(),
                r.raw.0,
                r.raw.1,
                r.calibrated.0,
                r.calibrated.1,
                self.n_questions,
                self.seeds.len()
            ));
        }
        s
    }
}

struct SeedScores {
    methods: Vec<Method>,
    raw: Vec<f64>,
    calibrated: Vec<f64>,
    n_eval: usize,
}

fn score(results: &[VoteResult], golds: &[usize]) -> Result<(f64, f64)> {
    let chosen: Vec<usize> = results.iter().map(|r| r.chosen).collect();
    let margins: Vec<f64> = results.iter().map(|r| r.margin).collect();
    Ok((raw_accuracy(&chosen, golds), calibrated_accuracy(&margins, golds)?))
}

fn run_seed(questions: &[QuestionPaths], cfg: &EvalConfig, seed: u64) -> Result<SeedScores> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..questions.len()).collect();
    let (heldout, eval): (Vec<usize>, Vec<usize>) = match &cfg.tune {
        Some(t) => {
            order.shuffle(&mut rng);
            let n = ((questions.len() as f64 * t.heldout_fraction).round() as usize)
                .min(t.config.n_heldout)
                .min(questions.len().saturating_sub(2));
            (order[..n].to_vec(), order[n..].to_vec())
        }
        None => (Vec::new(), order),
    };
    // Drawn for every question in index order so a question's draw does
    // not depend on the split.
    let drawn: Vec<Vec<PathRecord>> = questions
        .iter()
        .map(|q| {
            let mut paths = q.sampled.clone();
            paths.shuffle(&mut rng);
            paths.truncate(cfg.votes_per_question);
            paths
        })
        .collect();
    let golds: Vec<usize> = eval.iter().map(|&i| questions[i].gold.expect("checked")).collect();

    let mut methods = Vec::new();
    let mut per_method: Vec<Vec<VoteResult>> = Vec::new();
    if eval.iter().all(|&i| questions[i].greedy.is_some()) {
        methods.push(Method::Greedy);
        per_method.push(eval.iter().map(|&i| vote_greedy(questions[i].greedy.as_ref().expect("checked"))).collect());
    }
    let sets: Vec<&[PathRecord]> = eval.iter().map(|&i| drawn[i].as_slice()).collect();
    methods.push(Method::Sc);
    per_method.push(sets.iter().map(|p| vote_sc(p)).collect::<Result<_>>()?);
    methods.push(Method::ScDelta);
    per_method.push(sets.iter().map(|p| vote_sc_delta(p, cfg.delta_aggregation)).collect::<Result<_>>()?);
    methods.push(Method::ScIc);
    per_method.push(sets.iter().map(|p| vote_sc_ic(p, None)).collect::<Result<_>>()?);
    if let Some(t) = &cfg.tune {
        let train: Vec<HeldoutQuestion> = heldout
            .iter()
            .map(|&i| HeldoutQuestion::from_paths(&drawn[i], questions[i].gold.expect("checked")))
            .collect();
        let tuned = tune_weights(&train, &TuneConfig { seed, ..t.config }, "heldout")?;
        let mut r: Vec<VoteResult> = sets.iter().map(|p| vote_sc_ic(p, Some(&tuned.w))).collect::<Result<_>>()?;
        for v in &mut r {
            v.method = Method::ScIcTune;
        }
        methods.push(Method::ScIcTune);
        per_method.push(r);
    }
    if let Some(w) = &cfg.transfer {
        let target: Vec<Vec<PathRecord>> = sets.iter().map(|p| p.to_vec()).collect();
        methods.push(Method::ScIcTransfer);
        per_method.push(apply_transfer(w, &target)?);
    }
    let mut raw = Vec::new();
    let mut calibrated = Vec::new();
    for r in &per_method {
        let (a, c) = score(r, &golds)?;
        raw.push(a);
        calibrated.push(c);
    }
    Ok(SeedScores {
        methods,
        raw,
        calibrated,
        n_eval: eval.len(),
    })
}

/// Scores every method on each seed's draw of paths and reports mean and
/// sample standard deviation across seeds. Greedy appears only when every
/// scored question has a greedy path.
pub fn vote_table(questions: &[QuestionPaths], cfg: &EvalConfig) -> Result<VoteTable> {
    if cfg.seeds.is_empty() || cfg.votes_per_question == 0 {
        return Err(Error::InvalidInput("need at least one seed and one vote per question".into()));
    }
    if questions.len() < 2 {
        return Err(Error::InvalidInput("need at least two questions".into()));
    }
    if let Some(q) = questions.iter().find(|q| q.gold.is_none() || q.sampled.is_empty()) {
        return Err(Error::InvalidInput(format!(
            "question {} lacks a gold label or sampled paths",
            q.group
        )));
    }
    let per_seed: Vec<SeedScores> = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(questions, cfg, s))
        .collect::<Result<_>>()?;
    let methods = per_seed[0].methods.clone();
    let rows = methods
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let raw: Vec<f64> = per_seed.iter().map(|s| s.raw[m]).collect();
            let cal: Vec<f64> = per_seed.iter().map(|s| s.calibrated[m]).collect();
            MethodRow {
                method,
                raw: mean_std(&raw),
                calibrated: mean_std(&cal),
            }
        })
        .collect();
    Ok(VoteTable {
        rows,
        n_questions: per_seed[0].n_eval,
        votes_per_question: cfg.votes_per_question,
        seeds: cfg.seeds.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::{AgreementVector, IcScore};
    use rand::Rng;

    fn path(answer: usize, bits: Vec<u8>, delta: f64) -> PathRecord {
        let ic = bits.iter().map(|&b| b as f64).sum::<f64>() / bits.len() as f64;
        let p_true = if answer == 0 { 0.5 + delta / 2.0 } else { 0.5 - delta / 2.0 };
        PathRecord {
            path_id: "p".into(),
            answer,
            latent: vec![answer; bits.len() + 2],
            agreement: AgreementVector { bits },
            ic: IcScore(ic),
            final_probs: (p_true, 1.0 - p_true),
            delta,
        }
    }

    /// Correct paths agree at every layer, wrong ones only at layer 0.
    fn questions(n: usize, seed: u64) -> Vec<QuestionPaths> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let gold = i % 2;
                let sampled = (0..12)
                    .map(|_| {
                        if rng.random_bool(0.55) {
                            path(gold, vec![1, 1, 1], rng.random())
                        } else {
                            path(1 - gold, vec![1, 0, 0], rng.random())
                        }
                    })
                    .collect();
                QuestionPaths {
                    group: format!("q{i}"),
                    gold: Some(gold),
                    greedy: Some(path(gold, vec![1, 1, 1], 0.3)),
                    sampled,
                }
            })
            .collect()
    }

    #[test]
    fn rows_and_csv() {
        let qs = questions(40, 1);
        let table = vote_table(&qs, &EvalConfig { seeds: vec![0, 1, 2], ..Default::default() }).unwrap();
        let names: Vec<_> = table.rows.iter().map(|r| r.method).collect();
        assert_eq!(names, [Method::Greedy, Method::Sc, Method::ScDelta, Method::ScIc]);
        assert_eq!(table.row(Method::Greedy).unwrap().raw, (1.0, 0.0));
        assert_eq!(table.row(Method::ScIc).unwrap().raw.0, 1.0);
        assert!(table.row(Method::Sc).unwrap().raw.0 < 1.0);
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("method,raw_mean"));
    }

    #[test]
    fn deterministic_across_runs() {
        let qs = questions(30, 2);
        let cfg = EvalConfig {
            tune: Some(TuneSetup {
                config: TuneConfig { iterations: 50, ..Default::default() },
                ..Default::default()
            }),
            ..Default::default()
        };
        let a = vote_table(&qs, &cfg).unwrap();
        assert_eq!(a, vote_table(&qs, &cfg).unwrap());
        assert_eq!(a.n_questions, 15);
        assert!(a.row(Method::ScIcTune).is_some());
    }

    #[test]
    fn uniform_transfer_matches_plain_ic() {
        let qs = questions(30, 3);
        let cfg = EvalConfig {
            transfer: Some(LayerWeights::uniform(3, "x")),
            ..Default::default()
        };
        let t = vote_table(&qs, &cfg).unwrap();
        let a = t.row(Method::ScIc).unwrap();
        let b = t.row(Method::ScIcTransfer).unwrap();
        assert_eq!(a.raw, b.raw);
        assert!((a.calibrated.0 - b.calibrated.0).abs() < 1e-12);
    }

    #[test]
    fn missing_greedy_drops_row_and_bad_input_errors() {
        let mut qs = questions(10, 4);
        qs[3].greedy = None;
        let t = vote_table(&qs, &EvalConfig::default()).unwrap();
        assert!(t.row(Method::Greedy).is_none());
        qs[2].gold = None;
        assert!(vote_table(&qs, &EvalConfig::default()).is_err());
        assert!(vote_table(&qs[..1], &EvalConfig::default()).is_err());
        assert!(vote_table(&questions(4, 0), &EvalConfig { seeds: vec![], ..Default::default() }).is_err());
    }
}

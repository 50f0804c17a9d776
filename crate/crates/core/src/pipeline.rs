//! Trace → latent predictions → agreement → per-path records, grouped by
//! question.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{agreement_vector, internal_consistency};
use crate::ensemble::PathRecord;
use crate::error::{Error, Result};
use crate::lens::{fit_thresholds, latent_predictions, record_label_scores, LayerLabelScores, LayerThresholds, LensConfig};
use crate::stats::auc;
use crate::trace::TraceSet;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub lens: LensConfig,
    /// Thresholds fitted elsewhere; when absent they are fitted on this set.
    pub thresholds: Option<LayerThresholds>,
    /// Label recorded in the fitted thresholds.
    pub dataset: String,
}

/// All paths of one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionPaths {
    pub group: String,
    pub gold: Option<usize>,
    pub greedy: Option<PathRecord>,
    pub sampled: Vec<PathRecord>,
}

impl QuestionPaths {
    pub fn is_correct(&self, path: &PathRecord) -> Option<bool> {
        self.gold.map(|g| path.answer == g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub thresholds: LayerThresholds,
    /// Per record, in trace order.
    pub scores: Vec<LayerLabelScores>,
    pub questions: Vec<QuestionPaths>,
}

pub fn run_pipeline(set: &TraceSet, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    if set.records.is_empty() {
        return Err(Error::InvalidInput("trace has no records".into()));
    }
    let scores: Vec<LayerLabelScores> = set
        .records
        .par_iter()
        .map(|r| record_label_scores(set, r))
        .collect::<Result<_>>()?;
    let thresholds = match &cfg.thresholds {
        Some(t) => {
            if t.t.len() != set.layers() + 1 {
                return Err(Error::Shape(format!(
                    "{} thresholds for a model with {} layers",
                    t.t.len(),
                    set.layers()
                )));
            }
            t.clone()
        }
        None => {
            let p_hat: Vec<Vec<f64>> = scores.iter().map(|s| s.normalized_positive.clone()).collect();
            fit_thresholds(&p_hat, &cfg.dataset)?
        }
    };
    let paths: Vec<PathRecord> = set
        .records
        .iter()
        .zip(&scores)
        .map(|(r, s)| {
            let latent = latent_predictions(s, &thresholds, cfg.lens)?;
            let agreement = agreement_vector(&latent, latent.final_label())?;
            let ic = internal_consistency(&agreement)?;
            let last = s.final_layer();
            Ok(PathRecord::new(r.example_id.clone(), latent, agreement, ic, (last.p_true, last.p_false)))
        })
        .collect::<Result<_>>()?;

    let mut questions = Vec::new();
    for (group, idx) in set.groups() {
        let gold = set.records[idx[0]].gold_label;
        if idx.iter().any(|&i| set.records[i].gold_label != gold) {
            return Err(Error::InvalidInput(format!("paths of {group} disagree on the gold label")));
        }
        let mut q = QuestionPaths {
            group,
            gold,
            greedy: None,
            sampled: Vec::new(),
        };
        for i in idx {
            if set.records[i].greedy && q.greedy.is_none() {
                q.greedy = Some(paths[i].clone());
            } else {
                q.sampled.push(paths[i].clone());
            }
        }
        questions.push(q);
    }
    Ok(PipelineOutput {
        thresholds,
        scores,
        questions,
    })
}

/// Sampled paths with a known gold label, with their correctness.
pub fn labelled_paths(questions: &[QuestionPaths]) -> Vec<(&PathRecord, bool)> {
    questions
        .iter()
        .flat_map(|q| q.sampled.iter().filter_map(move |p| q.is_correct(p).map(|c| (p, c))))
        .collect()
}

/// How well IC separates correct from incorrect sampled paths (ROC area).
pub fn ic_auc(questions: &[QuestionPaths]) -> Result<f64> {
    let paths = labelled_paths(questions);
    let scores: Vec<f64> = paths.iter().map(|(p, _)| p.ic.value()).collect();
    let correct: Vec<bool> = paths.iter().map(|(_, c)| *c).collect();
    auc(&scores, &correct)
}

/// Per-layer agreement rate with the final prediction, split by path
/// correctness. Entry `l` covers layer `l` of `0..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementCurve {
    pub correct: Vec<f64>,
    pub incorrect: Vec<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

pub fn agreement_curve(questions: &[QuestionPaths]) -> Result<AgreementCurve> {
    let paths = labelled_paths(questions);
    let width = paths
        .first()
        .map(|(p, _)| p.latent.len())
        .ok_or_else(|| Error::InvalidInput("no labelled paths".into()))?;
    let mut sums = [vec![0.0; width], vec![0.0; width]];
    let mut counts = [0usize; 2];
    for (p, c) in &paths {
        let bucket = (!*c) as usize;
        counts[bucket] += 1;
        for (s, &l) in sums[bucket].iter_mut().zip(&p.latent) {
            *s += (l == p.answer) as u8 as f64;
        }
    }
    let rate = |s: &[f64], n: usize| -> Vec<f64> {
        if n == 0 {
            vec![f64::NAN; s.len()]
        } else {
            s.iter().map(|v| v / n as f64).collect()
        }
    };
    Ok(AgreementCurve {
        correct: rate(&sums[0], counts[0]),
        incorrect: rate(&sums[1], counts[1]),
        n_correct: counts[0],
        n_incorrect: counts[1],
    })
}

/// Accuracy of sampled paths within one IC interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: Option<f64>,
}

/// Equal-width IC bins over `[0, 1]`; the last bin is closed.
pub fn calibration_bins(questions: &[QuestionPaths], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    if n_bins == 0 {
        return Err(Error::InvalidInput("need at least one bin".into()));
    }
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (p, c) in labelled_paths(questions) {
        let b = ((p.ic.value() * n_bins as f64) as usize).min(n_bins - 1);
        counts[b] += 1;
        hits[b] += c as usize;
    }
    Ok((0..n_bins)
        .map(|b| CalibrationBin {
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            count: counts[b],
            accuracy: (counts[b] > 0).then(|| hits[b] as f64 / counts[b] as f64),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::{AgreementVector, IcScore};
    use crate::tensor::Tensor;
    use crate::trace::{AnswerSpace, ExampleRecord, ModelMeta};

    /// Two-token vocabulary with identity unembedding; hidden state
    /// `(a, 0)` at every layer gives `p̂ = sigmoid(a)`.
    fn set_with(layers: usize, rows: &[(&str, Option<usize>, bool, Vec<f32>)]) -> TraceSet {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, (group, gold, greedy, per_layer))| {
                let mut h = Vec::new();
                for &a in per_layer {
                    h.extend([a, 0.0]);
                }
                ExampleRecord {
                    example_id: format!("r{i}"),
                    path_group: group.to_string(),
                    gold_label: *gold,
                    greedy: *greedy,
                    positions: vec![0],
                    answer_position_index: 0,
                    hidden_states: Tensor::new(vec![1, layers + 1, 2], h).unwrap(),
                    attention_rows: None,
                    segments: None,
                }
            })
            .collect();
        TraceSet {
            model_meta: ModelMeta { layers, hidden: 2, heads: 1, vocab_size: 2 },
            vocab: vec!["True".into(), "False".into()],
            unembed: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            answer_space: AnswerSpace::true_false(0, 1).unwrap(),
            records,
            ffn_value_matrices: None,
        }
    }

    #[test]
    fn constant_layers_give_full_consistency() {
        let rows: Vec<_> = (0..6)
            .map(|i| ("g", Some(0), false, vec![i as f32 - 2.5; 5]))
            .collect();
        let out = run_pipeline(&set_with(4, &rows), &PipelineConfig::default()).unwrap();
        for p in &out.questions[0].sampled {
            assert_eq!(p.ic, IcScore(1.0));
        }
    }

    #[test]
    fn grouping_and_greedy() {
        let rows = vec![
            ("a", Some(0), true, vec![1.0, 1.0, 1.0]),
            ("a", Some(0), false, vec![-1.0, 1.0, -1.0]),
            ("b", Some(1), false, vec![2.0, -1.0, 0.5]),
            ("a", Some(0), false, vec![0.0, 0.0, 0.0]),
        ];
        let out = run_pipeline(&set_with(2, &rows), &PipelineConfig::default()).unwrap();
        assert_eq!(out.questions.len(), 2);
        assert_eq!(out.questions[0].group, "a");
        assert_eq!(out.questions[0].greedy.as_ref().unwrap().path_id, "r0");
        assert_eq!(out.questions[0].sampled.len(), 2);
        assert_eq!(out.questions[1].sampled[0].path_id, "r2");
        let mut bad = rows.clone();
        bad[3].1 = Some(1);
        assert!(run_pipeline(&set_with(2, &bad), &PipelineConfig::default()).is_err());
    }

    #[test]
    fn supplied_thresholds_are_used() {
        let rows = vec![("a", None, false, vec![0.0, 0.0, 0.0]), ("b", None, false, vec![0.0, 0.0, 0.0])];
        let t = LayerThresholds { t: vec![0.9, 0.1, 0.1], fitted_on: "x".into(), n_examples: 2 };
        let cfg = PipelineConfig { thresholds: Some(t.clone()), ..Default::default() };
        let out = run_pipeline(&set_with(2, &rows), &cfg).unwrap();
        assert_eq!(out.thresholds, t);
        assert_eq!(out.questions[0].sampled[0].latent, vec![1, 0, 0]);
        let short = LayerThresholds { t: vec![0.5], ..t };
        assert!(run_pipeline(&set_with(2, &rows), &PipelineConfig { thresholds: Some(short), ..Default::default() }).is_err());
    }

    fn path(answer: usize, ic: f64, latent: Vec<usize>) -> PathRecord {
        PathRecord {
            path_id: "p".into(),
            answer,
            latent,
            agreement: AgreementVector { bits: vec![1] },
            ic: IcScore(ic),
            final_probs: (0.5, 0.5),
            delta: 0.0,
        }
    }

    #[test]
    fn auc_curve_and_bins() {
        let q = QuestionPaths {
            group: "g".into(),
            gold: Some(0),
            greedy: None,
            sampled: vec![
                path(0, 1.0, vec![0, 0, 0]),
                path(0, 0.9, vec![1, 0, 0]),
                path(1, 0.2, vec![0, 0, 1]),
                path(1, 0.95, vec![1, 1, 1]),
            ],
        };
        let qs = [q];
        assert!((ic_auc(&qs).unwrap() - 0.75).abs() < 1e-12);
        let curve = agreement_curve(&qs).unwrap();
        assert_eq!(curve.correct, vec![0.5, 1.0, 1.0]);
        assert_eq!(curve.incorrect, vec![0.5, 0.5, 1.0]);
        let bins = calibration_bins(&qs, 2).unwrap();
        assert_eq!(bins[0].count, 1);
        assert_eq!(bins[0].accuracy, Some(0.0));
        assert_eq!(bins[1].count, 3);
        assert!((bins[1].accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }
}

//! Logit lens over the two answer tokens, with per-layer median balancing.
//!
//! Each hidden state is projected through the unembedding, softmaxed over
//! the full vocabulary, and reduced to the pairwise-normalized positive
//! probability `p̂ = p(pos) / (p(pos) + p(neg))`. Raw latent predictions
//! are skewed towards one label at many layers, so every layer gets its
//! own decision threshold: the median `p̂` over the dataset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::median;
use crate::trace::{AnswerSpace, ExampleRecord, TraceSet};

/// `unembed · hidden` for an unembedding of shape `[V × d]` (row-major).
pub fn layer_logits(hidden: &[f32], unembed: &[f32], vocab_size: usize) -> Result<Vec<f32>> {
    let d = hidden.len();
    if d == 0 || unembed.len() != vocab_size * d {
        return Err(Error::Shape(format!(
            "unembed has {} entries, expected {vocab_size} x {d}",
            unembed.len()
        )));
    }
    Ok(unembed
        .chunks_exact(d)
        .map(|row| {
            let acc: f64 = row.iter().zip(hidden).map(|(&w, &h)| w as f64 * h as f64).sum();
            acc as f32
        })
        .collect())
}

/// Full-vocabulary softmax probabilities of the two answer tokens and the
/// pairwise-normalized positive probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScore {
    pub p_true: f64,
    pub p_false: f64,
    pub p_hat: f64,
}

pub fn label_scores(logits: &[f32], answers: &AnswerSpace) -> Result<LabelScore> {
    let [pos, neg] = answers.token_ids.map(|t| t as usize);
    if pos >= logits.len() || neg >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "answer token ids {:?} out of range for {} logits",
            answers.token_ids,
            logits.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {bad}")));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let z: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let p_true = (logits[pos] as f64 - max).exp() / z;
    let p_false = (logits[neg] as f64 - max).exp() / z;
    // Pairwise ratio from the logit gap, exact even when both probabilities underflow.
    let gap = logits[pos] as f64 - logits[neg] as f64;
    let p_hat = 1.0 / (1.0 + (-gap).exp());
    Ok(LabelScore {
        p_true,
        p_false,
        p_hat,
    })
}

/// Per-layer two-label probabilities at one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLabelScores {
    /// `[L + 1]` rows of `(p̂, 1 − p̂)`.
    pub scores: Vec<[f64; 2]>,
    /// `p̂` per layer.
    pub normalized_positive: Vec<f64>,
    /// Unnormalized full-vocabulary probabilities per layer.
    pub raw: Vec<LabelScore>,
}

impl LayerLabelScores {
    pub fn final_layer(&self) -> &LabelScore {
        self.raw.last().expect("at least one layer")
    }
}

/// Logit lens at the answer position of `record`, for every layer 0..=L.
pub fn record_label_scores(set: &TraceSet, record: &ExampleRecord) -> Result<LayerLabelScores> {
    let meta = set.model_meta;
    let mut raw = Vec::with_capacity(meta.layers + 1);
    for layer in 0..=meta.layers {
        let logits = layer_logits(record.answer_hidden(layer), set.unembed.data(), meta.vocab_size)?;
        raw.push(label_scores(&logits, &set.answer_space)?);
    }
    let normalized_positive: Vec<f64> = raw.iter().map(|s| s.p_hat).collect();
    Ok(LayerLabelScores {
        scores: normalized_positive.iter().map(|&p| [p, 1.0 - p]).collect(),
        normalized_positive,
        raw,
    })
}

/// Per-layer decision thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerThresholds {
    pub t: Vec<f64>,
    pub fitted_on: String,
    pub n_examples: usize,
}

/// Median of each column of an `N × (L + 1)` matrix of `p̂` values.
pub fn fit_thresholds(p_hat: &[Vec<f64>], fitted_on: &str) -> Result<LayerThresholds> {
    if p_hat.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 examples to fit thresholds, got {}",
            p_hat.len()
        )));
    }
    let width = p_hat[0].len();
    if p_hat.iter().any(|row| row.len() != width) {
        return Err(Error::Shape("ragged p̂ matrix".into()));
    }
    let mut t = Vec::with_capacity(width);
    let mut column = Vec::with_capacity(p_hat.len());
    for l in 0..width {
        column.clear();
        column.extend(p_hat.iter().map(|row| row[l]));
        t.push(median(&column)?);
    }
    Ok(LayerThresholds {
        t,
        fitted_on: fitted_on.to_owned(),
        n_examples: p_hat.len(),
    })
}

/// Balanced label per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentPredictionVector {
    pub labels: Vec<usize>,
}

impl LatentPredictionVector {
    pub fn final_label(&self) -> usize {
        *self.labels.last().expect("nonempty")
    }
}

/// Positive label at layer `l` iff `p̂[l] >= t[l]`.
pub fn balanced_prediction(p_hat: &[f64], thresholds: &LayerThresholds) -> Result<LatentPredictionVector> {
    if p_hat.len() != thresholds.t.len() {
        return Err(Error::Shape(format!(
            "{} p̂ values for {} thresholds",
            p_hat.len(),
            thresholds.t.len()
        )));
    }
    Ok(LatentPredictionVector {
        labels: p_hat
            .iter()
            .zip(&thresholds.t)
            .map(|(&p, &t)| {
                if p >= t {
                    AnswerSpace::POSITIVE
                } else {
                    AnswerSpace::NEGATIVE
                }
            })
            .collect(),
    })
}

/// Options for turning per-layer scores into latent predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LensConfig {
    /// Use the raw two-label argmax at the final layer instead of the
    /// balanced prediction (ties go to the positive label).
    pub raw_final: bool,
}

/// Latent predictions for one record, honoring [`LensConfig::raw_final`].
pub fn latent_predictions(
    scores: &LayerLabelScores,
    thresholds: &LayerThresholds,
    cfg: LensConfig,
) -> Result<LatentPredictionVector> {
    let mut latent = balanced_prediction(&scores.normalized_positive, thresholds)?;
    if cfg.raw_final {
        let last = scores.final_layer();
        let label = if last.p_true >= last.p_false {
            AnswerSpace::POSITIVE
        } else {
            AnswerSpace::NEGATIVE
        };
        *latent.labels.last_mut().expect("nonempty") = label;
    }
    Ok(latent)
}

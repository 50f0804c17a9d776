//! Learned per-layer weights for weighted internal consistency.
//!
//! The weights are fit on held-out questions by full-batch Adam on a
//! softmax cross-entropy surrogate of the weighted vote: for question `q`
//! with gold label `g`, each label's score is
//! `S_q(a) = Σ_{paths k answering a} wᵀ a_k`, and the loss is
//! `mean_q [logsumexp_a S_q(a) − S_q(g)] + λ‖w − w₀‖²`, with `w₀` the
//! uniform vector `1/(L−1)`.

use serde::{Deserialize, Serialize};

use crate::consistency::AgreementVector;
use crate::ensemble::{vote_sc_ic, Method, PathRecord, VoteResult};
use crate::error::{Error, Result};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub lr: f64,
    pub iterations: usize,
    pub n_heldout: usize,
    pub seed: u64,
    /// Strength of the pull towards the uniform initialization.
    pub l2: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            iterations: 1000,
            n_heldout: 500,
            seed: 0,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub lr: f64,
    pub iterations: usize,
    pub n_heldout: usize,
    pub seed: u64,
    pub l2: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// One weight per intermediate layer `1..=L-1`.
    pub w: Vec<f64>,
    pub source_dataset: String,
    pub training_meta: Option<TrainingMeta>,
}

impl LayerWeights {
    pub fn uniform(len: usize, source_dataset: &str) -> Self {
        Self {
            w: vec![1.0 / len as f64; len],
            source_dataset: source_dataset.to_owned(),
            training_meta: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(text)?;
        if w.w.is_empty() || w.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("layer weights must be finite and nonempty".into()));
        }
        Ok(w)
    }

    /// Weights divided by their L1 norm.
    pub fn normalized(&self) -> Vec<f64> {
        let norm: f64 = self.w.iter().map(|v| v.abs()).sum();
        if norm == 0.0 {
            return self.w.clone();
        }
        self.w.iter().map(|v| v / norm).collect()
    }
}

/// One held-out question: each path's answer and agreement vector, plus gold.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutQuestion {
    pub paths: Vec<(usize, AgreementVector)>,
    pub gold: usize,
}

impl HeldoutQuestion {
    pub fn from_paths(paths: &[PathRecord], gold: usize) -> Self {
        Self {
            paths: paths.iter().map(|p| (p.answer, p.agreement.clone())).collect(),
            gold,
        }
    }
}

/// Per-question sums of agreement vectors per label, the sufficient
/// statistic of the surrogate.
struct Summaries {
    width: usize,
    /// `[q][label][layer]`.
    sums: Vec<[Vec<f64>; 2]>,
    golds: Vec<usize>,
}

impl Summaries {
    fn build(questions: &[HeldoutQuestion]) -> Result<Self> {
        if questions.is_empty() {
            return Err(Error::InvalidInput("empty held-out set".into()));
        }
        let width = questions
            .iter()
            .flat_map(|q| q.paths.first())
            .map(|(_, a)| a.len())
            .next()
            .ok_or_else(|| Error::InvalidInput("held-out questions have no paths".into()))?;
        if width == 0 {
            return Err(Error::InvalidInput("agreement vectors are empty".into()));
        }
        let mut sums = Vec::with_capacity(questions.len());
        let mut golds = Vec::with_capacity(questions.len());
        for (qi, q) in questions.iter().enumerate() {
            if q.paths.is_empty() {
                return Err(Error::InvalidInput(format!("held-out question {qi} has no paths")));
            }
            if q.gold > 1 {
                return Err(Error::InvalidInput(format!("held-out question {qi} has gold {}", q.gold)));
            }
            let mut s = [vec![0.0; width], vec![0.0; width]];
            for (answer, a) in &q.paths {
                if a.len() != width {
                    return Err(Error::Shape(format!(
                        "agreement vector of length {} in question {qi}, expected {width}",
                        a.len()
                    )));
                }
                if *answer > 1 {
                    return Err(Error::InvalidInput(format!("path answer {answer} in question {qi}")));
                }
                for (acc, &b) in s[*answer].iter_mut().zip(&a.bits) {
                    *acc += b as f64;
                }
            }
            sums.push(s);
            golds.push(q.gold);
        }
        Ok(Self { width, sums, golds })
    }

    /// Loss and gradient at `w`.
    fn loss_grad(&self, w: &[f64], l2: f64, w0: &[f64]) -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.width];
        for (s, &g) in self.sums.iter().zip(&self.golds) {
            let score = [dot(&s[0], w), dot(&s[1], w)];
            let m = score[0].max(score[1]);
            let lse = m + ((score[0] - m).exp() + (score[1] - m).exp()).ln();
            loss += lse - score[g];
            for label in 0..2 {
                let p = (score[label] - lse).exp();
                let coeff = p - (label == g) as u8 as f64;
                for (gr, &x) in grad.iter_mut().zip(&s[label]) {
                    *gr += coeff * x;
                }
            }
        }
        let n = self.sums.len() as f64;
        loss /= n;
        for gr in &mut grad {
            *gr /= n;
        }
        if l2 != 0.0 {
            for i in 0..self.width {
                let diff = w[i] - w0[i];
                loss += l2 * diff * diff;
                grad[i] += 2.0 * l2 * diff;
            }
        }
        (loss, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Surrogate loss of `w` on `questions` (same definition used in training).
pub fn surrogate_loss(w: &[f64], questions: &[HeldoutQuestion], l2: f64) -> Result<f64> {
    let summaries = Summaries::build(questions)?;
    if w.len() != summaries.width {
        return Err(Error::Shape(format!(
            "{} weights for agreement vectors of length {}",
            w.len(),
            summaries.width
        )));
    }
    let w0 = vec![1.0 / w.len() as f64; w.len()];
    Ok(summaries.loss_grad(w, l2, &w0).0)
}

/// Analytic gradient of [`surrogate_loss`].
pub fn surrogate_gradient(w: &[f64], questions: &[HeldoutQuestion], l2: f64) -> Result<Vec<f64>> {
    let summaries = Summaries::build(questions)?;
    if w.len() != summaries.width {
        return Err(Error::Shape("weight length mismatch".into()));
    }
    let w0 = vec![1.0 / w.len() as f64; w.len()];
    Ok(summaries.loss_grad(w, l2, &w0).1)
}

/// Fits layer weights by full-batch Adam from the uniform initialization.
pub fn tune_weights(questions: &[HeldoutQuestion], cfg: &TuneConfig, source_dataset: &str) -> Result<LayerWeights> {
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let summaries = Summaries::build(questions)?;
    let width = summaries.width;
    let w0 = vec![1.0 / width as f64; width];
    let mut w = w0.clone();
    let mut adam = Adam::new(width, cfg.lr);
    let (initial_loss, _) = summaries.loss_grad(&w, cfg.l2, &w0);
    for _ in 0..cfg.iterations {
        let (_, grad) = summaries.loss_grad(&w, cfg.l2, &w0);
        adam.step(&mut w, &grad);
    }
    let (final_loss, _) = summaries.loss_grad(&w, cfg.l2, &w0);
    if w.iter().any(|v| !v.is_finite()) || !final_loss.is_finite() {
        return Err(Error::NonFinite("layer-weight tuning produced non-finite weights".into()));
    }
    Ok(LayerWeights {
        w,
        source_dataset: source_dataset.to_owned(),
        training_meta: Some(TrainingMeta {
            lr: cfg.lr,
            iterations: cfg.iterations,
            n_heldout: questions.len(),
            seed: cfg.seed,
            l2: cfg.l2,
            initial_loss,
            final_loss,
        }),
    })
}

/// Weighted SC+IC on every question of a target set, without refitting.
pub fn apply_transfer(weights: &LayerWeights, target: &[Vec<PathRecord>]) -> Result<Vec<VoteResult>> {
    target
        .iter()
        .map(|paths| {
            if let Some(p) = paths.iter().find(|p| p.agreement.len() != weights.w.len()) {
                return Err(Error::Shape(format!(
                    "weights cover {} intermediate layers but path {} has {}",
                    weights.w.len(),
                    p.path_id,
                    p.agreement.len()
                )));
            }
            let mut r = vote_sc_ic(paths, Some(&weights.w))?;
            r.method = Method::ScIcTransfer;
            Ok(r)
        })
        .collect()
}

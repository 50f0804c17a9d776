//! Linear probes on hidden states, one per (reasoning step, layer) cell.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logistic::fit_logistic;
use crate::trace::{AnswerSpace, TraceSet};

/// Thirteen strengths, one per decade from 1e-6 to 1e6.
pub fn default_l2_grid() -> Vec<f64> {
    (-6..=6).map(|e| 10f64.powi(e)).collect()
}

pub const MIN_EXAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_strength: f64,
    pub val_accuracy: f64,
}

impl ProbeModel {
    /// Predicted label index (0 = positive).
    pub fn predict(&self, x: &[f64]) -> usize {
        let z: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias;
        if z >= 0.0 {
            AnswerSpace::POSITIVE
        } else {
            AnswerSpace::NEGATIVE
        }
    }
}

/// 80/20 partition of `0..n`, shuffled with `seed`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (n * 4) / 5;
        let val = idx.split_off(n_train);
        Self { train: idx, val }
    }
}

/// Fits one probe per strength on the split's training part and keeps the
/// best by validation accuracy (ties go to the smaller strength).
pub fn fit_probe_on_split(features: &[Vec<f64>], labels: &[usize], l2_grid: &[f64], split: &Split) -> Result<ProbeModel> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", features.len(), labels.len())));
    }
    if l2_grid.is_empty() {
        return Err(Error::InvalidInput("empty regularization grid".into()));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::InvalidInput("split has an empty side".into()));
    }
    let ys: Vec<bool> = labels.iter().map(|&l| l == AnswerSpace::POSITIVE).collect();
    let train_x: Vec<&[f64]> = split.train.iter().map(|&i| features[i].as_slice()).collect();
    let train_y: Vec<bool> = split.train.iter().map(|&i| ys[i]).collect();
    if train_y.iter().all(|&y| y) || train_y.iter().all(|&y| !y) {
        return Err(Error::InvalidInput("training split contains a single class".into()));
    }
    let val_x: Vec<&[f64]> = split.val.iter().map(|&i| features[i].as_slice()).collect();
    let val_y: Vec<bool> = split.val.iter().map(|&i| ys[i]).collect();

    let mut sorted = l2_grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<ProbeModel> = None;
    for &lambda in &sorted {
        let fit = fit_logistic(&train_x, &train_y, lambda, true)?;
        let acc = fit.accuracy(&val_x, &val_y);
        if best.as_ref().is_none_or(|b| acc > b.val_accuracy) {
            best = Some(ProbeModel {
                weights: fit.weights,
                bias: fit.bias,
                l2_strength: lambda,
                val_accuracy: acc,
            });
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// [`fit_probe_on_split`] with a fresh seeded 80/20 split.
pub fn fit_probe(features: &[Vec<f64>], labels: &[usize], l2_grid: &[f64], seed: u64) -> Result<ProbeModel> {
    check_labels(features.len(), labels)?;
    fit_probe_on_split(features, labels, l2_grid, &Split::new(features.len(), seed))
}

fn check_labels(n: usize, labels: &[usize]) -> Result<()> {
    if n < MIN_EXAMPLES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_EXAMPLES} examples to probe, got {n}"
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidInput("labels contain a single class".into()));
    }
    Ok(())
}

/// Probe accuracies per recorded step (rows) and layer (columns). The last
/// row is the answer position. `None` marks cells with too few records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub accuracies: Vec<Vec<Option<f64>>>,
    pub row_labels: Vec<String>,
    pub split_seed: u64,
}

impl ProbeGrid {
    pub fn to_csv(&self) -> String {
        let width = self.accuracies.first().map_or(0, Vec::len);
        let mut out = String::from("step");
        for l in 0..width {
            out.push_str(&format!(",layer_{l}"));
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.accuracies) {
            out.push_str(label);
            for cell in row {
                match cell {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Last row (answer position), last column.
    pub fn answer_final(&self) -> Option<f64> {
        self.accuracies.last().and_then(|r| r.last().copied().flatten())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeGridConfig {
    pub seed: u64,
    /// Draw a separate split per cell instead of sharing one.
    pub per_cell_split: bool,
}

/// Fits a probe for every (step, layer) cell of `set`, using each record's
/// gold label. Steps are left-aligned: records without step `s` are
/// excluded from row `s`.
pub fn probe_grid(set: &TraceSet, cfg: ProbeGridConfig) -> Result<ProbeGrid> {
    let labels: Vec<usize> = set
        .records
        .iter()
        .map(|r| {
            r.gold_label
                .ok_or_else(|| Error::InvalidInput(format!("record {} has no gold label", r.example_id)))
        })
        .collect::<Result<_>>()?;
    check_labels(set.records.len(), &labels)?;

    let max_steps = set.records.iter().map(|r| r.num_positions() - 1).max().unwrap_or(0);
    let layers = set.model_meta.layers + 1;
    let shared = Split::new(set.records.len(), cfg.seed);
    let grid = default_l2_grid();

    // Row s < max_steps is step s; the final row is the answer position.
    let rows = max_steps + 1;
    let cells: Vec<(usize, usize)> = (0..rows).flat_map(|s| (0..layers).map(move |l| (s, l))).collect();
    let results: Vec<Result<Option<f64>>> = cells
        .par_iter()
        .map(|&(s, l)| {
            let mut members = Vec::new();
            let mut features = Vec::new();
            for (ri, r) in set.records.iter().enumerate() {
                let pos = if s == max_steps {
                    Some(r.answer_position_index)
                } else {
                    r.step_indices().nth(s)
                };
                if let Some(p) = pos {
                    members.push(ri);
                    features.push(r.hidden(p, l).iter().map(|&v| v as f64).collect::<Vec<f64>>());
                }
            }
            let cell_labels: Vec<usize> = members.iter().map(|&ri| labels[ri]).collect();
            let split = if cfg.per_cell_split {
                Split::new(members.len(), cfg.seed ^ ((s as u64) << 32 | l as u64))
            } else {
                let local: std::collections::HashMap<usize, usize> =
                    members.iter().enumerate().map(|(i, &ri)| (ri, i)).collect();
                Split {
                    train: shared.train.iter().filter_map(|ri| local.get(ri).copied()).collect(),
                    val: shared.val.iter().filter_map(|ri| local.get(ri).copied()).collect(),
                }
            };
            let enough = members.len() >= MIN_EXAMPLES && !split.val.is_empty();
            let two_classes = {
                let first = split.train.first().map(|&i| cell_labels[i]);
                split.train.iter().any(|&i| Some(cell_labels[i]) != first)
            };
            if !enough || !two_classes {
                return Ok(None);
            }
            fit_probe_on_split(&features, &cell_labels, &grid, &split).map(|m| Some(m.val_accuracy))
        })
        .collect();

    let mut accuracies = vec![vec![None; layers]; rows];
    for (&(s, l), r) in cells.iter().zip(results) {
        accuracies[s][l] = r?;
    }
    let mut row_labels: Vec<String> = (0..max_steps).map(|s| format!("step_{s}")).collect();
    row_labels.push("answer".into());
    Ok(ProbeGrid {
        accuracies,
        row_labels,
        split_seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let centre = if label == 0 { 1.5 } else { -1.5 };
            xs.push(vec![centre + rng.random_range(-0.9..0.9), rng.random_range(-3.0..3.0)]);
            ys.push(label);
        }
        (xs, ys)
    }

    #[test]
    fn grid_has_thirteen_decades() {
        let g = default_l2_grid();
        assert_eq!(g.len(), 13);
        assert_eq!(g[0], 1e-6);
        assert_eq!(g[12], 1e6);
    }

    #[test]
    fn separable_blobs_are_perfect() {
        let (xs, ys) = blobs(100, 4);
        let m = fit_probe(&xs, &ys, &default_l2_grid(), 0).unwrap();
        assert_eq!(m.val_accuracy, 1.0);
        // Ties resolve to the smallest strength.
        assert_eq!(m.l2_strength, 1e-6);
    }

    #[test]
    fn coin_flip_labels_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let xs: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        let m = fit_probe(&xs, &ys, &default_l2_grid(), 1).unwrap();
        assert!((0.35..=0.65).contains(&m.val_accuracy), "{}", m.val_accuracy);
    }

    #[test]
    fn constant_features_give_majority_rate() {
        let xs = vec![vec![1.0, 2.0]; 50];
        let ys: Vec<usize> = (0..50).map(|i| (i % 3 == 0) as usize).collect();
        let split = Split::new(50, 3);
        let m = fit_probe_on_split(&xs, &ys, &default_l2_grid(), &split).unwrap();
        let train_pos = split.train.iter().filter(|&&i| ys[i] == 0).count();
        let train_majority = if 2 * train_pos >= split.train.len() { 0 } else { 1 };
        let expected = split.val.iter().filter(|&&i| ys[i] == train_majority).count() as f64 / split.val.len() as f64;
        assert!((m.val_accuracy - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (xs, _) = blobs(20, 1);
        assert!(fit_probe(&xs, &[0; 20], &default_l2_grid(), 0).is_err());
        assert!(fit_probe(&xs[..5], &[0, 1, 0, 1, 0], &default_l2_grid(), 0).is_err());
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let a = Split::new(200, 9);
        assert_eq!(a, Split::new(200, 9));
        assert_eq!(a.train.len(), 160);
        assert_eq!(a.val.len(), 40);
    }

    #[test]
    fn scaling_features_and_strength_preserves_predictions() {
        let (xs, ys) = blobs(60, 8);
        let split = Split::new(60, 2);
        let c = 3.0;
        let scaled: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v * c).collect()).collect();
        let a = fit_probe_on_split(&xs, &ys, &[0.5], &split).unwrap();
        let b = fit_probe_on_split(&scaled, &ys, &[0.5 * c * c], &split).unwrap();
        for (x, s) in xs.iter().zip(&scaled) {
            assert_eq!(a.predict(x), b.predict(s));
        }
    }
}

//! Answer selection over sampled reasoning paths and calibrated accuracy.
//!
//! Every vote accumulates a per-label mass and picks the label with the
//! larger mass; ties go to label 0. The signed margin
//! `mass(positive) - mass(negative)` feeds calibrated accuracy, which
//! thresholds margins at their median so predictions split 50/50.

use serde::{Deserialize, Serialize};

use crate::consistency::{weighted_consistency, AgreementVector, IcScore};
use crate::error::{Error, Result};
use crate::lens::LatentPredictionVector;
use crate::stats::median;
use crate::trace::AnswerSpace;

/// One sampled reasoning path, reduced to what the votes need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub path_id: String,
    pub answer: usize,
    pub latent: Vec<usize>,
    pub agreement: AgreementVector,
    pub ic: IcScore,
    /// Full-vocabulary probabilities `(p_true, p_false)` at the final layer.
    pub final_probs: (f64, f64),
    /// Gap between the two answer-token probabilities.
    pub delta: f64,
}

impl PathRecord {
    pub fn new(
        path_id: impl Into<String>,
        latent: LatentPredictionVector,
        agreement: AgreementVector,
        ic: IcScore,
        final_probs: (f64, f64),
    ) -> Self {
        Self {
            path_id: path_id.into(),
            answer: latent.final_label(),
            latent: latent.labels,
            agreement,
            ic,
            final_probs,
            delta: (final_probs.0 - final_probs.1).abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Greedy,
    Sc,
    ScDelta,
    ScIc,
    ScIcTune,
    ScIcTransfer,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Greedy => "Greedy",
            Method::Sc => "SC",
            Method::ScDelta => "SC+Delta",
            Method::ScIc => "SC+IC",
            Method::ScIcTune => "SC+IC (tune)",
            Method::ScIcTransfer => "SC+IC (transfer)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub chosen: usize,
    pub per_label_mass: [f64; 2],
    /// `mass(positive) - mass(negative)`.
    pub margin: f64,
    pub method: Method,
}

impl VoteResult {
    fn from_mass(mass: [f64; 2], method: Method) -> Self {
        let chosen = if mass[AnswerSpace::POSITIVE] >= mass[AnswerSpace::NEGATIVE] {
            AnswerSpace::POSITIVE
        } else {
            AnswerSpace::NEGATIVE
        };
        Self {
            chosen,
            per_label_mass: mass,
            margin: mass[AnswerSpace::POSITIVE] - mass[AnswerSpace::NEGATIVE],
            method,
        }
    }
}

fn nonempty(paths: &[PathRecord]) -> Result<()> {
    if paths.is_empty() {
        Err(Error::InvalidInput("cannot vote over zero paths".into()))
    } else {
        Ok(())
    }
}

fn accumulate(paths: &[PathRecord], mut weight: impl FnMut(&PathRecord) -> Result<f64>) -> Result<[f64; 2]> {
    let mut mass = [0.0; 2];
    for p in paths {
        if p.answer > 1 {
            return Err(Error::InvalidInput(format!("path {} has label {}", p.path_id, p.answer)));
        }
        mass[p.answer] += weight(p)?;
    }
    Ok(mass)
}

/// Majority vote.
pub fn vote_sc(paths: &[PathRecord]) -> Result<VoteResult> {
    nonempty(paths)?;
    Ok(VoteResult::from_mass(accumulate(paths, |_| Ok(1.0))?, Method::Sc))
}

/// Vote weighted by internal consistency, or by `wᵀa` when layer weights are given.
pub fn vote_sc_ic(paths: &[PathRecord], weights: Option<&[f64]>) -> Result<VoteResult> {
    nonempty(paths)?;
    let mass = match weights {
        None => accumulate(paths, |p| Ok(p.ic.value()))?,
        Some(w) => accumulate(paths, |p| weighted_consistency(&p.agreement, w))?,
    };
    Ok(VoteResult::from_mass(mass, Method::ScIc))
}

/// How the per-path Δ values of one label are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaAggregation {
    #[default]
    Sum,
    Mean,
    Max,
}

/// Vote weighted by the final-layer probability gap Δ.
pub fn vote_sc_delta(paths: &[PathRecord], agg: DeltaAggregation) -> Result<VoteResult> {
    nonempty(paths)?;
    let sums = accumulate(paths, |p| Ok(p.delta))?;
    let mass = match agg {
        DeltaAggregation::Sum => sums,
        DeltaAggregation::Mean => {
            let counts = accumulate(paths, |_| Ok(1.0))?;
            [0, 1].map(|l| if counts[l] > 0.0 { sums[l] / counts[l] } else { 0.0 })
        }
        DeltaAggregation::Max => {
            let mut m = [0.0f64; 2];
            for p in paths {
                m[p.answer] = m[p.answer].max(p.delta);
            }
            m
        }
    };
    Ok(VoteResult::from_mass(mass, Method::ScDelta))
}

/// The greedy path's own answer, with margin `p_true - p_false`.
pub fn vote_greedy(greedy_path: &PathRecord) -> VoteResult {
    let (p_true, p_false) = greedy_path.final_probs;
    let mut mass = [0.0; 2];
    mass[AnswerSpace::POSITIVE] = p_true;
    mass[AnswerSpace::NEGATIVE] = p_false;
    VoteResult {
        chosen: greedy_path.answer,
        per_label_mass: mass,
        margin: p_true - p_false,
        method: Method::Greedy,
    }
}

/// Accuracy after thresholding margins at their median (positive iff
/// `margin >= median`).
pub fn calibrated_accuracy(margins: &[f64], golds: &[usize]) -> Result<f64> {
    if margins.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} margins for {} gold labels",
            margins.len(),
            golds.len()
        )));
    }
    if margins.len() < 2 {
        return Err(Error::InvalidInput("calibrated accuracy needs at least 2 examples".into()));
    }
    if let Some(g) = golds.iter().find(|&&g| g > 1) {
        return Err(Error::InvalidInput(format!("invalid gold label {g}")));
    }
    let t = median(margins)?;
    let hits = margins
        .iter()
        .zip(golds)
        .filter(|(&m, &g)| {
            let pred = if m >= t { AnswerSpace::POSITIVE } else { AnswerSpace::NEGATIVE };
            pred == g
        })
        .count();
    Ok(hits as f64 / margins.len() as f64)
}

/// Plain accuracy of chosen labels.
pub fn raw_accuracy(chosen: &[usize], golds: &[usize]) -> f64 {
    let hits = chosen.iter().zip(golds).filter(|(a, b)| a == b).count();
    hits as f64 / chosen.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path(answer: usize, ic: f64) -> PathRecord {
        PathRecord {
            path_id: "p".into(),
            answer,
            latent: vec![answer; 3],
            agreement: AgreementVector { bits: vec![1] },
            ic: IcScore(ic),
            final_probs: (0.5, 0.5),
            delta: 0.0,
        }
    }

    fn path_delta(answer: usize, delta: f64) -> PathRecord {
        PathRecord { delta, ..path(answer, 1.0) }
    }

    #[test]
    fn majority_vote() {
        let r = vote_sc(&[path(0, 0.1), path(0, 0.1), path(1, 0.1)]).unwrap();
        assert_eq!(r.chosen, 0);
        assert_eq!(r.per_label_mass, [2.0, 1.0]);
        let r = vote_sc(&[path(0, 0.1), path(1, 0.1)]).unwrap();
        assert_eq!(r.chosen, 0);
        assert_eq!(r.margin, 0.0);
        assert!(vote_sc(&[]).is_err());
    }

    #[test]
    fn sc_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let paths: Vec<PathRecord> = (0..40).map(|_| path(rng.random_range(0..2), rng.random())).collect();
        let mut counts = std::collections::HashMap::new();
        for p in &paths {
            *counts.entry(p.answer).or_insert(0usize) += 1;
        }
        let c0 = *counts.get(&0).unwrap_or(&0);
        let c1 = *counts.get(&1).unwrap_or(&0);
        let r = vote_sc(&paths).unwrap();
        assert_eq!(r.per_label_mass, [c0 as f64, c1 as f64]);
        assert_eq!(r.chosen, if c0 >= c1 { 0 } else { 1 });
    }

    #[test]
    fn higher_consistency_path_wins() {
        // False path with IC 0.875 against a True path with IC 0.656.
        let paths = [path(AnswerSpace::NEGATIVE, 0.875), path(AnswerSpace::POSITIVE, 0.656)];
        assert_eq!(vote_sc_ic(&paths, None).unwrap().chosen, AnswerSpace::NEGATIVE);
    }

    #[test]
    fn unanimous_paths_ignore_ic() {
        let paths = [path(1, 0.0), path(1, 0.3), path(1, 1.0)];
        assert_eq!(vote_sc_ic(&paths, None).unwrap().chosen, 1);
    }

    #[test]
    fn weighted_length_mismatch() {
        assert!(vote_sc_ic(&[path(0, 1.0)], Some(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn delta_votes() {
        let p = PathRecord::new(
            "a",
            LatentPredictionVector { labels: vec![1, 1, 1] },
            AgreementVector { bits: vec![1] },
            IcScore(1.0),
            (0.7, 0.3),
        );
        assert!((p.delta - 0.4).abs() < 1e-12);
        assert_eq!(vote_sc_delta(&[p], DeltaAggregation::Sum).unwrap().chosen, 1);
        let r = vote_sc_delta(&[path_delta(0, 0.1), path_delta(1, 0.9)], DeltaAggregation::Sum).unwrap();
        assert_eq!(r.chosen, 1);
        let r = vote_sc_delta(&[path_delta(0, 0.4), path_delta(1, 0.4)], DeltaAggregation::Sum).unwrap();
        assert_eq!(r.chosen, 0);
    }

    #[test]
    fn delta_aggregations_differ() {
        let paths = [path_delta(0, 0.3), path_delta(0, 0.3), path_delta(1, 0.5)];
        assert_eq!(vote_sc_delta(&paths, DeltaAggregation::Sum).unwrap().chosen, 0);
        assert_eq!(vote_sc_delta(&paths, DeltaAggregation::Mean).unwrap().chosen, 1);
        assert_eq!(vote_sc_delta(&paths, DeltaAggregation::Max).unwrap().chosen, 1);
    }

    #[test]
    fn greedy_vote() {
        let r = vote_greedy(&path(0, 1.0));
        assert_eq!(r.chosen, 0);
        assert_eq!(r.margin, 0.0);
        for (pt, pf) in [(0.9, 0.05), (0.1, 0.6), (0.3, 0.3)] {
            let q = PathRecord::new(
                "g",
                LatentPredictionVector { labels: vec![0, 0, if pt >= pf { 0 } else { 1 }] },
                AgreementVector { bits: vec![1] },
                IcScore(1.0),
                (pt, pf),
            );
            let r = vote_greedy(&q);
            assert_eq!(r.margin >= 0.0, r.chosen == AnswerSpace::POSITIVE);
        }
    }

    #[test]
    fn calibrated_accuracy_cases() {
        assert_eq!(calibrated_accuracy(&[0.9, -0.9], &[0, 1]).unwrap(), 1.0);
        // Degenerate median: everything predicted positive.
        let golds = [0, 1, 1, 0, 0];
        assert_eq!(calibrated_accuracy(&[0.2; 5], &golds).unwrap(), 0.6);
        assert!(calibrated_accuracy(&[0.1], &[0]).is_err());
    }

    #[test]
    fn calibrated_accuracy_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let margins: Vec<f64> = (0..101).map(|_| rng.random_range(-1.0..1.0)).collect();
        let golds: Vec<usize> = (0..101).map(|_| rng.random_range(0..2)).collect();
        let mut sorted = margins.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let t = sorted[50];
        let hits = margins
            .iter()
            .zip(&golds)
            .filter(|(&m, &g)| (m >= t) == (g == 0))
            .count();
        assert_eq!(calibrated_accuracy(&margins, &golds).unwrap(), hits as f64 / 101.0);
    }

    proptest! {
        #[test]
        fn scaling_keeps_choice(ics in prop::collection::vec((0usize..2, 0.0f64..1.0), 1..12), c in 0.01f64..100.0) {
            let a: Vec<PathRecord> = ics.iter().map(|&(l, v)| path(l, v)).collect();
            let b: Vec<PathRecord> = ics.iter().map(|&(l, v)| path(l, v * c)).collect();
            let ra = vote_sc_ic(&a, None).unwrap();
            let rb = vote_sc_ic(&b, None).unwrap();
            // Exact ties may not survive float rescaling.
            if ra.per_label_mass[0] != ra.per_label_mass[1] {
                prop_assert_eq!(ra.chosen, rb.chosen);
            }
        }

        #[test]
        fn equal_ic_reduces_to_sc(labels in prop::collection::vec(0usize..2, 1..15), v in 0.01f64..1.0) {
            let paths: Vec<PathRecord> = labels.iter().map(|&l| path(l, v)).collect();
            prop_assert_eq!(vote_sc_ic(&paths, None).unwrap().chosen, vote_sc(&paths).unwrap().chosen);
        }

        #[test]
        fn calibrated_accuracy_monotone_invariant(pairs in prop::collection::vec((-5.0f64..5.0, 0usize..2), 2..60)) {
            let margins: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let golds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let transformed: Vec<f64> = margins.iter().map(|m| m.exp()).collect();
            let a = calibrated_accuracy(&margins, &golds).unwrap();
            let b = calibrated_accuracy(&transformed, &golds).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn median_split_is_balanced(margins in prop::collection::hash_set(-1_000_000i64..1_000_000, 2..80)) {
            let m: Vec<f64> = margins.into_iter().map(|v| v as f64).collect();
            let t = median(&m).unwrap();
            let pos = m.iter().filter(|&&v| v >= t).count();
            let neg = m.len() - pos;
            prop_assert!(pos.abs_diff(neg) <= 1);
        }
    }
}

//! Component analyses: where the answer token attends per layer, and which
//! FFN value vectors point along the direction of the final prediction.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{label_scores, layer_logits};
use crate::logistic::fit_logistic;
use crate::probing::default_l2_grid;
use crate::tensor::Tensor;
use crate::trace::{AnswerSpace, ExampleRecord, SegmentKind, TraceSet};

/// Head-averaged attention mass from the answer token per layer and bucket
/// (context, query, rationale, other).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub scores: Vec<[f64; 4]>,
}

impl AttentionProfile {
    /// Layer with the largest query + rationale mass.
    pub fn reasoning_peak_layer(&self) -> Option<usize> {
        let q = SegmentKind::Query.index();
        let r = SegmentKind::Rationale.index();
        argmax_first(self.scores.iter().map(|s| s[q] + s[r]))
    }

    /// Elementwise mean of several profiles of equal depth.
    pub fn mean(profiles: &[AttentionProfile]) -> Result<Self> {
        let first = profiles
            .first()
            .ok_or_else(|| Error::InvalidInput("no attention profiles to average".into()))?;
        let layers = first.scores.len();
        let mut acc = vec![[0.0; 4]; layers];
        for p in profiles {
            if p.scores.len() != layers {
                return Err(Error::Shape("attention profiles differ in depth".into()));
            }
            for (a, s) in acc.iter_mut().zip(&p.scores) {
                for k in 0..4 {
                    a[k] += s[k];
                }
            }
        }
        let n = profiles.len() as f64;
        for a in &mut acc {
            for v in a.iter_mut() {
                *v /= n;
            }
        }
        Ok(Self { scores: acc })
    }
}

fn argmax_first(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

pub fn attention_score(record: &ExampleRecord) -> Result<AttentionProfile> {
    let rows = record
        .attention_rows
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("record {} has no attention rows", record.example_id)))?;
    let segments = record
        .segments
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("record {} has no segment map", record.example_id)))?;
    let [layers, heads, len] = match rows.dims() {
        &[l, h, t] => [l, h, t],
        other => return Err(Error::Shape(format!("attention rows have dims {other:?}"))),
    };
    segments
        .check_partition(len as u32)
        .map_err(|m| Error::InvalidInput(format!("record {}: {m}", record.example_id)))?;
    let bucket: Vec<usize> = (0..len as u32)
        .map(|p| segments.kind_of(p).expect("partition checked").index())
        .collect();
    let scores = (0..layers)
        .map(|l| {
            let mut s = [0.0f64; 4];
            for h in 0..heads {
                for (i, &w) in rows.slice(&[l, h]).iter().enumerate() {
                    s[bucket[i]] += w as f64;
                }
            }
            s.map(|v| v / heads as f64)
        })
        .collect();
    Ok(AttentionProfile { scores })
}

/// Intercept-free logistic direction from final hidden states to the
/// model's own answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputProbe {
    pub w_probe: Vec<f64>,
    pub train_accuracy: f64,
    pub cv_accuracy: f64,
    pub l2_strength: f64,
}

pub const CV_FOLDS: usize = 5;

/// Selects λ from `l2_grid` by 5-fold cross-validated accuracy (ties go to
/// the smaller λ), then refits on all rows.
pub fn fit_output_probe(features: &[Vec<f64>], outputs: &[usize], l2_grid: &[f64], seed: u64) -> Result<OutputProbe> {
    if features.len() != outputs.len() {
        return Err(Error::Shape(format!("{} rows for {} outputs", features.len(), outputs.len())));
    }
    if features.len() < CV_FOLDS {
        return Err(Error::InvalidInput(format!("need at least {CV_FOLDS} rows")));
    }
    if outputs.iter().any(|&o| o > 1) {
        return Err(Error::InvalidInput("outputs must be 0 or 1".into()));
    }
    if outputs.iter().all(|&o| o == outputs[0]) {
        return Err(Error::InvalidInput("model outputs contain a single class".into()));
    }
    if l2_grid.is_empty() {
        return Err(Error::InvalidInput("empty regularization grid".into()));
    }
    let ys: Vec<bool> = outputs.iter().map(|&o| o == AnswerSpace::POSITIVE).collect();
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; features.len()];
        for (rank, &i) in order.iter().enumerate() {
            f[i] = rank % CV_FOLDS;
        }
        f
    };

    let mut sorted = l2_grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &sorted {
        let mut hits = 0usize;
        for fold in 0..CV_FOLDS {
            let (train, test): (Vec<usize>, Vec<usize>) = (0..features.len()).partition(|&i| fold_of[i] != fold);
            let tx: Vec<&[f64]> = train.iter().map(|&i| features[i].as_slice()).collect();
            let ty: Vec<bool> = train.iter().map(|&i| ys[i]).collect();
            let fit = fit_logistic(&tx, &ty, lambda, false)?;
            hits += test.iter().filter(|&&i| fit.predict(&features[i]) == ys[i]).count();
        }
        let acc = hits as f64 / features.len() as f64;
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((lambda, acc));
        }
    }
    let (lambda, cv_accuracy) = best.expect("grid is nonempty");
    let rows: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    let fit = fit_logistic(&rows, &ys, lambda, false)?;
    Ok(OutputProbe {
        train_accuracy: fit.accuracy(&rows, &ys),
        w_probe: fit.weights,
        cv_accuracy,
        l2_strength: lambda,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopVector {
    /// Block index, 0-based.
    pub layer: usize,
    /// Value-vector index within the block.
    pub index: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    /// Length of the descending `top_vectors` list.
    pub top_k: usize,
    /// Take the top 0.1% within each layer instead of globally.
    pub per_layer: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            top_k: 100,
            per_layer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueVectorReport {
    /// How many of the top 0.1% cosines fall in each block.
    pub per_layer_top_counts: Vec<usize>,
    pub top_fraction_size: usize,
    pub per_layer: bool,
    pub top_vectors: Vec<TopVector>,
    /// `(layer, index)` of zero-norm value vectors, skipped.
    pub excluded_zero_norm: Vec<(usize, usize)>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `⌈0.001 · n⌉`, at least one.
pub fn top_fraction_count(n: usize) -> usize {
    n.div_ceil(1000).max(1)
}

/// Descending by cosine, ties by `(layer, index)` ascending.
fn rank(a: &TopVector, b: &TopVector) -> std::cmp::Ordering {
    b.cosine
        .total_cmp(&a.cosine)
        .then(a.layer.cmp(&b.layer))
        .then(a.index.cmp(&b.index))
}

/// Cosine of every value vector (row of each `[d_m × d]` matrix) with `w_probe`.
pub fn value_vector_similarity(matrices: &[Tensor], w_probe: &[f64], cfg: SimilarityConfig) -> Result<ValueVectorReport> {
    let probe_norm = norm(w_probe);
    if probe_norm == 0.0 || !probe_norm.is_finite() {
        return Err(Error::InvalidInput("probe vector has zero or non-finite norm".into()));
    }
    if matrices.is_empty() {
        return Err(Error::InvalidInput("no FFN value matrices".into()));
    }
    let d = w_probe.len();
    for (l, m) in matrices.iter().enumerate() {
        if m.dims().len() != 2 || m.dims()[1] != d {
            return Err(Error::Shape(format!("value matrix {l} has dims {:?}, expected [d_m, {d}]", m.dims())));
        }
    }
    let per_layer: Vec<(Vec<TopVector>, Vec<(usize, usize)>)> = matrices
        .par_iter()
        .enumerate()
        .map(|(l, m)| {
            let mut cos = Vec::with_capacity(m.dims()[0]);
            let mut zero = Vec::new();
            for (i, row) in m.data().chunks_exact(d).enumerate() {
                let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                let n = norm(&v);
                if n == 0.0 {
                    zero.push((l, i));
                    continue;
                }
                let dot: f64 = v.iter().zip(w_probe).map(|(a, b)| a * b).sum();
                cos.push(TopVector {
                    layer: l,
                    index: i,
                    cosine: (dot / (n * probe_norm)).clamp(-1.0, 1.0),
                });
            }
            (cos, zero)
        })
        .collect();

    let layers = matrices.len();
    let mut counts = vec![0usize; layers];
    let mut all = Vec::new();
    let mut excluded = Vec::new();
    let top_fraction_size;
    if cfg.per_layer {
        let mut total = 0;
        for (l, (mut cos, zero)) in per_layer.into_iter().enumerate() {
            cos.sort_by(rank);
            let k = top_fraction_count(matrices[l].dims()[0]).min(cos.len());
            counts[l] = k;
            total += k;
            all.extend(cos);
            excluded.extend(zero);
        }
        top_fraction_size = total;
        all.sort_by(rank);
    } else {
        for (cos, zero) in per_layer {
            all.extend(cos);
            excluded.extend(zero);
        }
        all.sort_by(rank);
        let total: usize = matrices.iter().map(|m| m.dims()[0]).sum();
        top_fraction_size = top_fraction_count(total).min(all.len());
        for t in &all[..top_fraction_size] {
            counts[t.layer] += 1;
        }
    }
    all.truncate(cfg.top_k);
    Ok(ValueVectorReport {
        per_layer_top_counts: counts,
        top_fraction_size,
        per_layer: cfg.per_layer,
        top_vectors: all,
        excluded_zero_norm: excluded,
    })
}

/// Leading right-singular vector of the stacked rows, signed so that its
/// largest-magnitude component is positive.
pub fn top_singular_vector(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if rows.len() < 2 {
        return Err(Error::InvalidInput("need at least two vectors".into()));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged or empty vectors".into()));
    }
    if rows.iter().all(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::InvalidInput("all vectors are zero".into()));
    }
    let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let best = argmax_first(svd.singular_values.iter().copied()).expect("nonempty");
    let mut u: Vec<f64> = v_t.row(best).iter().copied().collect();
    let n = norm(&u);
    for x in &mut u {
        *x /= n;
    }
    let pivot = u
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, &x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) })
        .0;
    if u[pivot] < 0.0 {
        for x in &mut u {
            *x = -*x;
        }
    }
    Ok(u)
}

fn escape_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\\u[0-9a-fA-F]{4})+$").expect("static pattern"))
}

/// Tokens that render as `\uXXXX` escapes or contain nothing printable.
pub fn is_escape_artifact(token: &str) -> bool {
    escape_pattern().is_match(token) || token.chars().all(|c| c.is_control())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedToken {
    pub token: String,
    pub id: usize,
    pub score: f64,
}

/// The `k` highest-scoring tokens of `unembed · v`, skipping escape artifacts.
/// Ties keep the lower token id first.
pub fn vocab_projection(v: &[f64], unembed: &Tensor, vocab: &[String], k: usize) -> Result<Vec<ProjectedToken>> {
    let d = v.len();
    if unembed.dims() != [vocab.len(), d] {
        return Err(Error::Shape(format!(
            "unembed dims {:?} do not match vocab {} x {d}",
            unembed.dims(),
            vocab.len()
        )));
    }
    let mut scored: Vec<ProjectedToken> = unembed
        .data()
        .chunks_exact(d)
        .enumerate()
        .filter(|(i, _)| !is_escape_artifact(&vocab[*i]))
        .map(|(i, row)| ProjectedToken {
            token: vocab[i].clone(),
            id: i,
            score: row.iter().zip(v).map(|(&w, &x)| w as f64 * x).sum(),
        })
        .collect();
    if k > scored.len() {
        return Err(Error::InvalidInput(format!(
            "asked for {k} tokens but only {} remain after filtering",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnatomyConfig {
    pub seed: u64,
    pub similarity: SimilarityConfig,
    /// Tokens listed per projected vector.
    pub vocab_k: usize,
    /// How many of the leading top vectors get their own projection.
    pub projected_vectors: usize,
}

impl Default for AnatomyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            similarity: SimilarityConfig::default(),
            vocab_k: 10,
            projected_vectors: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorProjection {
    pub vector: String,
    pub tokens: Vec<ProjectedToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyReport {
    /// Mean over records that carry attention rows.
    pub attention: Option<AttentionProfile>,
    pub probe: OutputProbe,
    pub value_vectors: ValueVectorReport,
    pub top_singular_vector: Option<Vec<f64>>,
    pub vocab_projections: Vec<VectorProjection>,
    /// Layer of peak query + rationale attention.
    pub attention_peak_layer: Option<usize>,
    /// Layer holding the most top-fraction value vectors.
    pub value_peak_layer: Option<usize>,
    pub layers_differ: Option<bool>,
}

impl AnatomyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Final-layer two-label argmax at the answer position of every record.
pub fn model_outputs(set: &TraceSet) -> Result<Vec<usize>> {
    let l = set.layers();
    set.records
        .iter()
        .map(|r| {
            let logits = layer_logits(r.answer_hidden(l), set.unembed.data(), set.model_meta.vocab_size)?;
            let s = label_scores(&logits, &set.answer_space)?;
            Ok(if s.p_true >= s.p_false {
                AnswerSpace::POSITIVE
            } else {
                AnswerSpace::NEGATIVE
            })
        })
        .collect()
}

pub fn analyze(set: &TraceSet, cfg: AnatomyConfig) -> Result<AnatomyReport> {
    let matrices = set
        .ffn_value_matrices
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("trace carries no FFN value matrices".into()))?;
    let profiles: Vec<AttentionProfile> = set
        .records
        .iter()
        .filter(|r| r.attention_rows.is_some() && r.segments.is_some())
        .map(attention_score)
        .collect::<Result<_>>()?;
    let attention = if profiles.is_empty() {
        None
    } else {
        Some(AttentionProfile::mean(&profiles)?)
    };

    let l = set.layers();
    let features: Vec<Vec<f64>> = set
        .records
        .iter()
        .map(|r| r.answer_hidden(l).iter().map(|&v| v as f64).collect())
        .collect();
    let outputs = model_outputs(set)?;
    let probe = fit_output_probe(&features, &outputs, &default_l2_grid(), cfg.seed)?;
    let value_vectors = value_vector_similarity(matrices, &probe.w_probe, cfg.similarity)?;

    let lookup = |t: &TopVector| -> Vec<f64> {
        matrices[t.layer].row(t.index).iter().map(|&x| x as f64).collect()
    };
    let stacked: Vec<Vec<f64>> = value_vectors.top_vectors.iter().map(lookup).collect();
    let top_singular = if stacked.len() >= 2 {
        Some(top_singular_vector(&stacked)?)
    } else {
        None
    };

    let k = cfg.vocab_k.min(set.vocab.iter().filter(|t| !is_escape_artifact(t)).count());
    let mut vocab_projections = Vec::new();
    if let Some(u) = &top_singular {
        vocab_projections.push(VectorProjection {
            vector: "top_singular".into(),
            tokens: vocab_projection(u, &set.unembed, &set.vocab, k)?,
        });
    }
    for t in value_vectors.top_vectors.iter().take(cfg.projected_vectors) {
        vocab_projections.push(VectorProjection {
            vector: format!("layer{}_v{}", t.layer, t.index),
            tokens: vocab_projection(&lookup(t), &set.unembed, &set.vocab, k)?,
        });
    }

    let attention_peak_layer = attention.as_ref().and_then(AttentionProfile::reasoning_peak_layer);
    let value_peak_layer = argmax_first(value_vectors.per_layer_top_counts.iter().map(|&c| c as f64));
    let layers_differ = match (attention_peak_layer, value_peak_layer) {
        (Some(a), Some(v)) => Some(a != v),
        _ => None,
    };
    Ok(AnatomyReport {
        attention,
        probe,
        value_vectors,
        top_singular_vector: top_singular,
        vocab_projections,
        attention_peak_layer,
        value_peak_layer,
        layers_differ,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Segment, SegmentMap};
    use proptest::prelude::*;
    use rand::Rng;

    fn record_with_rows(rows: Tensor, segments: SegmentMap) -> ExampleRecord {
        ExampleRecord {
            example_id: "r".into(),
            path_group: "g".into(),
            gold_label: None,
            greedy: false,
            positions: vec![rows.dims()[2] as u32 - 1],
            answer_position_index: 0,
            hidden_states: Tensor::zeros(vec![1, rows.dims()[0] + 1, 1]),
            attention_rows: Some(rows),
            segments: Some(segments),
        }
    }

    fn four_way(len: u32) -> SegmentMap {
        let a = len / 4;
        SegmentMap::new(vec![
            Segment { kind: SegmentKind::Context, start: 0, end: a },
            Segment { kind: SegmentKind::Query, start: a, end: 2 * a },
            Segment { kind: SegmentKind::Rationale, start: 2 * a, end: 3 * a },
            Segment { kind: SegmentKind::Other, start: 3 * a, end: len },
        ])
    }

    fn random_rows(rng: &mut ChaCha8Rng, layers: usize, heads: usize, len: usize) -> Tensor {
        let mut data = Vec::with_capacity(layers * heads * len);
        for _ in 0..layers * heads {
            let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|v| (v / s) as f32));
        }
        Tensor::new(vec![layers, heads, len], data).unwrap()
    }

    #[test]
    fn uniform_row_context_half() {
        let rows = Tensor::new(vec![1, 1, 4], vec![0.25; 4]).unwrap();
        let seg = SegmentMap::new(vec![
            Segment { kind: SegmentKind::Context, start: 0, end: 2 },
            Segment { kind: SegmentKind::Other, start: 2, end: 4 },
        ]);
        let p = attention_score(&record_with_rows(rows, seg)).unwrap();
        assert_eq!(p.scores[0][SegmentKind::Context.index()], 0.5);
        assert_eq!(p.scores[0][SegmentKind::Query.index()], 0.0);
    }

    #[test]
    fn heads_average_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seg = four_way(8);
        let a = random_rows(&mut rng, 2, 1, 8);
        let b = random_rows(&mut rng, 2, 1, 8);
        let mut both = Vec::new();
        for l in 0..2 {
            both.extend_from_slice(a.slice(&[l]));
            both.extend_from_slice(b.slice(&[l]));
        }
        let pa = attention_score(&record_with_rows(a, seg.clone())).unwrap();
        let pb = attention_score(&record_with_rows(b, seg.clone())).unwrap();
        let pab = attention_score(&record_with_rows(Tensor::new(vec![2, 2, 8], both).unwrap(), seg)).unwrap();
        for l in 0..2 {
            for k in 0..4 {
                assert!((pab.scores[l][k] - 0.5 * (pa.scores[l][k] + pb.scores[l][k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_payloads_rejected() {
        let mut r = record_with_rows(Tensor::new(vec![1, 1, 4], vec![0.25; 4]).unwrap(), four_way(4));
        r.segments = Some(SegmentMap::new(vec![Segment { kind: SegmentKind::Context, start: 0, end: 3 }]));
        assert!(attention_score(&r).is_err());
        r.attention_rows = None;
        assert!(attention_score(&r).is_err());
    }

    proptest! {
        #[test]
        fn buckets_partition_unit_mass(seed in any::<u64>(), heads in 1usize..4, len in 4usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = attention_score(&record_with_rows(random_rows(&mut rng, 3, heads, len), four_way(len as u32))).unwrap();
            for s in &p.scores {
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(s.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn head_order_irrelevant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = random_rows(&mut rng, 2, 3, 8);
            let mut swapped = Vec::new();
            for l in 0..2 {
                for h in [2, 0, 1] {
                    swapped.extend_from_slice(rows.slice(&[l, h]));
                }
            }
            let a = attention_score(&record_with_rows(rows, four_way(8))).unwrap();
            let b = attention_score(&record_with_rows(Tensor::new(vec![2, 3, 8], swapped).unwrap(), four_way(8))).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                for k in 0..4 {
                    prop_assert!((x[k] - y[k]).abs() < 1e-12);
                }
            }
        }
    }

    fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
    }

    #[test]
    fn output_probe_recovers_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = [0.6, -0.8, 0.0, 0.0];
        // Keep a margin around the boundary so held-out folds stay separable.
        let xs: Vec<Vec<f64>> = gaussian_rows(&mut rng, 600, 4)
            .into_iter()
            .filter(|x| cos(x, &u).abs() > 0.1)
            .take(300)
            .collect();
        let ys: Vec<usize> = xs.iter().map(|x| if cos(x, &u) >= 0.0 { 0 } else { 1 }).collect();
        let p = fit_output_probe(&xs, &ys, &default_l2_grid(), 0).unwrap();
        assert_eq!(p.cv_accuracy, 1.0);
        assert!(cos(&p.w_probe, &u) > 0.99, "cos {}", cos(&p.w_probe, &u));
    }

    #[test]
    fn output_probe_shuffled_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs = gaussian_rows(&mut rng, 200, 4);
        let ys: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        let p = fit_output_probe(&xs, &ys, &default_l2_grid(), 1).unwrap();
        assert!((p.cv_accuracy - 0.5).abs() <= 0.15, "{}", p.cv_accuracy);
    }

    #[test]
    fn output_probe_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = gaussian_rows(&mut rng, 80, 3);
        let ys: Vec<usize> = xs.iter().map(|x| (x[0] + 0.3 * x[1] + 0.2 * rng.random_range(-1.0..1.0) < 0.0) as usize).collect();
        let c = 2.5;
        let scaled: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v * c).collect()).collect();
        let a = fit_output_probe(&xs, &ys, &[0.3], 0).unwrap();
        let b = fit_output_probe(&scaled, &ys, &[0.3 * c * c], 0).unwrap();
        for (x, s) in xs.iter().zip(&scaled) {
            let da: f64 = a.w_probe.iter().zip(x).map(|(w, v)| w * v).sum();
            let db: f64 = b.w_probe.iter().zip(s).map(|(w, v)| w * v).sum();
            assert_eq!(da >= 0.0, db >= 0.0);
        }
        assert!(fit_output_probe(&xs, &[0; 80], &[1.0], 0).is_err());
    }

    fn matrix(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.iter().flatten().map(|&v| v as f32).collect()).unwrap()
    }

    #[test]
    fn cosine_extremes() {
        let w = vec![1.0, 2.0, -1.0];
        let m = matrix(&[w.clone(), w.iter().map(|v| -v).collect(), vec![2.0, -1.0, 0.0], vec![0.0; 3]]);
        let r = value_vector_similarity(&[m], &w, SimilarityConfig { top_k: 10, per_layer: false }).unwrap();
        let find = |i: usize| r.top_vectors.iter().find(|t| t.index == i).unwrap().cosine;
        assert!((find(0) - 1.0).abs() < 1e-12);
        assert!((find(1) + 1.0).abs() < 1e-12);
        assert!(find(2).abs() < 1e-12);
        assert_eq!(r.excluded_zero_norm, vec![(0, 3)]);
        assert!(value_vector_similarity(&[matrix(&[w.clone()])], &[0.0; 3], SimilarityConfig::default()).is_err());
    }

    #[test]
    fn planted_columns_lead() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 16;
        let probe: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut mats = Vec::new();
        for l in 0..4 {
            let mut rows = gaussian_rows(&mut rng, 64, d);
            if l == 3 {
                for &i in &[5usize, 17, 40] {
                    rows[i] = probe.iter().map(|p| p + 0.01 * rng.random_range(-1.0..1.0)).collect();
                }
            }
            mats.push(matrix(&rows));
        }
        let r = value_vector_similarity(&mats, &probe, SimilarityConfig::default()).unwrap();
        let mut top3: Vec<(usize, usize)> = r.top_vectors[..3].iter().map(|t| (t.layer, t.index)).collect();
        top3.sort();
        assert_eq!(top3, vec![(3, 5), (3, 17), (3, 40)]);
        assert_eq!(r.per_layer_top_counts.iter().sum::<usize>(), top_fraction_count(4 * 64));
        assert_eq!(r.per_layer_top_counts[3], 1);
        let scaled: Vec<f64> = probe.iter().map(|v| v * 7.0).collect();
        let r2 = value_vector_similarity(&mats, &scaled, SimilarityConfig::default()).unwrap();
        assert_eq!(r.per_layer_top_counts, r2.per_layer_top_counts);
    }

    #[test]
    fn global_count_rounds_up() {
        assert_eq!(top_fraction_count(4 * 64), 1);
        assert_eq!(top_fraction_count(32 * 11008), 353);
        assert_eq!(top_fraction_count(1000), 1);
        assert_eq!(top_fraction_count(1001), 2);
    }

    #[test]
    fn per_layer_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mats: Vec<Tensor> = (0..3).map(|_| matrix(&gaussian_rows(&mut rng, 1500, 4))).collect();
        let r = value_vector_similarity(&mats, &[1.0, 0.0, 0.0, 0.0], SimilarityConfig { top_k: 5, per_layer: true }).unwrap();
        assert_eq!(r.per_layer_top_counts, vec![2, 2, 2]);
        assert_eq!(r.top_vectors.len(), 5);
    }

    #[test]
    fn singular_vector_of_copies() {
        let u = [0.0, -0.6, 0.8];
        let rows = vec![u.to_vec(); 100];
        let s = top_singular_vector(&rows).unwrap();
        assert!(cos(&s, &u) > 1.0 - 1e-6);
        assert!((norm(&s) - 1.0).abs() < 1e-6);
        let neg: Vec<Vec<f64>> = vec![u.iter().map(|v| -v).collect(); 100];
        assert_eq!(top_singular_vector(&neg).unwrap(), s);
        assert!(top_singular_vector(&[vec![0.0; 3], vec![0.0; 3]]).is_err());
        assert!(top_singular_vector(&[vec![1.0]]).is_err());
    }

    #[test]
    fn singular_vector_follows_majority_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut rows = Vec::new();
        for _ in 0..99 {
            rows.push(vec![1.0 + 0.05 * rng.random_range(-1.0..1.0), 0.05 * rng.random_range(-1.0..1.0), 0.0]);
        }
        rows.push(vec![0.0, 0.0, 1.0]);
        let s = top_singular_vector(&rows).unwrap();
        let mean: Vec<f64> = (0..3).map(|j| rows[..99].iter().map(|r| r[j]).sum::<f64>() / 99.0).collect();
        assert!(cos(&s, &mean).abs() > 0.99);
    }

    #[test]
    fn projection_ranks_and_filters() {
        let vocab: Vec<String> = ["a", "b", "c", "\\u2705", "\u{7}"].iter().map(|s| s.to_string()).collect();
        let mut eye = vec![0.0f32; 25];
        for i in 0..5 {
            eye[i * 5 + i] = 1.0;
        }
        let unembed = Tensor::new(vec![5, 5], eye).unwrap();
        let top = vocab_projection(&[0.0, 0.0, 1.0, 0.0, 0.0], &unembed, &vocab, 1).unwrap();
        assert_eq!(top[0].token, "c");
        let v = [0.1, 0.5, 0.2, 0.9, 0.95];
        let top = vocab_projection(&v, &unembed, &vocab, 2).unwrap();
        assert_eq!(top.iter().map(|t| t.token.as_str()).collect::<Vec<_>>(), vec!["b", "c"]);
        let scaled: Vec<f64> = v.iter().map(|x| x * 3.0).collect();
        let top2 = vocab_projection(&scaled, &unembed, &vocab, 2).unwrap();
        assert_eq!(top.iter().map(|t| t.id).collect::<Vec<_>>(), top2.iter().map(|t| t.id).collect::<Vec<_>>());
        assert!(vocab_projection(&v, &unembed, &vocab, 4).is_err());
    }

    #[test]
    fn escape_filter_rules() {
        assert!(is_escape_artifact("\\u2705"));
        assert!(is_escape_artifact("\\u00e9\\u00e8"));
        assert!(is_escape_artifact("\n\t"));
        assert!(!is_escape_artifact("\\u27"));
        assert!(!is_escape_artifact("True"));
        assert!(!is_escape_artifact("\u{2705}"));
    }
}

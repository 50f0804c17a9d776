//! Turning toy-model runs into traces.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{forward, logits_at, ToyParams};
use super::sample::{sample_paths, SamplingConfig};
use super::task::{self, Question};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::{ExampleRecord, ModelMeta, Segment, SegmentKind, SegmentMap, TraceSet};

/// One forward pass reduced to what a trace record stores.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrace {
    /// Logits at the last input position.
    pub logits: Vec<f32>,
    /// `[positions × (L + 1) × d]`.
    pub hidden: Tensor,
    /// `[L × H × T]`, attention from the last input position.
    pub attention: Tensor,
}

pub fn forward_with_trace(params: &ToyParams, tokens: &[u32], positions: &[usize]) -> Result<ToyTrace> {
    let cache = forward(params, tokens)?;
    let cfg = &params.cfg;
    let (d, t_len) = (cfg.hidden, tokens.len());
    if let Some(p) = positions.iter().find(|&&p| p >= t_len) {
        return Err(Error::InvalidInput(format!("position {p} outside a sequence of {t_len}")));
    }
    let mut hidden = Vec::with_capacity(positions.len() * (cfg.layers + 1) * d);
    for &p in positions {
        for h in &cache.hidden {
            hidden.extend_from_slice(&h[p * d..(p + 1) * d]);
        }
    }
    let last = t_len - 1;
    let mut attention = Vec::with_capacity(cfg.layers * cfg.heads * t_len);
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            attention.extend_from_slice(cache.attention_row(l, h, last));
        }
    }
    Ok(ToyTrace {
        logits: logits_at(params, &cache, last),
        hidden: Tensor::new(vec![positions.len(), cfg.layers + 1, d], hidden)?,
        attention: Tensor::new(vec![cfg.layers, cfg.heads, t_len], attention)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub n_paths: usize,
    pub sampling: SamplingConfig,
    pub seed: u64,
    /// Add one greedy path per question.
    pub greedy: bool,
    pub attention: bool,
    pub ffn: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            n_paths: 20,
            sampling: SamplingConfig::default(),
            seed: 0,
            greedy: true,
            attention: true,
            ffn: true,
        }
    }
}

/// Record for `prompt + continuation`, where the continuation ends at `A:`.
/// Recorded positions: every generated rationale token, then `A:`.
pub fn path_record(
    params: &ToyParams,
    question: &Question,
    continuation: &[u32],
    example_id: String,
    path_group: String,
    greedy: bool,
    attention: bool,
) -> Result<ExampleRecord> {
    let mut tokens = question.prompt.clone();
    tokens.extend_from_slice(continuation);
    let t_ans = tokens.len() - 1;
    let p_len = question.prompt.len();
    let positions: Vec<usize> = (p_len..=t_ans).collect();
    let tr = forward_with_trace(params, &tokens, &positions)?;
    let ctx = question.context_len() as u32;
    let segments = SegmentMap::new(vec![
        Segment { kind: SegmentKind::Context, start: 0, end: ctx },
        Segment { kind: SegmentKind::Query, start: ctx, end: p_len as u32 },
        Segment { kind: SegmentKind::Rationale, start: p_len as u32, end: t_ans as u32 },
        Segment { kind: SegmentKind::Other, start: t_ans as u32, end: t_ans as u32 + 1 },
    ]);
    Ok(ExampleRecord {
        example_id,
        path_group,
        gold_label: Some(question.gold),
        greedy,
        answer_position_index: positions.len() - 1,
        positions: positions.iter().map(|&p| p as u32).collect(),
        hidden_states: tr.hidden,
        attention_rows: attention.then_some(tr.attention),
        segments: attention.then_some(segments),
    })
}

/// Samples `n_paths` rationales per question (plus a greedy one) and records
/// each resulting pass. Question `i` uses seed `cfg.seed + i`.
pub fn build_trace(params: &ToyParams, questions: &[Question], cfg: &TraceConfig) -> Result<TraceSet> {
    let per_question: Vec<Result<Vec<ExampleRecord>>> = questions
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let group = format!("q{qi:04}");
            let mut out = Vec::new();
            if cfg.greedy {
                let g = sample_paths(params, &q.prompt, 1, &SamplingConfig::greedy(), 0)?;
                out.push(path_record(params, q, &g[0], format!("{group}_greedy"), group.clone(), true, cfg.attention)?);
            }
            if cfg.n_paths > 0 {
                let paths = sample_paths(params, &q.prompt, cfg.n_paths, &cfg.sampling, cfg.seed.wrapping_add(qi as u64))?;
                for (k, p) in paths.iter().enumerate() {
                    out.push(path_record(params, q, p, format!("{group}_p{k:02}"), group.clone(), false, cfg.attention)?);
                }
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_question {
        records.extend(r?);
    }
    let c = &params.cfg;
    let ffn_value_matrices = if cfg.ffn {
        Some(
            (0..c.layers)
                .map(|l| Tensor::new(vec![c.ffn, c.hidden], params.ffn_value(l).to_vec()))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(TraceSet {
        model_meta: ModelMeta {
            layers: c.layers,
            hidden: c.hidden,
            heads: c.heads,
            vocab_size: c.vocab,
        },
        vocab: task::vocab(),
        unembed: Tensor::new(vec![c.vocab, c.hidden], params.unembed().to_vec())?,
        answer_space: task::answer_space(),
        records,
        ffn_value_matrices,
    })
}

/// Traces of the reference rationales (teacher forcing), one per question.
pub fn reference_trace(params: &ToyParams, questions: &[Question], attention: bool) -> Result<TraceSet> {
    let mut set = build_trace(
        params,
        &[],
        &TraceConfig {
            n_paths: 0,
            greedy: false,
            attention,
            ..TraceConfig::default()
        },
    )?;
    set.records = questions
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut cont = q.rationale.clone();
            cont.push(task::ANS);
            path_record(params, q, &cont, format!("q{qi:04}_ref"), format!("q{qi:04}"), false, attention)
        })
        .collect::<Result<_>>()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::model::ToyConfig;
    use crate::toymodel::task::gen_task;
    use crate::trace::validate_trace;

    fn params() -> ToyParams {
        ToyParams::init(ToyConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 8,
            max_seq: 24,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn emitted_traces_validate() {
        let p = params();
        let task = gen_task(3, 6, 3).unwrap();
        let cfg = TraceConfig { n_paths: 3, ..TraceConfig::default() };
        let set = build_trace(&p, &task.questions, &cfg).unwrap();
        assert_eq!(set.records.len(), 6 * 4);
        assert!(validate_trace(&set).is_empty(), "{:?}", validate_trace(&set));
        assert_eq!(set.records.iter().filter(|r| r.greedy).count(), 6);
        let reference = reference_trace(&p, &task.questions, true).unwrap();
        assert!(validate_trace(&reference).is_empty());
    }

    #[test]
    fn trace_matches_direct_forward() {
        let p = params();
        let tokens = [0u32, 1, 2, 10, 12, 13, 10, 14];
        let tr = forward_with_trace(&p, &tokens, &[6, 7]).unwrap();
        let cache = forward(&p, &tokens).unwrap();
        assert_eq!(tr.logits, logits_at(&p, &cache, 7));
        assert_eq!(tr.hidden.slice(&[1, 2]), &cache.hidden[2][7 * 8..8 * 8]);
        assert!(forward_with_trace(&p, &tokens, &[8]).is_err());
    }

    #[test]
    fn deterministic() {
        let p = params();
        let task = gen_task(3, 4, 3).unwrap();
        let cfg = TraceConfig { n_paths: 2, ..TraceConfig::default() };
        assert_eq!(build_trace(&p, &task.questions, &cfg).unwrap(), build_trace(&p, &task.questions, &cfg).unwrap());
    }
}

//! Activation traces and the ICT1 container.
//!
//! A [`TraceSet`] carries everything the analyses need from a model run:
//! per-record hidden states at recorded token positions (embedding output
//! through the last block, so `L + 1` states per position), the shared
//! unembedding matrix and vocabulary, the two-label answer space, and
//! optional attention rows and FFN value matrices.

mod format;
mod validate;

pub use format::{read_trace, read_trace_unchecked, write_trace, MAGIC};
pub use validate::{validate_trace, Violation, ATTENTION_ROW_TOLERANCE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape parameters shared by every record in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Number of residual blocks `L`.
    pub layers: usize,
    /// Hidden size `d`.
    pub hidden: usize,
    /// Attention heads per block.
    pub heads: usize,
    pub vocab_size: usize,
}

/// The two single-token answers. Index 0 is the positive label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpace {
    pub labels: [String; 2],
    pub token_ids: [u32; 2],
}

impl AnswerSpace {
    pub const POSITIVE: usize = 0;
    pub const NEGATIVE: usize = 1;

    pub fn new(labels: [&str; 2], token_ids: [u32; 2]) -> Result<Self> {
        if token_ids[0] == token_ids[1] {
            return Err(Error::InvalidInput(
                "answer token ids must be distinct".into(),
            ));
        }
        Ok(Self {
            labels: labels.map(str::to_owned),
            token_ids,
        })
    }

    pub fn true_false(true_id: u32, false_id: u32) -> Result<Self> {
        Self::new(["True", "False"], [true_id, false_id])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Context,
    Query,
    Rationale,
    Other,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [
        SegmentKind::Context,
        SegmentKind::Query,
        SegmentKind::Rationale,
        SegmentKind::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::Context => "context",
            SegmentKind::Query => "query",
            SegmentKind::Rationale => "rationale",
            SegmentKind::Other => "other",
        }
    }
}

/// A tagged half-open range of token positions `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: u32,
    pub end: u32,
}

/// Partition of the positions seen by the answer token's attention row
/// (`0..=t_ans`) into context / query / rationale / other. The answer
/// position itself and anything outside the three named parts belong to
/// `Other`. A kind may own several ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub segments: Vec<Segment>,
}

impl SegmentMap {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// Bucket of position `pos`, if covered.
    pub fn kind_of(&self, pos: u32) -> Option<SegmentKind> {
        self.segments
            .iter()
            .find(|s| s.start <= pos && pos < s.end)
            .map(|s| s.kind)
    }

    /// Checks that the ranges are disjoint and cover exactly `0..len`.
    pub fn check_partition(&self, len: u32) -> std::result::Result<(), String> {
        let mut ranges: Vec<_> = self.segments.iter().collect();
        ranges.sort_by_key(|s| s.start);
        let mut cursor = 0u32;
        for s in ranges {
            if s.end < s.start {
                return Err(format!("segment {s:?} has end before start"));
            }
            if s.start != cursor {
                return Err(if s.start < cursor {
                    format!("segments overlap at position {}", s.start)
                } else {
                    format!("positions {cursor}..{} are not covered", s.start)
                });
            }
            cursor = s.end;
        }
        if cursor != len {
            return Err(format!("segments cover 0..{cursor}, expected 0..{len}"));
        }
        Ok(())
    }
}

/// One forward pass (one sampled or greedy reasoning path).
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRecord {
    pub example_id: String,
    /// Groups the sampled paths of one question.
    pub path_group: String,
    pub gold_label: Option<usize>,
    /// Produced by greedy decoding rather than sampling.
    pub greedy: bool,
    /// Absolute token position of each recorded state.
    pub positions: Vec<u32>,
    /// Index into `positions` of the answer token.
    pub answer_position_index: usize,
    /// `[positions × (L + 1) × d]`.
    pub hidden_states: Tensor,
    /// `[L × H × seq_len]`, attention from the answer token.
    pub attention_rows: Option<Tensor>,
    pub segments: Option<SegmentMap>,
}

impl ExampleRecord {
    pub fn num_positions(&self) -> usize {
        self.hidden_states.dims().first().copied().unwrap_or(0)
    }

    /// Hidden state at recorded position `pos_idx`, layer `layer` (0 = embedding).
    pub fn hidden(&self, pos_idx: usize, layer: usize) -> &[f32] {
        self.hidden_states.slice(&[pos_idx, layer])
    }

    pub fn answer_hidden(&self, layer: usize) -> &[f32] {
        self.hidden(self.answer_position_index, layer)
    }

    /// Recorded positions before the answer token, in order.
    pub fn step_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_positions()).filter(move |&i| i != self.answer_position_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub model_meta: ModelMeta,
    pub vocab: Vec<String>,
    /// `[V × d]`.
    pub unembed: Tensor,
    pub answer_space: AnswerSpace,
    pub records: Vec<ExampleRecord>,
    /// One `[d_m × d]` matrix per block; row `i` is value vector `i`.
    pub ffn_value_matrices: Option<Vec<Tensor>>,
}

impl TraceSet {
    pub fn layers(&self) -> usize {
        self.model_meta.layers
    }

    /// Distinct path groups in first-appearance order, with record indices.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            match index.get(&r.path_group) {
                Some(&g) => order[g].1.push(i),
                None => {
                    index.insert(r.path_group.clone(), order.len());
                    order.push((r.path_group.clone(), vec![i]));
                }
            }
        }
        order
    }
}

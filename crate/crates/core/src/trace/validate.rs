use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{ExampleRecord, TraceSet};

/// Allowed deviation of an attention row sum from 1.
pub const ATTENTION_ROW_TOLERANCE: f64 = 1e-4;

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// `None` for set-level fields.
    pub record: Option<String>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.record {
            Some(id) => write!(f, "record `{id}` {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn set(&mut self, field: &str, message: impl Into<String>) {
        self.0.push(Violation {
            record: None,
            field: field.to_owned(),
            message: message.into(),
        });
    }

    fn rec(&mut self, record: &ExampleRecord, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation {
            record: Some(record.example_id.clone()),
            field: field.into(),
            message: message.into(),
        });
    }
}

/// Lists every violated invariant; empty means valid.
pub fn validate_trace(set: &TraceSet) -> Vec<Violation> {
    let mut out = Collector(Vec::new());
    let meta = set.model_meta;

    if meta.layers == 0 || meta.hidden == 0 || meta.heads == 0 || meta.vocab_size == 0 {
        out.set("model_meta", format!("all dimensions must be >= 1, got {meta:?}"));
    }
    if set.vocab.len() != meta.vocab_size {
        out.set(
            "vocab",
            format!("{} tokens but model_meta.vocab_size = {}", set.vocab.len(), meta.vocab_size),
        );
    }
    let ud = set.unembed.dims();
    if ud.len() != 2 || ud[0] != set.vocab.len() || ud[1] != meta.hidden {
        out.set(
            "unembed",
            format!(
                "dims {ud:?}, expected [{} (vocab length), {}]",
                set.vocab.len(),
                meta.hidden
            ),
        );
    }
    if set.unembed.data().iter().any(|v| !v.is_finite()) {
        out.set("unembed", "contains non-finite values");
    }

    let ids = set.answer_space.token_ids;
    if ids[0] == ids[1] {
        out.set("answer_space", "token ids are not distinct");
    }
    for id in ids {
        if id as usize >= meta.vocab_size {
            out.set("answer_space", format!("token id {id} >= vocab size {}", meta.vocab_size));
        }
    }

    let mut seen_ids = HashSet::new();
    for r in &set.records {
        if !seen_ids.insert(r.example_id.as_str()) {
            out.rec(r, "example_id", "duplicate id");
        }
        validate_record(r, set, &mut out);
    }

    if let Some(ffn) = &set.ffn_value_matrices {
        if ffn.len() != meta.layers {
            out.set(
                "ffn_value_matrices",
                format!("{} matrices for {} layers", ffn.len(), meta.layers),
            );
        }
        let d_m = ffn.first().map(|t| t.dims().first().copied().unwrap_or(0));
        for (l, m) in ffn.iter().enumerate() {
            let dims = m.dims();
            if dims.len() != 2 || dims[1] != meta.hidden || Some(dims[0]) != d_m || dims[0] == 0 {
                out.set(
                    "ffn_value_matrices",
                    format!("layer {l}: dims {dims:?}, expected [d_m, {}] with shared d_m", meta.hidden),
                );
            }
            if m.data().iter().any(|v| !v.is_finite()) {
                out.set("ffn_value_matrices", format!("layer {l}: non-finite values"));
            }
        }
    }

    out.0
}

fn validate_record(r: &ExampleRecord, set: &TraceSet, out: &mut Collector) {
    let meta = set.model_meta;
    let hd = r.hidden_states.dims();
    let shape_ok = hd.len() == 3 && hd[1] == meta.layers + 1 && hd[2] == meta.hidden && hd[0] >= 1;
    if !shape_ok {
        out.rec(
            r,
            "hidden_states",
            format!("dims {hd:?}, expected [positions, {}, {}]", meta.layers + 1, meta.hidden),
        );
    } else if hd[0] != r.positions.len() {
        out.rec(
            r,
            "positions",
            format!("{} positions listed for {} hidden-state rows", r.positions.len(), hd[0]),
        );
    }
    if r.hidden_states.data().iter().any(|v| !v.is_finite()) {
        out.rec(r, "hidden_states", "contains non-finite values");
    }
    let n_pos = if shape_ok { hd[0] } else { r.positions.len() };
    if r.answer_position_index >= n_pos {
        out.rec(
            r,
            "answer_position_index",
            format!("index {} out of range for {n_pos} recorded positions", r.answer_position_index),
        );
    }
    if let Some(g) = r.gold_label {
        if g > 1 {
            out.rec(r, "gold_label", format!("label index {g} outside the two-label answer space"));
        }
    }

    let answer_pos = r.positions.get(r.answer_position_index).copied();
    let mut row_len = answer_pos.map(|p| p + 1);

    if let Some(att) = &r.attention_rows {
        let ad = att.dims();
        if ad.len() != 3 || ad[0] != meta.layers || ad[1] != meta.heads || ad[2] == 0 {
            out.rec(
                r,
                "attention_rows",
                format!("dims {ad:?}, expected [{}, {}, seq_len]", meta.layers, meta.heads),
            );
        } else {
            if let Some(expected) = row_len {
                if ad[2] as u32 != expected {
                    out.rec(
                        r,
                        "attention_rows",
                        format!("row length {} but answer token sits at position {}", ad[2], expected - 1),
                    );
                }
            }
            row_len = Some(ad[2] as u32);
            for l in 0..ad[0] {
                for h in 0..ad[1] {
                    let row = att.slice(&[l, h]);
                    let sum: f64 = row.iter().map(|&x| x as f64).sum();
                    let negative = row.iter().any(|&x| x < 0.0 || !x.is_finite());
                    if negative || (sum - 1.0).abs() > ATTENTION_ROW_TOLERANCE {
                        out.rec(
                            r,
                            format!("attention_rows[layer {l}][head {h}]"),
                            format!("row sums to {sum:.6} (entries must be >= 0 and sum to 1)"),
                        );
                    }
                }
            }
        }
    }

    if let Some(seg) = &r.segments {
        match row_len {
            Some(len) => {
                if let Err(msg) = seg.check_partition(len) {
                    out.rec(r, "segments", msg);
                }
            }
            None => out.rec(r, "segments", "cannot check partition without an answer position"),
        }
    }
}

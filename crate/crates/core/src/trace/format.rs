//! ICT1 container.
//!
//! Layout:
//!
//! ```text
//! "ICT1" | header_len: u64 LE | header: UTF-8 JSON | payload
//! ```
//!
//! The payload is the concatenation of little-endian float32 tensors in
//! row-major order. Each tensor is described in the header by name, dims
//! and byte offset from the start of the payload; tensors are contiguous
//! and in header order. `payload_bytes` records the total payload size.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{validate_trace, AnswerSpace, ExampleRecord, ModelMeta, Segment, SegmentMap, TraceSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ICT1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    model_meta: ModelMeta,
    vocab: Vec<String>,
    answer_space: AnswerSpace,
    records: Vec<RecordHeader>,
    ffn_layers: usize,
    tensors: Vec<TensorDescriptor>,
    payload_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    example_id: String,
    path_group: String,
    gold_label: Option<usize>,
    greedy: bool,
    positions: Vec<u32>,
    answer_position_index: usize,
    has_attention: bool,
    segments: Option<Vec<Segment>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorDescriptor {
    name: String,
    dims: Vec<u64>,
    offset: u64,
}

fn hidden_name(i: usize) -> String {
    format!("records.{i}.hidden_states")
}

fn attention_name(i: usize) -> String {
    format!("records.{i}.attention_rows")
}

fn ffn_name(l: usize) -> String {
    format!("ffn_value.{l}")
}

/// Serializes `set` as ICT1 and returns the number of bytes written.
///
/// The set is validated first; nothing is written if it is invalid.
pub fn write_trace<W: Write>(set: &TraceSet, mut sink: W) -> Result<u64> {
    let violations = validate_trace(set);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }

    let mut tensors: Vec<(String, &Tensor)> = vec![("unembed".into(), &set.unembed)];
    let mut records = Vec::with_capacity(set.records.len());
    for (i, r) in set.records.iter().enumerate() {
        tensors.push((hidden_name(i), &r.hidden_states));
        if let Some(att) = &r.attention_rows {
            tensors.push((attention_name(i), att));
        }
        records.push(RecordHeader {
            example_id: r.example_id.clone(),
            path_group: r.path_group.clone(),
            gold_label: r.gold_label,
            greedy: r.greedy,
            positions: r.positions.clone(),
            answer_position_index: r.answer_position_index,
            has_attention: r.attention_rows.is_some(),
            segments: r.segments.as_ref().map(|s| s.segments.clone()),
        });
    }
    let ffn_layers = match &set.ffn_value_matrices {
        Some(ffn) => {
            for (l, m) in ffn.iter().enumerate() {
                tensors.push((ffn_name(l), m));
            }
            ffn.len()
        }
        None => 0,
    };

    let mut offset = 0u64;
    let descriptors: Vec<TensorDescriptor> = tensors
        .iter()
        .map(|(name, t)| {
            let d = TensorDescriptor {
                name: name.clone(),
                dims: t.dims().iter().map(|&x| x as u64).collect(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            d
        })
        .collect();

    let header = Header {
        format: "ICT1".into(),
        version: VERSION,
        model_meta: set.model_meta,
        vocab: set.vocab.clone(),
        answer_space: set.answer_space.clone(),
        records,
        ffn_layers,
        tensors: descriptors,
        payload_bytes: offset,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    sink.write_all(&MAGIC)?;
    sink.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    sink.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for (_, t) in &tensors {
        buf.clear();
        buf.reserve(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(12 + header_bytes.len() as u64 + offset)
}

/// Reads an ICT1 stream and rejects it unless every invariant holds.
pub fn read_trace<R: Read>(source: R) -> Result<TraceSet> {
    let set = read_trace_unchecked(source)?;
    let violations = validate_trace(&set);
    if violations.is_empty() {
        Ok(set)
    } else {
        Err(Error::Invalid(violations))
    }
}

/// Parses an ICT1 stream, checking only container structure (magic,
/// descriptor dimensions, payload extents). Use [`validate_trace`] to list
/// value-level violations.
pub fn read_trace_unchecked<R: Read>(mut source: R) -> Result<TraceSet> {
    let mut magic = [0u8; 4];
    let n = read_up_to(&mut source, &mut magic)?;
    if n < 4 || magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic[..n].to_vec(),
        });
    }
    let mut len_buf = [0u8; 8];
    if read_up_to(&mut source, &mut len_buf)? < 8 {
        return Err(Error::Truncated {
            tensor: "<header length>".into(),
        });
    }
    let header_len = u64::from_le_bytes(len_buf);
    let mut header_bytes = Vec::new();
    source.by_ref().take(header_len).read_to_end(&mut header_bytes)?;
    if (header_bytes.len() as u64) < header_len {
        return Err(Error::Truncated {
            tensor: "<header>".into(),
        });
    }
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Header(e.to_string()))?;
    if header.format != "ICT1" || header.version != VERSION {
        return Err(Error::Header(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }

    let mut payload = Vec::new();
    source.by_ref().take(header.payload_bytes).read_to_end(&mut payload)?;
    check_extents(&header, payload.len() as u64)?;

    let meta = header.model_meta;
    let lookup = |name: &str| -> Result<&TensorDescriptor> {
        header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Header(format!("missing tensor `{name}`")))
    };
    let load = |desc: &TensorDescriptor| -> Result<Tensor> {
        let start = desc.offset as usize;
        let numel: u64 = desc.dims.iter().product();
        let bytes = &payload[start..start + 4 * numel as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(desc.dims.iter().map(|&d| d as usize).collect(), data)
    };
    let expect_dims = |desc: &TensorDescriptor, expected: &[Option<u64>]| -> Result<()> {
        let matches = desc.dims.len() == expected.len()
            && desc.dims.iter().zip(expected).all(|(&d, e)| e.is_none_or(|e| e == d));
        if matches {
            Ok(())
        } else {
            let shown: Vec<String> = expected
                .iter()
                .map(|e| e.map_or("*".to_string(), |v| v.to_string()))
                .collect();
            Err(Error::DimensionMismatch {
                tensor: desc.name.clone(),
                detail: format!("payload dims {:?}, header implies [{}]", desc.dims, shown.join(", ")),
            })
        }
    };

    let layers = meta.layers as u64;
    let hidden = meta.hidden as u64;

    let unembed_desc = lookup("unembed")?;
    expect_dims(unembed_desc, &[None, Some(hidden)])?;
    let unembed = load(unembed_desc)?;

    let mut records = Vec::with_capacity(header.records.len());
    for (i, rh) in header.records.into_iter().enumerate() {
        let hd = lookup(&hidden_name(i))?;
        expect_dims(hd, &[Some(rh.positions.len() as u64), Some(layers + 1), Some(hidden)])?;
        let hidden_states = load(hd)?;
        let attention_rows = if rh.has_attention {
            let ad = lookup(&attention_name(i))?;
            expect_dims(ad, &[Some(layers), Some(meta.heads as u64), None])?;
            Some(load(ad)?)
        } else {
            None
        };
        records.push(ExampleRecord {
            example_id: rh.example_id,
            path_group: rh.path_group,
            gold_label: rh.gold_label,
            greedy: rh.greedy,
            positions: rh.positions,
            answer_position_index: rh.answer_position_index,
            hidden_states,
            attention_rows,
            segments: rh.segments.map(SegmentMap::new),
        });
    }

    let ffn_value_matrices = if header.ffn_layers > 0 {
        let mut mats = Vec::with_capacity(header.ffn_layers);
        for l in 0..header.ffn_layers {
            let fd = lookup(&ffn_name(l))?;
            expect_dims(fd, &[None, Some(hidden)])?;
            mats.push(load(fd)?);
        }
        Some(mats)
    } else {
        None
    };

    Ok(TraceSet {
        model_meta: meta,
        vocab: header.vocab,
        unembed,
        answer_space: header.answer_space,
        records,
        ffn_value_matrices,
    })
}

/// Tensors must tile the payload exactly; a short payload is a truncation
/// of whichever tensor straddles its end.
fn check_extents(header: &Header, available: u64) -> Result<()> {
    let mut cursor = 0u64;
    for desc in &header.tensors {
        let size = 4 * desc.dims.iter().product::<u64>();
        if desc.offset != cursor {
            return Err(Error::DimensionMismatch {
                tensor: desc.name.clone(),
                detail: format!(
                    "starts at byte {} but the preceding tensors end at byte {cursor}",
                    desc.offset
                ),
            });
        }
        let end = cursor + size;
        if end > available {
            if end > header.payload_bytes {
                return Err(Error::DimensionMismatch {
                    tensor: desc.name.clone(),
                    detail: format!(
                        "dims {:?} need bytes {cursor}..{end} but the payload holds {} bytes",
                        desc.dims, header.payload_bytes
                    ),
                });
            }
            return Err(Error::Truncated {
                tensor: desc.name.clone(),
            });
        }
        cursor = end;
    }
    if cursor != header.payload_bytes {
        let name = header
            .tensors
            .last()
            .map_or_else(|| "<payload>".to_string(), |t| t.name.clone());
        return Err(Error::DimensionMismatch {
            tensor: name,
            detail: format!(
                "tensors cover {cursor} bytes but the payload holds {}",
                header.payload_bytes
            ),
        });
    }
    if available < header.payload_bytes {
        return Err(Error::Truncated {
            tensor: "<payload>".into(),
        });
    }
    Ok(())
}

fn read_up_to<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

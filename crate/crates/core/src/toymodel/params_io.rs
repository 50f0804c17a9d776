//! TOYP container for toy-model parameters.
//!
//! Same framing as ICT1 (`"TOYP" | header_len: u64 LE | JSON | payload`);
//! the header carries the config and one descriptor per named tensor.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::model::{ToyConfig, ToyParams};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: [u8; 4] = *b"TOYP";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ToyConfig,
    train_accuracy: Option<f64>,
    tensors: Vec<Descriptor>,
    payload_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    name: String,
    dims: Vec<usize>,
    offset: u64,
}

pub fn write_params<W: Write>(params: &ToyParams, mut sink: W) -> Result<u64> {
    let layout = params.cfg.layout();
    if params.data.len() != layout.total {
        return Err(Error::Shape(format!(
            "{} parameters for a layout of {}",
            params.data.len(),
            layout.total
        )));
    }
    let header = Header {
        format: "TOYP".into(),
        version: 1,
        config: params.cfg,
        train_accuracy: params.train_accuracy,
        tensors: layout
            .entries
            .iter()
            .map(|(name, dims, off)| Descriptor {
                name: name.clone(),
                dims: dims.clone(),
                offset: (*off * 4) as u64,
            })
            .collect(),
        payload_bytes: (layout.total * 4) as u64,
    };
    let json = serde_json::to_vec(&header)?;
    sink.write_all(&PARAMS_MAGIC)?;
    sink.write_all(&(json.len() as u64).to_le_bytes())?;
    sink.write_all(&json)?;
    let mut payload = Vec::with_capacity(layout.total * 4);
    for v in &params.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    Ok(12 + json.len() as u64 + payload.len() as u64)
}

pub fn read_params<R: Read>(mut source: R) -> Result<ToyParams> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(|_| Error::BadMagic {
        expected: PARAMS_MAGIC,
        found: Vec::new(),
    })?;
    if magic != PARAMS_MAGIC {
        return Err(Error::BadMagic {
            expected: PARAMS_MAGIC,
            found: magic.to_vec(),
        });
    }
    let mut len = [0u8; 8];
    source
        .read_exact(&mut len)
        .map_err(|_| Error::Truncated { tensor: "header".into() })?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    source
        .read_exact(&mut json)
        .map_err(|_| Error::Truncated { tensor: "header".into() })?;
    let header: Header = serde_json::from_slice(&json)?;
    header.config.validate()?;
    let layout = header.config.layout();
    if header.payload_bytes != (layout.total * 4) as u64 || header.tensors.len() != layout.entries.len() {
        return Err(Error::DimensionMismatch {
            tensor: "payload".into(),
            detail: "header does not match the configured layout".into(),
        });
    }
    for (d, (name, dims, off)) in header.tensors.iter().zip(&layout.entries) {
        if &d.name != name || &d.dims != dims || d.offset != (*off * 4) as u64 {
            return Err(Error::DimensionMismatch {
                tensor: d.name.clone(),
                detail: format!("expected {name} with dims {dims:?} at byte {}", off * 4),
            });
        }
    }
    let mut payload = vec![0u8; layout.total * 4];
    let mut filled = 0;
    while filled < payload.len() {
        let n = source.read(&mut payload[filled..])?;
        if n == 0 {
            let at = filled / 4;
            let tensor = layout
                .entries
                .iter()
                .rev()
                .find(|(_, _, off)| *off <= at)
                .map(|(n, _, _)| n.clone())
                .unwrap_or_default();
            return Err(Error::Truncated { tensor });
        }
        filled += n;
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(ToyParams {
        cfg: header.config,
        data,
        train_accuracy: header.train_accuracy,
    })
}

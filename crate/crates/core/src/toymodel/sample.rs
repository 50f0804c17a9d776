//! Temperature and nucleus (top-p) sampling of rationales.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward, logits_at, ToyParams};
use super::task::ANS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// Zero-temperature limit: always take the argmax.
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.95,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }
}

/// Softmax of `logits / temperature`.
pub fn tempered_distribution(logits: &[f32], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Keeps the smallest descending-probability prefix with mass ≥ `top_p`,
/// renormalizes it and draws one index. Equal probabilities keep index order.
pub fn nucleus_sample<R: Rng>(probs: &[f64], top_p: f64, rng: &mut R) -> usize {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &idx {
        mass += probs[i];
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let mut u = rng.random::<f64>() * mass;
    for &i in &idx[..kept] {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    idx[kept - 1]
}

pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Samples one continuation of `prompt` up to and including `A:`. When the
/// sequence would reach `max_seq`, `A:` is appended instead.
pub fn sample_continuation<R: Rng>(params: &ToyParams, prompt: &[u32], cfg: &SamplingConfig, rng: &mut R) -> Result<Vec<u32>> {
    let max_seq = params.cfg.max_seq;
    if prompt.len() >= max_seq {
        return Err(Error::InvalidInput(format!(
            "prompt of {} tokens leaves no room under max_seq {max_seq}",
            prompt.len()
        )));
    }
    let mut seq = prompt.to_vec();
    loop {
        if seq.len() == max_seq - 1 {
            seq.push(ANS);
            break;
        }
        let cache = forward(params, &seq)?;
        let logits = logits_at(params, &cache, seq.len() - 1);
        let next = if cfg.greedy {
            argmax(&logits)
        } else {
            nucleus_sample(&tempered_distribution(&logits, cfg.temperature), cfg.top_p, rng)
        } as u32;
        seq.push(next);
        if next == ANS {
            break;
        }
    }
    Ok(seq[prompt.len()..].to_vec())
}

/// `n_paths` continuations; path `i` draws from its own stream of `seed`.
pub fn sample_paths(params: &ToyParams, prompt: &[u32], n_paths: usize, cfg: &SamplingConfig, seed: u64) -> Result<Vec<Vec<u32>>> {
    if n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be at least 1".into()));
    }
    (0..n_paths)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample_continuation(params, prompt, cfg, &mut rng)
        })
        .collect()
}

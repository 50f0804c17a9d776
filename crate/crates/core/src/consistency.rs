//! Agreement of latent predictions with the final prediction.
//!
//! Internal consistency is the fraction of intermediate layers `1..L-1`
//! whose balanced latent prediction matches the final-layer prediction.
//! The embedding layer and the final layer itself are excluded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::LatentPredictionVector;

/// Indicator per intermediate layer: bit `l - 1` is set iff layer `l`
/// agrees with layer `L`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementVector {
    pub bits: Vec<u8>,
}

impl AgreementVector {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidInput("agreement bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Layers `1..=len` the bits refer to.
    pub fn layer_range(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.bits.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct IcScore(pub f64);

impl IcScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn agreement_vector(latent: &LatentPredictionVector, final_label: usize) -> Result<AgreementVector> {
    let n = latent.labels.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "internal consistency needs L >= 2 (got {} latent predictions for L + 1 layers)",
            n
        )));
    }
    if final_label > 1 {
        return Err(Error::InvalidInput(format!("invalid final label {final_label}")));
    }
    let bits = latent.labels[1..n - 1]
        .iter()
        .map(|&l| (l == final_label) as u8)
        .collect();
    Ok(AgreementVector { bits })
}

pub fn internal_consistency(a: &AgreementVector) -> Result<IcScore> {
    if a.is_empty() {
        return Err(Error::InvalidInput("empty agreement vector".into()));
    }
    let ones: u64 = a.bits.iter().map(|&b| b as u64).sum();
    Ok(IcScore(ones as f64 / a.len() as f64))
}

/// `wᵀa`, unnormalized.
pub fn weighted_consistency(a: &AgreementVector, w: &[f64]) -> Result<f64> {
    if w.len() != a.len() {
        return Err(Error::Shape(format!(
            "{} layer weights for an agreement vector of length {}",
            w.len(),
            a.len()
        )));
    }
    Ok(a.bits
        .iter()
        .zip(w)
        .map(|(&b, &wi)| if b == 1 { wi } else { 0.0 })
        .sum())
}

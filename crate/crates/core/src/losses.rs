//! Distillation and reconstruction losses over probability distributions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_codec::{paste, CodeGrid, Codebook, GRID_CELLS, PATCH, PATCH_DIM};
use crate::depth_map::{DepthMap, CANONICAL_SIZE};
use crate::error::{Error, Result};
use crate::vocab::SpecialistMapping;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_EPSILON: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {bad} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            probs: vec![1.0 / len as f64; len],
        }
    }

    /// Softmax with max subtraction.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidDistribution("logits have no finite maximum".into()));
        }
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        Self::new(exp.into_iter().map(|e| e / total).collect())
    }

    /// `alpha · a + (1 − alpha) · b`.
    pub fn mix(alpha: f64, a: &Distribution, b: &Distribution) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::SupportMismatch(format!(
                "cannot mix supports of {} and {}",
                a.len(),
                b.len()
            )));
        }
        Self::new(
            a.probs
                .iter()
                .zip(&b.probs)
                .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                .collect(),
        )
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// `−Σ_i q_i · ln p_{M(i)}`: cross-entropy of the specialist's code
/// distribution `q` against the model's token distribution `p` pulled back
/// through `mapping`.
pub fn distill_loss(q: &Distribution, p: &Distribution, mapping: &SpecialistMapping) -> Result<f64> {
    distill_loss_with_epsilon(q, p, mapping, LOG_EPSILON)
}

/// [`distill_loss`] with a custom probability floor.
pub fn distill_loss_with_epsilon(
    q: &Distribution,
    p: &Distribution,
    mapping: &SpecialistMapping,
    epsilon: f64,
) -> Result<f64> {
    if q.len() != mapping.len() {
        return Err(Error::SupportMismatch(format!(
            "q covers {} codes, mapping has {}",
            q.len(),
            mapping.len()
        )));
    }
    if let Some(t) = mapping.targets().iter().find(|t| t.index() >= p.len()) {
        return Err(Error::SupportMismatch(format!(
            "mapping targets token {t}, p covers {} tokens",
            p.len()
        )));
    }
    let loss: f64 = q
        .probs
        .iter()
        .zip(mapping.targets())
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, t)| -qi * p.probs[t.index()].max(epsilon).ln())
        .sum();
    Ok(loss.max(0.0))
}

/// Probability-weighted centroid merge: slot `i` becomes
/// `Σ_c steps[i][c] · centroid_c`. One-hot inputs reproduce
/// [`Codebook::decode`] exactly.
pub fn soft_decode(steps: &[Distribution], cb: &Codebook) -> Result<DepthMap> {
    if steps.len() != GRID_CELLS {
        return Err(Error::BadArity {
            expected: GRID_CELLS,
            got: steps.len(),
        });
    }
    if let Some(d) = steps.iter().find(|d| d.len() != cb.k()) {
        return Err(Error::SupportMismatch(format!(
            "step distribution covers {} codes, codebook has {}",
            d.len(),
            cb.k()
        )));
    }
    let mut values = vec![0.0; CANONICAL_SIZE * CANONICAL_SIZE];
    let mut patch = vec![0.0f64; PATCH_DIM];
    for (cell, dist) in steps.iter().enumerate() {
        patch.iter_mut().for_each(|v| *v = 0.0);
        for (code, &w) in dist.probs.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (acc, &c) in patch.iter_mut().zip(cb.centroid(code)) {
                *acc += w * f64::from(c);
            }
        }
        paste(&mut values, cell, patch.iter().map(|v| v.clamp(0.0, 1.0)));
    }
    DepthMap::new(CANONICAL_SIZE, CANONICAL_SIZE, values)
}

/// Model output at the 100 depth positions.
#[derive(Debug, Clone, Copy)]
pub enum Prediction<'a> {
    Hard(&'a CodeGrid),
    Soft(&'a [Distribution]),
}

impl Prediction<'_> {
    pub fn reconstruct(&self, cb: &Codebook) -> Result<DepthMap> {
        match self {
            Prediction::Hard(grid) => cb.decode(grid),
            Prediction::Soft(steps) => soft_decode(steps, cb),
        }
    }
}

/// Full-map mean squared error between the reconstruction and `target`.
pub fn recon_loss(predicted: Prediction<'_>, target: &DepthMap, cb: &Codebook) -> Result<f64> {
    target.ensure_canonical()?;
    predicted.reconstruct(cb)?.mse(target)
}

/// Per-slot squared error, one entry per 32×32 cell in row-major order.
/// Their mean equals [`recon_loss`].
pub fn recon_loss_per_slot(predicted: Prediction<'_>, target: &DepthMap, cb: &Codebook) -> Result<Vec<f64>> {
    target.ensure_canonical()?;
    let recon = predicted.reconstruct(cb)?;
    Ok((0..GRID_CELLS)
        .map(|cell| {
            let (row, col) = (cell / (CANONICAL_SIZE / PATCH), cell % (CANONICAL_SIZE / PATCH));
            let mut sum = 0.0;
            for y in row * PATCH..(row + 1) * PATCH {
                for x in col * PATCH..(col + 1) * PATCH {
                    let d = recon.get(x, y) - target.get(x, y);
                    sum += d * d;
                }
            }
            sum / PATCH_DIM as f64
        })
        .collect())
}

/// Hard-grid losses for a batch, in input order.
pub fn recon_loss_batch(pairs: &[(CodeGrid, DepthMap)], cb: &Codebook) -> Result<Vec<f64>> {
    pairs
        .par_iter()
        .map(|(grid, target)| recon_loss(Prediction::Hard(grid), target, cb))
        .collect()
}

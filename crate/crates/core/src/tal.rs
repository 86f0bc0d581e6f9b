//! Triplet alignment loss over a batch similarity matrix.
//!
//! For each image row (and symmetrically each text column) the loss is
//!
//! ```text
//! [ m - S⁺ + τ · log Σ_j exp(S_ij / τ) ]₊
//! ```
//!
//! where `S⁺` is the softmax(S/τ)-weighted average of the row's positive
//! similarities. The log-sum-exp runs over the whole row. Both directions
//! are summed per sample and the batch is averaged.

use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, GeaError, Result};
use crate::feature_store::IdentityLabel;
use crate::tensor::Mat;

const RANGE_SLACK: f64 = 1e-9;

/// Which entries enter the softmax weighting of `S⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveRestriction {
    /// Same-identity pairs only, renormalized over that set.
    #[default]
    PositivesOnly,
    /// Every pair in the row, as the weight formula is literally printed.
    AllPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TalConfig {
    pub margin: f64,
    pub temperature: f64,
    pub positive_restriction: PositiveRestriction,
}

impl Default for TalConfig {
    fn default() -> Self {
        TalConfig {
            margin: 0.1,
            temperature: 0.015,
            positive_restriction: PositiveRestriction::PositivesOnly,
        }
    }
}

impl TalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !(self.temperature > 0.0) {
            bail_arg!(
                "TAL needs margin > 0 and temperature > 0, got m={} tau={}",
                self.margin,
                self.temperature
            );
        }
        Ok(())
    }
}

/// K×K image-by-text cosine scores with the identity of each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Mat,
    image_ids: Vec<IdentityLabel>,
    text_ids: Vec<IdentityLabel>,
}

impl SimilarityMatrix {
    pub fn new(scores: Mat, image_ids: Vec<IdentityLabel>, text_ids: Vec<IdentityLabel>) -> Result<Self> {
        let (r, c) = scores.shape();
        if r == 0 || r != c {
            bail_arg!("similarity matrix must be square with K >= 1, got {r}x{c}");
        }
        if image_ids.len() != r || text_ids.len() != c {
            bail_arg!(
                "label count mismatch: {} image / {} text labels for K={r}",
                image_ids.len(),
                text_ids.len()
            );
        }
        if let Some(bad) = scores
            .data()
            .iter()
            .find(|v| !v.is_finite() || v.abs() > 1.0 + RANGE_SLACK)
        {
            return Err(GeaError::Numeric(format!("similarity {bad} outside [-1, 1]")));
        }
        Ok(SimilarityMatrix {
            scores,
            image_ids,
            text_ids,
        })
    }

    pub fn k(&self) -> usize {
        self.scores.rows()
    }

    pub fn scores(&self) -> &Mat {
        &self.scores
    }

    pub fn image_ids(&self) -> &[IdentityLabel] {
        &self.image_ids
    }

    pub fn text_ids(&self) -> &[IdentityLabel] {
        &self.text_ids
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.image_ids[i] == self.text_ids[j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image rows against all texts.
    I2t,
    /// Text columns against all images.
    T2i,
}

/// Masked softmax of `row / tau`, max-subtracted over the included set.
pub fn softmax_weights(row: &[f64], mask: &[bool], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        bail_arg!("temperature must be positive, got {tau}");
    }
    if row.len() != mask.len() {
        bail_arg!("row has {} entries but mask has {}", row.len(), mask.len());
    }
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        bail_arg!("softmax mask selects no entries");
    }
    let mut w: Vec<f64> = row
        .iter()
        .zip(mask)
        .map(|(v, &m)| if m { ((v - max) / tau).exp() } else { 0.0 })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    Ok(w)
}

/// `τ · log Σ exp(v / τ)` and its gradient (the full softmax).
fn scaled_logsumexp(values: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + tau * sum.ln(), exps.iter().map(|e| e / sum).collect())
}

struct LineTerm {
    hinge_arg: f64,
    grad: Vec<f64>,
}

fn line_term(values: &[f64], mask: &[bool], cfg: &TalConfig) -> Result<LineTerm> {
    let tau = cfg.temperature;
    let alpha = softmax_weights(values, mask, tau)?;
    let s_pos: f64 = alpha.iter().zip(values).map(|(a, s)| a * s).sum();
    let (lse, soft) = scaled_logsumexp(values, tau);
    let grad = values
        .iter()
        .zip(alpha.iter().zip(&soft))
        .map(|(s, (a, p))| p - a * (1.0 + (s - s_pos) / tau))
        .collect();
    Ok(LineTerm {
        hinge_arg: cfg.margin - s_pos + lse,
        grad,
    })
}

fn line(s: &SimilarityMatrix, dir: Direction, idx: usize, cfg: &TalConfig) -> (Vec<f64>, Vec<bool>) {
    let k = s.k();
    let all = cfg.positive_restriction == PositiveRestriction::AllPairs;
    match dir {
        Direction::I2t => (
            s.scores.row(idx).to_vec(),
            (0..k).map(|j| all || s.is_positive(idx, j)).collect(),
        ),
        Direction::T2i => (
            (0..k).map(|i| s.scores.get(i, idx)).collect(),
            (0..k).map(|i| all || s.is_positive(i, idx)).collect(),
        ),
    }
}

fn require_positive(s: &SimilarityMatrix, dir: Direction, idx: usize, mask: &[bool]) -> Result<()> {
    if mask.iter().any(|&m| m) {
        return Ok(());
    }
    let (axis, id) = match dir {
        Direction::I2t => ("image row", s.image_ids[idx]),
        Direction::T2i => ("text column", s.text_ids[idx]),
    };
    bail_arg!("{axis} {idx} (identity {id}) has no positive pair in the batch")
}

/// Softmax-weighted positive similarity for every row (i2t) or column (t2i).
pub fn positive_aggregate(s: &SimilarityMatrix, dir: Direction, cfg: &TalConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    (0..s.k())
        .map(|idx| {
            let (values, mask) = line(s, dir, idx, cfg);
            require_positive(s, dir, idx, &mask)?;
            let alpha = softmax_weights(&values, &mask, cfg.temperature)?;
            Ok(alpha.iter().zip(&values).map(|(a, v)| a * v).sum())
        })
        .collect()
}

pub fn tal(s: &SimilarityMatrix, cfg: &TalConfig) -> Result<f64> {
    tal_with_grad(s, cfg).map(|(l, _)| l)
}

/// Loss and ∂loss/∂S. At a hinge kink the zero subgradient is used.
pub fn tal_with_grad(s: &SimilarityMatrix, cfg: &TalConfig) -> Result<(f64, Mat)> {
    cfg.validate()?;
    let k = s.k();
    let inv_k = 1.0 / k as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(k, k);
    for dir in [Direction::I2t, Direction::T2i] {
        for idx in 0..k {
            let (values, mask) = line(s, dir, idx, cfg);
            require_positive(s, dir, idx, &mask)?;
            let term = line_term(&values, &mask, cfg)?;
            if term.hinge_arg > 0.0 {
                loss += term.hinge_arg;
                for (other, g) in term.grad.iter().enumerate() {
                    let (r, c) = match dir {
                        Direction::I2t => (idx, other),
                        Direction::T2i => (other, idx),
                    };
                    let cur = grad.get(r, c);
                    grad.set(r, c, cur + inv_k * g);
                }
            }
        }
    }
    Ok((loss * inv_k, grad))
}

/// Sum of the global-space and fused-space alignment losses.
pub fn total_loss(global: &SimilarityMatrix, fused: &SimilarityMatrix, cfg: &TalConfig) -> Result<f64> {
    if global.k() != fused.k() || global.image_ids != fused.image_ids || global.text_ids != fused.text_ids {
        bail_arg!("global and fused matrices come from different batches");
    }
    Ok(tal(global, cfg)? + tal(fused, cfg)?)
}

/// Upper bound of the per-batch loss when similarities lie in [-1, 1].
pub fn tal_ceiling(cfg: &TalConfig, k: usize) -> f64 {
    2.0 * (cfg.margin + 2.0 + cfg.temperature * (k as f64).ln())
}

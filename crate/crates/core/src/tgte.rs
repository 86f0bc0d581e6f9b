//! Text-guided token enhancement: the generated-image global token is
//! blended into the text global token before cosine scoring.

use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, GeaError, Result};
use crate::feature_store::IdentityLabel;
use crate::tal::SimilarityMatrix;
use crate::tensor::{dot, norm, Mat};

/// Linear per-epoch ramp of the mix weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixSchedule {
    pub omega_start: f64,
    pub omega_end: f64,
    pub total_epochs: usize,
}

impl Default for MixSchedule {
    fn default() -> Self {
        MixSchedule {
            omega_start: 0.3,
            omega_end: 0.6,
            total_epochs: 60,
        }
    }
}

impl MixSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.omega_start && self.omega_start <= self.omega_end && self.omega_end <= 1.0) {
            bail_arg!(
                "mix schedule needs 0 <= omega_start <= omega_end <= 1, got {} .. {}",
                self.omega_start,
                self.omega_end
            );
        }
        if self.total_epochs == 0 {
            bail_arg!("total_epochs must be positive");
        }
        Ok(())
    }
}

/// `(1 - omega) * t_eos + omega * g_cls`.
pub fn mix_tokens(t_eos: &[f64], g_cls: &[f64], omega: f64) -> Result<Vec<f64>> {
    if t_eos.len() != g_cls.len() {
        bail_arg!("mix dimension mismatch: {} vs {}", t_eos.len(), g_cls.len());
    }
    if !(0.0..=1.0).contains(&omega) {
        bail_arg!("omega {omega} outside [0, 1]");
    }
    // Endpoints are returned verbatim so that omega = 0 / 1 are bit-exact.
    if omega == 0.0 {
        return Ok(t_eos.to_vec());
    }
    if omega == 1.0 {
        return Ok(g_cls.to_vec());
    }
    Ok(t_eos
        .iter()
        .zip(g_cls)
        .map(|(t, g)| (1.0 - omega) * t + omega * g)
        .collect())
}

pub fn omega_at(schedule: &MixSchedule, epoch: usize) -> Result<f64> {
    schedule.validate()?;
    if epoch >= schedule.total_epochs {
        bail_arg!("epoch {epoch} outside [0, {})", schedule.total_epochs);
    }
    if schedule.total_epochs == 1 {
        return Ok(schedule.omega_start);
    }
    let frac = epoch as f64 / (schedule.total_epochs - 1) as f64;
    Ok(schedule.omega_start + (schedule.omega_end - schedule.omega_start) * frac)
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        bail_arg!("cosine dimension mismatch: {} vs {}", u.len(), v.len());
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(GeaError::Numeric("cosine similarity of a zero or non-finite vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradients of `cos(u, v)` with respect to `u` and `v`.
pub fn cosine_grad(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nu, nv) = (norm(u), norm(v));
    let s = dot(u, v) / (nu * nv);
    let gu = u
        .iter()
        .zip(v)
        .map(|(a, b)| b / (nu * nv) - s * a / (nu * nu))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(a, b)| a / (nu * nv) - s * b / (nv * nv))
        .collect();
    (gu, gv)
}

/// Pairwise cosine matrix: entry (i, j) compares image i with text j.
pub fn similarity_matrix(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    image_ids: &[IdentityLabel],
    text_ids: &[IdentityLabel],
) -> Result<SimilarityMatrix> {
    if images.len() != texts.len() {
        bail_arg!("batch size mismatch: {} images vs {} texts", images.len(), texts.len());
    }
    let scores = cosine_matrix(images, texts)?;
    SimilarityMatrix::new(scores, image_ids.to_vec(), text_ids.to_vec())
}

/// Rectangular cosine matrix (rows from `a`, columns from `b`).
pub fn cosine_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Mat> {
    let unit = |vs: &[Vec<f64>], what: &str| -> Result<Vec<Vec<f64>>> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| {
                let n = norm(v);
                if n == 0.0 || !n.is_finite() {
                    return Err(GeaError::Numeric(format!("{what} {i} has zero or non-finite norm")));
                }
                Ok(v.iter().map(|x| x / n).collect())
            })
            .collect()
    };
    let ua = unit(a, "row")?;
    let ub = unit(b, "column")?;
    let mut m = Mat::zeros(a.len(), b.len());
    for (i, x) in ua.iter().enumerate() {
        if x.len() != ub.first().map_or(x.len(), Vec::len) {
            bail_arg!("cosine dimension mismatch in row {i}");
        }
        for (j, y) in ub.iter().enumerate() {
            m.set(i, j, dot(x, y).clamp(-1.0, 1.0));
        }
    }
    Ok(m)
}

/// Back-propagates `grad = ∂L/∂S` through `S = cosine_matrix(a, b)`.
pub fn cosine_matrix_backward(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    scores: &Mat,
    grad: &Mat,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let unit = |v: &Vec<f64>| {
        let n = norm(v);
        (v.iter().map(|x| x / n).collect::<Vec<f64>>(), n)
    };
    let ua: Vec<_> = a.iter().map(unit).collect();
    let ub: Vec<_> = b.iter().map(unit).collect();
    let dim = a.first().map_or(0, Vec::len);
    let mut ga = vec![vec![0.0; dim]; a.len()];
    let mut gb = vec![vec![0.0; dim]; b.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            let g = grad.get(i, j);
            if g == 0.0 {
                continue;
            }
            let s = scores.get(i, j);
            let (ai, na) = (&ua[i].0, ua[i].1);
            let (bj, nb) = (&ub[j].0, ub[j].1);
            for k in 0..dim {
                ga[i][k] += g * (bj[k] - s * ai[k]) / na;
                gb[j][k] += g * (ai[k] - s * bj[k]) / nb;
            }
        }
    }
    (ga, gb)
}

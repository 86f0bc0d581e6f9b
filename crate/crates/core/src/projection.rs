//! Deterministic 2-D PCA projection of global tokens.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{bail_arg, Result};

/// Points projected onto the top two principal axes of their own cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first.
    pub axes: [Vec<f64>; 2],
    pub coords: Vec<[f64; 2]>,
    /// True when the covariance was zero and the coordinate axes were used.
    pub degenerate: bool,
}

impl Projection {
    /// Projects an arbitrary point with the fitted mean and axes.
    pub fn apply(&self, p: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = p.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let dot = |a: &[f64]| a.iter().zip(&c).map(|(x, y)| x * y).sum();
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

/// Flip so the largest-magnitude component (lowest index on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn project_2d(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    if n < 3 {
        bail_arg!("projection needs at least 3 points, got {n}");
    }
    let d = points[0].len();
    if d == 0 {
        bail_arg!("points have zero dimensions");
    }
    if let Some(i) = points.iter().position(|p| p.len() != d) {
        bail_arg!("point {i} has {} dimensions, expected {d}", points[i].len());
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
        return Err(crate::GeaError::Numeric(format!("point {i} is not finite")));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;

    let axis = |k: usize| -> Vec<f64> {
        let mut e = vec![0.0; d];
        if k < d {
            e[k] = 1.0;
        }
        e
    };
    let (axes, degenerate) = if cov.iter().all(|&x| x == 0.0) {
        log::warn!("projection covariance is zero; falling back to the first two coordinate axes");
        ([axis(0), axis(1)], true)
    } else {
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let pick = |k: usize| -> Vec<f64> {
            match order.get(k) {
                Some(&c) => {
                    let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                    fix_sign(&mut v);
                    v
                }
                None => vec![0.0; d],
            }
        };
        ([pick(0), pick(1)], false)
    };
    let mut proj = Projection {
        mean,
        axes,
        coords: Vec::new(),
        degenerate,
    };
    proj.coords = points.iter().map(|p| proj.apply(p)).collect();
    Ok(proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_use_one_axis() {
        let pts = vec![vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 2.0], vec![2.0, 4.0, 4.0]];
        let p = project_2d(&pts).unwrap();
        let xs: Vec<f64> = p.coords.iter().map(|c| c[0]).collect();
        assert!((xs[0] + 3.0).abs() < 1e-12 && xs[1].abs() < 1e-12 && (xs[2] - 3.0).abs() < 1e-12);
        assert!(p.coords.iter().all(|c| c[1].abs() < 1e-12));
    }

    #[test]
    fn identical_points_fall_back() {
        let pts = vec![vec![1.0, 1.0]; 4];
        let p = project_2d(&pts).unwrap();
        assert!(p.degenerate);
        assert!(p.coords.iter().all(|c| c == &[0.0, 0.0]));
    }

    #[test]
    fn too_few_points() {
        assert!(project_2d(&[vec![1.0], vec![2.0]]).is_err());
    }
}

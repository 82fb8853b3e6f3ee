//! Number of sources from a principal component scree.
//!
//! The fitted curves `CS` are convex combinations of `K` sources, so they lie
//! in a `(K−1)`-dimensional affine subspace. If `d` principal components of
//! the centered curves explain enough variance, `K = d + 1`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};

/// Total variance below which the curves are treated as identical.
const ZERO_VARIANCE: f64 = 1e-24;

pub const DEFAULT_THRESHOLD: f64 = 0.97;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreeResult {
    pub explained_variance_ratio: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub suggested_d: usize,
    pub suggested_k: usize,
}

/// Eigen-decomposition of the column-centered row covariance, descending.
pub struct Pca {
    pub mean: Array1<f64>,
    pub eigenvalues: Vec<f64>,
    /// Columns are the principal axes, in the order of `eigenvalues`.
    pub axes: Array2<f64>,
}

impl Pca {
    pub fn fit(x: ArrayView2<f64>) -> Result<Pca> {
        let (n, p) = x.dim();
        if n < 2 || p == 0 {
            return Err(Error::DegenerateData(format!("need at least 2 curves, got {n}×{p}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateData("curve matrix has non-finite entries".into()));
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        let centered = &x - &mean;
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(p, p, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let axes = Array2::from_shape_fn((p, p), |(r, c)| eig.eigenvectors[(r, order[c])]);
        Ok(Pca { mean, eigenvalues, axes })
    }

    /// Reconstruction of `x` from the mean and the first `d` components.
    pub fn reconstruct(&self, x: ArrayView2<f64>, d: usize) -> Array2<f64> {
        let v = self.axes.slice(ndarray::s![.., ..d]);
        let centered = &x - &self.mean;
        centered.dot(&v).dot(&v.t()) + &self.mean
    }
}

/// Frobenius norm of the residual of a centered rank-`d` PCA reconstruction.
pub fn truncated_pca_residual(x: ArrayView2<f64>, d: usize) -> Result<f64> {
    let pca = Pca::fit(x)?;
    let r = &x - &pca.reconstruct(x, d);
    Ok(r.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Scree of the curve matrix and the suggested number of sources.
pub fn scree(x: ArrayView2<f64>, threshold: f64) -> Result<ScreeResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("scree threshold must lie in (0, 1), got {threshold}")));
    }
    let (n, p) = x.dim();
    if n <= p {
        return Err(Error::DegenerateData(format!(
            "need more curves than samples per curve, got n = {n}, p = {p}"
        )));
    }
    let pca = Pca::fit(x)?;
    let total: f64 = pca.eigenvalues.iter().sum();
    if total <= ZERO_VARIANCE {
        return Ok(ScreeResult {
            explained_variance_ratio: vec![0.0; p],
            cumulative: vec![0.0; p],
            suggested_d: 0,
            suggested_k: 1,
        });
    }
    let ratios: Vec<f64> = pca.eigenvalues.iter().map(|l| l / total).collect();
    let cumulative: Vec<f64> = ratios
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();
    let d = cumulative
        .iter()
        .position(|&c| c >= threshold)
        .map_or(p, |i| i + 1);
    Ok(ScreeResult {
        explained_variance_ratio: ratios,
        cumulative,
        suggested_d: d,
        suggested_k: d + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_rows_have_no_variance() {
        let x = Array2::from_elem((30, 24), 1.0 / 24.0);
        let r = scree(x.view(), 0.97).unwrap();
        assert_eq!(r.suggested_d, 0);
        assert_eq!(r.suggested_k, 1);
        assert!(r.explained_variance_ratio.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_dim_affine_subspace() {
        // Four fixed profiles mixed with simplex weights span a 3-dim affine set.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = 12;
        let profiles: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                let raw: Vec<f64> = (0..p).map(|h| 1.0 + ((h * (k + 1)) as f64 * 0.7).sin().abs()).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let x = Array2::from_shape_fn((200, p), |_| 0.0);
        let mut x = x;
        for mut row in x.rows_mut() {
            let w: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let ws: f64 = w.iter().sum();
            for h in 0..p {
                row[h] = (0..4).map(|k| w[k] / ws * profiles[k][h]).sum::<f64>() + rng.random_range(-1e-7..1e-7);
            }
        }
        let r = scree(x.view(), 0.97).unwrap();
        assert_eq!(r.suggested_d, 3);
        assert_eq!(r.suggested_k, 4);
        assert!(r.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn too_few_rows() {
        let x = Array2::from_elem((10, 24), 1.0);
        assert!(matches!(scree(x.view(), 0.97), Err(Error::DegenerateData(_))));
        assert!(matches!(scree(x.view(), 1.5), Err(Error::Config(_))));
    }
}

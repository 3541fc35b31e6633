//! Evaluation metrics: distribution distances and retrieval in a feature
//! space, plus foot skating and spatial-control errors on joint positions.

pub mod features;
mod kinematic;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{FeatureExtractor, KinematicFeatures, TextProjection};
pub use kinematic::{foot_skating_ratio, spatial_errors, spatial_errors_batch, SpatialErrorReport};

/// `rows x dim` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::validation("feature set needs at least one row and one column"));
        }
        if data.len() != rows * dim {
            return Err(Error::shape("FeatureSet", &[rows, dim], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("feature set contains non-finite values"));
        }
        Ok(FeatureSet {
            rows,
            dim,
            data,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], extractor_id: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("feature rows differ in length"));
        }
        Self::new(rows.len(), dim, rows.concat(), extractor_id)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dim, &self.data)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

const FID_RIDGE: f64 = 1e-10;

/// Mean and unbiased covariance (with a small ridge on the diagonal).
fn moments(x: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let m = x.matrix();
    let mean = DVector::from_iterator(x.dim, m.column_iter().map(|c| c.mean()));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (x.rows - 1) as f64;
    let mut cov = centered.transpose() * &centered / denom;
    for i in 0..x.dim {
        cov[(i, i)] += FID_RIDGE;
    }
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition, clamping negative
/// eigenvalues to zero.
fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two feature sets.
pub fn fid(real: &FeatureSet, gen: &FeatureSet) -> Result<f64> {
    if real.dim != gen.dim {
        return Err(Error::shape("fid", &[real.dim], &[gen.dim]));
    }
    if real.rows < 2 || gen.rows < 2 {
        return Err(Error::validation("fid needs at least two samples per set"));
    }
    let (m1, s1) = moments(real);
    let (m2, s2) = moments(gen);
    let s2h = sqrtm_psd(&s2);
    let inner = &s2h * &s1 * &s2h;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = m1 - m2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Retrieval accuracy of the paired text among `pool_size - 1` random
/// distractors, for each `k` in `ks`. Ties are broken uniformly at random.
pub fn r_precision<R: Rng + ?Sized>(
    motion: &FeatureSet,
    text: &FeatureSet,
    pool_size: usize,
    ks: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if motion.rows != text.rows || motion.dim != text.dim {
        return Err(Error::shape("r_precision", &[motion.rows, motion.dim], &[text.rows, text.dim]));
    }
    if pool_size == 0 || motion.rows < pool_size {
        return Err(Error::validation(format!(
            "r_precision needs at least pool_size = {pool_size} pairs, got {}",
            motion.rows
        )));
    }
    let n = motion.rows;
    let mut hits = vec![0usize; ks.len()];
    for i in 0..n {
        let m = motion.row(i);
        let d_true = euclid(m, text.row(i));
        let negatives = sample_indices(rng, n - 1, pool_size - 1);
        let (mut less, mut equal) = (0usize, 0usize);
        for k in negatives.iter() {
            let idx = if k >= i { k + 1 } else { k };
            let d = euclid(m, text.row(idx));
            if d < d_true {
                less += 1;
            } else if d == d_true {
                equal += 1;
            }
        }
        let rank = less + rng.random_range(0..=equal);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / n as f64).collect())
}

/// Mean distance over `min(subset_pairs, rows / 2)` disjoint random pairs.
pub fn diversity<R: Rng + ?Sized>(feats: &FeatureSet, subset_pairs: usize, rng: &mut R) -> Result<f64> {
    let pairs = subset_pairs.min(feats.rows / 2);
    if pairs == 0 {
        return Err(Error::validation("diversity needs at least two rows"));
    }
    let idx = sample_indices(rng, feats.rows, 2 * pairs).into_vec();
    let total: f64 = idx.chunks(2).map(|p| euclid(feats.row(p[0]), feats.row(p[1]))).sum();
    Ok(total / pairs as f64)
}

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMatrix;

/// Centering plus projection onto the leading principal axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PCAProjection {
    pub mean: Vec<f64>,
    /// Row-major `n_components_kept × dim`, rows orthonormal.
    pub components: Vec<f64>,
    pub dim: usize,
    pub variance_fraction_requested: f64,
    pub n_components_kept: usize,
    /// Explained-variance ratio of each kept component, descending.
    pub explained_variance_ratio: Vec<f64>,
}

fn to_centered(features: &FeatureMatrix) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = (features.rows, features.dim);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(features.row(i)) {
            *m += f64::from(v);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let x = DMatrix::from_fn(n, d, |i, j| f64::from(features.values[i * d + j]) - mean[j]);
    (x, mean)
}

/// Eigenvalues of the sample covariance, descending, with matching unit eigenvectors
/// as columns. Uses the smaller of the covariance and Gram matrices.
fn covariance_eigen(x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let denom = (n - 1) as f64;
    let (values, vectors) = if d <= n {
        let eig = SymmetricEigen::new(x.tr_mul(x) / denom);
        (
            eig.eigenvalues.iter().copied().collect::<Vec<_>>(),
            eig.eigenvectors,
        )
    } else {
        let eig = SymmetricEigen::new(x * x.transpose() / denom);
        let mut vecs = x.tr_mul(&eig.eigenvectors);
        for (j, mut col) in vecs.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm > 0.0 && eig.eigenvalues[j] > 0.0 {
                col /= norm;
            }
        }
        (eig.eigenvalues.iter().copied().collect::<Vec<_>>(), vecs)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i].max(0.0)).collect();
    let cols = DMatrix::from_fn(vectors.nrows(), order.len(), |r, c| vectors[(r, order[c])]);
    (sorted, cols)
}

/// Smallest `k` whose cumulative explained variance reaches `fraction`, capped
/// at the numerical rank so rounding never admits a null direction.
pub fn components_for_fraction(eigenvalues: &[f64], fraction: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    let rank = eigenvalues.iter().filter(|&&v| v > total * 1e-12).count();
    let mut cum = 0.0;
    for (k, v) in eigenvalues.iter().enumerate() {
        cum += v;
        if cum / total >= fraction {
            return (k + 1).min(rank);
        }
    }
    rank
}

pub fn fit_pca(features: &FeatureMatrix, variance_fraction: f64) -> Result<PCAProjection> {
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "variance fraction must lie in (0, 1], got {variance_fraction}"
        )));
    }
    if features.rows < 2 {
        return Err(Error::Validation("PCA needs at least 2 rows".into()));
    }
    let (x, mean) = to_centered(features);
    let zero_dims: Vec<usize> = (0..features.dim)
        .filter(|&j| x.column(j).iter().all(|&v| v == 0.0))
        .collect();
    if zero_dims.len() == features.dim {
        let shown: Vec<String> = zero_dims.iter().take(16).map(|d| d.to_string()).collect();
        return Err(Error::Numerical(format!(
            "features are constant: all {} dims have zero variance (dims {}{})",
            features.dim,
            shown.join(", "),
            if zero_dims.len() > 16 { ", ..." } else { "" }
        )));
    }
    let (eigenvalues, vectors) = covariance_eigen(&x);
    let total: f64 = eigenvalues.iter().sum();
    let k = components_for_fraction(&eigenvalues, variance_fraction);
    if features.rows <= k {
        return Err(Error::Validation(format!(
            "PCA keeps {k} components but has only {} rows",
            features.rows
        )));
    }
    let d = features.dim;
    let mut components = Vec::with_capacity(k * d);
    for c in 0..k {
        components.extend(vectors.column(c).iter());
    }
    Ok(PCAProjection {
        mean,
        components,
        dim: d,
        variance_fraction_requested: variance_fraction,
        n_components_kept: k,
        explained_variance_ratio: eigenvalues[..k].iter().map(|v| v / total).collect(),
    })
}

impl PCAProjection {
    pub fn component(&self, c: usize) -> &[f64] {
        &self.components[c * self.dim..(c + 1) * self.dim]
    }

    pub fn project(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        if features.dim != self.dim {
            return Err(Error::Validation(format!(
                "projection expects {}-dim features, got {}",
                self.dim, features.dim
            )));
        }
        let k = self.n_components_kept;
        let mut out = Vec::with_capacity(features.rows * k);
        let mut centered = vec![0.0; self.dim];
        for i in 0..features.rows {
            for ((c, &v), m) in centered.iter_mut().zip(features.row(i)).zip(&self.mean) {
                *c = f64::from(v) - m;
            }
            for comp in 0..k {
                let dot: f64 = self
                    .component(comp)
                    .iter()
                    .zip(&centered)
                    .map(|(a, b)| a * b)
                    .sum();
                out.push(dot as f32);
            }
        }
        FeatureMatrix::new(features.rows, k, out)
    }

    /// Maps projected rows back to feature space.
    pub fn reconstruct(&self, projected: &FeatureMatrix) -> Result<FeatureMatrix> {
        if projected.dim != self.n_components_kept {
            return Err(Error::Validation(
                "projected width does not match component count".into(),
            ));
        }
        let mut out = Vec::with_capacity(projected.rows * self.dim);
        for i in 0..projected.rows {
            let mut row = self.mean.clone();
            for (comp, &y) in projected.row(i).iter().enumerate() {
                for (r, c) in row.iter_mut().zip(self.component(comp)) {
                    *r += f64::from(y) * c;
                }
            }
            out.extend(row.iter().map(|&v| v as f32));
        }
        FeatureMatrix::new(projected.rows, self.dim, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: usize, dim: usize, v: &[f32]) -> FeatureMatrix {
        FeatureMatrix::new(rows, dim, v.to_vec()).unwrap()
    }

    #[test]
    fn points_on_a_line_need_one_component() {
        let f = fm(3, 2, &[0.0, 0.0, 1.0, 2.0, 2.0, 4.0]);
        let p = fit_pca(&f, 0.95).unwrap();
        assert_eq!(p.n_components_kept, 1);
        let c = p.component(0);
        let norm = (c[0] * c[0] + c[1] * c[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!((c[1] / c[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn full_fraction_reconstructs_exactly() {
        let vals: Vec<f32> = (0..40).map(|i| ((i * 7919) % 97) as f32 / 13.0).collect();
        let f = fm(10, 4, &vals);
        let p = fit_pca(&f, 1.0).unwrap();
        assert_eq!(p.n_components_kept, 4);
        let back = p.reconstruct(&p.project(&f).unwrap()).unwrap();
        for (a, b) in back.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_features_rejected() {
        let f = fm(4, 3, &[1.0; 12]);
        let err = fit_pca(&f, 0.9).unwrap_err().to_string();
        assert!(err.contains("zero variance"), "{err}");
    }

    #[test]
    fn wide_matrix_uses_gram_path() {
        let vals: Vec<f32> = (0..60).map(|i| ((i * 31) % 17) as f32).collect();
        let f = fm(5, 12, &vals);
        let p = fit_pca(&f, 0.99).unwrap();
        for a in 0..p.n_components_kept {
            for b in 0..p.n_components_kept {
                let dot: f64 = p
                    .component(a)
                    .iter()
                    .zip(p.component(b))
                    .map(|(x, y)| x * y)
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5);
            }
        }
    }
}

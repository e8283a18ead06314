//! Fréchet distance between Gaussian fits of feature embeddings, with the
//! symmetric matrix square root taken by Jacobi eigendecomposition.

use crate::linalg::{pca_fit, sqrtm_spd, Mat, PcaBasis};
use crate::{Error, Result};

/// PCA feature embedding standing in for a pretrained-network embedding.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub pca: PcaBasis,
}

impl EmbeddingModel {
    /// Fits a k-component PCA basis on the rows of `features`.
    pub fn fit(features: &[Vec<f64>], k: usize) -> Result<EmbeddingModel> {
        if features.len() < k + 2 {
            return Err(Error::Data(format!(
                "embedding fit needs >= {} samples, got {}",
                k + 2,
                features.len()
            )));
        }
        Ok(EmbeddingModel {
            pca: pca_fit(features, k)?,
        })
    }

    pub fn k(&self) -> usize {
        self.pca.k()
    }

    pub fn embed(&self, feature: &[f64]) -> Vec<f64> {
        self.pca.project(feature)
    }

    pub fn embed_all(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        features.iter().map(|f| self.embed(f)).collect()
    }
}

/// Mean and covariance of a point set, covariance ridged by 1e-6·I.
pub fn gaussian_stats(points: &[Vec<f64>]) -> Result<(Vec<f64>, Mat)> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Data(format!("gaussian_stats needs >= 2 points, got {n}")));
    }
    let d = points[0].len();
    let mut mean = vec![0.0f64; d];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Mat::zeros(d, d);
    for p in points {
        for a in 0..d {
            let da = p[a] - mean[a];
            for b in a..d {
                cov.data[a * d + b] += da * (p[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov.at(a, b) / (n as f64 - 1.0);
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    for i in 0..d {
        cov.data[i * d + i] += 1e-6;
    }
    Ok((mean, cov))
}

/// Fréchet distance between two Gaussians:
/// ‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2·(Σ1^{1/2}·Σ2·Σ1^{1/2})^{1/2}).
pub fn frechet_gaussian(mu1: &[f64], cov1: &Mat, mu2: &[f64], cov2: &Mat) -> f64 {
    let d = mu1.len();
    let mean_term: f64 = mu1
        .iter()
        .zip(mu2.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let s1 = sqrtm_spd(cov1);
    let inner = s1.matmul(cov2).matmul(&s1);
    // Symmetrize before the second root to keep Jacobi applicable.
    let mut sym = inner.clone();
    for a in 0..d {
        for b in 0..d {
            sym.set(a, b, 0.5 * (inner.at(a, b) + inner.at(b, a)));
        }
    }
    let cross = sqrtm_spd(&sym);
    let mut trace_term = 0.0;
    for i in 0..d {
        trace_term += cov1.at(i, i) + cov2.at(i, i) - 2.0 * cross.at(i, i);
    }
    (mean_term + trace_term).max(0.0)
}

/// Fréchet distance between two embedded sample sets.
pub fn fid(real_embedded: &[Vec<f64>], synth_embedded: &[Vec<f64>]) -> Result<f64> {
    let (mu1, cov1) = gaussian_stats(real_embedded)?;
    let (mu2, cov2) = gaussian_stats(synth_embedded)?;
    Ok(frechet_gaussian(&mu1, &cov1, &mu2, &cov2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let mut rng = StdRng::seed_from_u64(3);
        let points: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let d = fid(&points, &points).unwrap();
        assert!(d.abs() <= 1e-6, "fid(X,X) = {d}");
    }

    #[test]
    fn univariate_closed_form() {
        // 1-D Gaussians: Fréchet = (μ1−μ2)² + (σ1−σ2)²
        let mut rng = StdRng::seed_from_u64(17);
        let normal = |rng: &mut StdRng| -> f64 {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let (mu1, s1) = (0.5, 1.0);
        let (mu2, s2) = (2.0, 0.5);
        let a: Vec<Vec<f64>> = (0..5000).map(|_| vec![mu1 + s1 * normal(&mut rng)]).collect();
        let b: Vec<Vec<f64>> = (0..5000).map(|_| vec![mu2 + s2 * normal(&mut rng)]).collect();
        let d = fid(&a, &b).unwrap();
        let expected = (mu1 - mu2).powi(2) + (s1 - s2).powi(2);
        assert!(
            (d - expected).abs() / expected < 0.02,
            "fid {d} vs analytic {expected}"
        );
    }

    #[test]
    fn fid_symmetry_and_nonnegativity() {
        let mut rng = StdRng::seed_from_u64(23);
        let a: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| rng.gen_range(-0.5..1.5)).collect())
            .collect();
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab >= 0.0);
    }

    #[test]
    fn embedding_components_orthonormal() {
        let mut rng = StdRng::seed_from_u64(31);
        let features: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let model = EmbeddingModel::fit(&features, 8).unwrap();
        assert_eq!(model.k(), 8);
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = model.pca.components[i]
                    .iter()
                    .zip(model.pca.components[j].iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-5, "components {i},{j}: {dot}");
            }
        }
    }
}

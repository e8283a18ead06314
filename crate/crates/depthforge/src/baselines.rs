//! Reference generators for the comparison columns: a per-class KDE sampler
//! (stored images + Gaussian pixel noise) and a per-class PCA+GMM sampler
//! fit by EM in the reduced space.

use crate::dataio::{DepthImage, EmotionLabel, ALL_LABELS, NUM_CLASSES};
use crate::derive_seed;
use crate::linalg::{pca_fit, PcaBasis};
use crate::{Error, Result};
use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// KDE pixel-noise bandwidth as a fraction of the dynamic range.
    pub kde_bandwidth: f64,
    /// GMM mixture components per class.
    pub gmm_components: usize,
    /// PCA dimensionality for the GMM.
    pub gmm_pca_dim: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kde_bandwidth: 0.05,
            gmm_components: 10,
            gmm_pca_dim: 32,
        }
    }
}

/// Kernel-density sampler: stored training images plus per-pixel N(0, h²).
pub struct KdeSampler {
    per_class: Vec<Vec<DepthImage>>,
    pub bandwidth: f64,
}

impl KdeSampler {
    pub fn fit(images: &[(DepthImage, EmotionLabel)], bandwidth: f64) -> Result<KdeSampler> {
        if bandwidth < 0.0 {
            return Err(Error::config("baselines.kde_bandwidth", "must be >= 0"));
        }
        let mut per_class: Vec<Vec<DepthImage>> = (0..NUM_CLASSES).map(|_| Vec::new()).collect();
        for (img, label) in images {
            per_class[label.index()].push(img.clone());
        }
        Ok(KdeSampler {
            per_class,
            bandwidth,
        })
    }

    /// Draws `n` smoothed copies of class `y` training images.
    pub fn sample(&self, y: EmotionLabel, n: usize, seed: u64) -> Result<Vec<DepthImage>> {
        let pool = &self.per_class[y.index()];
        if pool.is_empty() {
            return Err(Error::Data(format!("kde sampler: class `{y}` has no training images")));
        }
        let h = self.bandwidth;
        Ok((0..n)
            .map(|draw| {
                let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0x4DE0 ^ (draw as u64) << 8));
                let src = &pool[rng.gen_range(0..pool.len())];
                let pixels: Vec<f32> = src
                    .pixels
                    .iter()
                    .map(|&p| {
                        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * h;
                        (p as f64 + noise).clamp(0.0, 1.0) as f32
                    })
                    .collect();
                DepthImage {
                    width: src.width,
                    height: src.height,
                    pixels,
                    source_bit_depth: 8,
                }
            })
            .collect())
    }
}

/// Diagonal-covariance Gaussian mixture in a per-class PCA space.
#[derive(Debug, Clone)]
pub struct ClassGmm {
    pub pca: PcaBasis,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Log-likelihood after each EM iteration.
    pub ll_history: Vec<f64>,
}

pub struct GmmSampler {
    per_class: Vec<ClassGmm>,
    width: usize,
    height: usize,
}

const VAR_FLOOR: f64 = 1e-8;

/// Fits one class's mixture by EM until the log-likelihood gain drops below
/// 1e-4 or 200 iterations pass. Degenerate component variances are floored.
pub fn gmm_fit_class(images: &[&DepthImage], k: usize, pca_dim: usize, seed: u64) -> Result<ClassGmm> {
    let n = images.len();
    if n < k {
        return Err(Error::Data(format!("gmm fit needs >= {k} images, got {n}")));
    }
    let vectors: Vec<Vec<f64>> = images
        .iter()
        .map(|img| img.pixels.iter().map(|&p| p as f64).collect())
        .collect();
    let pca = pca_fit(&vectors, pca_dim)?;
    let coords: Vec<Vec<f64>> = vectors.iter().map(|v| pca.project(v)).collect();
    let d = pca.k();

    // Init: k distinct data points as means, global per-dim variance.
    let mut rng = StdRng::seed_from_u64(seed);
    let mut pick: Vec<usize> = (0..n).collect();
    pick.shuffle(&mut rng);
    let mut means: Vec<Vec<f64>> = pick[..k].iter().map(|&i| coords[i].clone()).collect();
    let global_mean: Vec<f64> = (0..d)
        .map(|j| coords.iter().map(|c| c[j]).sum::<f64>() / n as f64)
        .collect();
    let global_var: Vec<f64> = (0..d)
        .map(|j| {
            coords
                .iter()
                .map(|c| (c[j] - global_mean[j]).powi(2))
                .sum::<f64>()
                / n as f64
        })
        .map(|v| v.max(VAR_FLOOR))
        .collect();
    let mut variances: Vec<Vec<f64>> = vec![global_var.clone(); k];
    let mut weights = vec![1.0 / k as f64; k];

    let log_gauss = |x: &[f64], mean: &[f64], var: &[f64]| -> f64 {
        let mut acc = 0.0;
        for j in 0..d {
            let diff = x[j] - mean[j];
            acc += -0.5 * ((2.0 * std::f64::consts::PI * var[j]).ln() + diff * diff / var[j]);
        }
        acc
    };

    let mut ll_history = Vec::new();
    let mut resp = vec![vec![0.0f64; k]; n];
    for _iter in 0..200 {
        // E-step with log-sum-exp.
        let mut ll = 0.0f64;
        for (i, x) in coords.iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|c| weights[c].max(1e-300).ln() + log_gauss(x, &means[c], &variances[c]))
                .collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logs.iter().map(|l| (l - m).exp()).sum();
            ll += m + sum.ln();
            for c in 0..k {
                resp[i][c] = (logs[c] - m).exp() / sum;
            }
        }
        // M-step.
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            if nk < 1e-10 {
                // Degenerate component: re-center on a random point.
                let i = rng.gen_range(0..n);
                means[c] = coords[i].clone();
                variances[c] = global_var.clone();
                weights[c] = 1e-6;
                continue;
            }
            weights[c] = nk / n as f64;
            for j in 0..d {
                means[c][j] = coords.iter().zip(resp.iter()).map(|(x, r)| r[c] * x[j]).sum::<f64>() / nk;
            }
            for j in 0..d {
                let v = coords
                    .iter()
                    .zip(resp.iter())
                    .map(|(x, r)| r[c] * (x[j] - means[c][j]).powi(2))
                    .sum::<f64>()
                    / nk;
                variances[c][j] = v.max(VAR_FLOOR);
            }
        }
        let wsum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= wsum;
        }

        let done = ll_history
            .last()
            .map(|&prev: &f64| (ll - prev).abs() < 1e-4)
            .unwrap_or(false);
        ll_history.push(ll);
        if done {
            break;
        }
    }

    Ok(ClassGmm {
        pca,
        weights,
        means,
        variances,
        ll_history,
    })
}

impl GmmSampler {
    pub fn fit(images: &[(DepthImage, EmotionLabel)], config: &BaselineConfig, seed: u64) -> Result<GmmSampler> {
        let (width, height) = images
            .first()
            .map(|(i, _)| (i.width, i.height))
            .ok_or_else(|| Error::Data("gmm fit: empty image set".to_string()))?;
        let mut per_class = Vec::with_capacity(NUM_CLASSES);
        for label in ALL_LABELS {
            let class_images: Vec<&DepthImage> = images
                .iter()
                .filter(|(_, l)| *l == label)
                .map(|(i, _)| i)
                .collect();
            per_class.push(gmm_fit_class(
                &class_images,
                config.gmm_components,
                config.gmm_pca_dim,
                derive_seed(seed, 0x93 ^ ((label.index() as u64) << 32)),
            )?);
        }
        Ok(GmmSampler {
            per_class,
            width,
            height,
        })
    }

    pub fn class_model(&self, y: EmotionLabel) -> &ClassGmm {
        &self.per_class[y.index()]
    }

    /// Draws component by weight, samples the diagonal Gaussian in PCA
    /// space, inverse-projects and clamps to [0,1].
    pub fn sample(&self, y: EmotionLabel, n: usize, seed: u64) -> Result<Vec<DepthImage>> {
        let gmm = &self.per_class[y.index()];
        let cum: Vec<f64> = gmm
            .weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        Ok((0..n)
            .map(|draw| {
                let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0x69333 ^ (draw as u64) << 8));
                let u: f64 = rng.gen_range(0.0..1.0);
                let c = cum.iter().position(|&acc| u <= acc).unwrap_or(cum.len() - 1);
                let coords: Vec<f64> = gmm.means[c]
                    .iter()
                    .zip(gmm.variances[c].iter())
                    .map(|(&m, &v)| m + rng.sample::<f64, _>(StandardNormal) * v.sqrt())
                    .collect();
                let recon = gmm.pca.reconstruct(&coords);
                let pixels: Vec<f32> = recon.iter().map(|&p| p.clamp(0.0, 1.0) as f32).collect();
                DepthImage {
                    width: self.width,
                    height: self.height,
                    pixels,
                    source_bit_depth: 8,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::fixture_face;

    fn class_set(n: usize, label: EmotionLabel, seed: u64) -> Vec<(DepthImage, EmotionLabel)> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n).map(|_| (fixture_face(label, 32, &mut rng, 0.01), label)).collect()
    }

    fn full_set(n_per_class: usize, seed: u64) -> Vec<(DepthImage, EmotionLabel)> {
        let mut out = Vec::new();
        for label in ALL_LABELS {
            out.extend(class_set(n_per_class, label, seed + label.index() as u64));
        }
        out
    }

    #[test]
    fn kde_zero_bandwidth_copies_training_images() {
        let set = full_set(4, 3);
        let sampler = KdeSampler::fit(&set, 0.0).unwrap();
        let samples = sampler.sample(EmotionLabel::Happy, 10, 1).unwrap();
        let pool: Vec<&DepthImage> = set
            .iter()
            .filter(|(_, l)| *l == EmotionLabel::Happy)
            .map(|(i, _)| i)
            .collect();
        for s in &samples {
            assert!(
                pool.iter().any(|p| p.pixels == s.pixels),
                "sample must be an exact training copy at h=0"
            );
        }
    }

    #[test]
    fn kde_sample_mean_tracks_training_mean() {
        let set = class_set(3, EmotionLabel::Neutral, 5)
            .into_iter()
            .collect::<Vec<_>>();
        let sampler = KdeSampler::fit(&set, 0.05).unwrap();
        let samples = sampler.sample(EmotionLabel::Neutral, 1000, 2).unwrap();
        let n_px = 32 * 32;
        let mut train_mean = vec![0.0f64; n_px];
        for (img, _) in &set {
            for (m, &p) in train_mean.iter_mut().zip(img.pixels.iter()) {
                *m += p as f64 / set.len() as f64;
            }
        }
        let mut sample_mean = vec![0.0f64; n_px];
        for img in &samples {
            for (m, &p) in sample_mean.iter_mut().zip(img.pixels.iter()) {
                *m += p as f64 / samples.len() as f64;
            }
        }
        // Per-pixel spread: image choice (3 images) dominates; allow a loose
        // 3σ/√n band driven by the inter-image variance plus noise.
        let mut worst = 0.0f64;
        for (a, b) in sample_mean.iter().zip(train_mean.iter()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 0.06, "max per-pixel mean deviation {worst}");
    }

    #[test]
    fn kde_sampling_is_seeded() {
        let set = full_set(3, 7);
        let sampler = KdeSampler::fit(&set, 0.05).unwrap();
        let a = sampler.sample(EmotionLabel::Fear, 5, 3).unwrap();
        let b = sampler.sample(EmotionLabel::Fear, 5, 3).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.pixels, y.pixels);
        }
        let c = sampler.sample(EmotionLabel::Fear, 5, 4).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x.pixels != y.pixels));
    }

    #[test]
    fn kde_empty_class_rejected() {
        let set = class_set(3, EmotionLabel::Neutral, 1);
        let sampler = KdeSampler::fit(&set, 0.05).unwrap();
        assert!(sampler.sample(EmotionLabel::Fear, 1, 0).is_err());
    }

    #[test]
    fn gmm_k1_mean_matches_data_mean() {
        let set = class_set(12, EmotionLabel::Happy, 9);
        let images: Vec<&DepthImage> = set.iter().map(|(i, _)| i).collect();
        let gmm = gmm_fit_class(&images, 1, 8, 4).unwrap();
        // With one component the mean is the PCA-space data mean; the PCA
        // projection of centered data has mean 0.
        for &m in &gmm.means[0] {
            assert!(m.abs() < 1e-8, "component mean {m} should be ~0 in PCA space");
        }
    }

    #[test]
    fn gmm_log_likelihood_monotone() {
        let set = class_set(30, EmotionLabel::Fear, 13);
        let images: Vec<&DepthImage> = set.iter().map(|(i, _)| i).collect();
        let gmm = gmm_fit_class(&images, 4, 8, 11).unwrap();
        assert!(gmm.ll_history.len() >= 2);
        for w in gmm.ll_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "LL decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn gmm_samples_lie_in_pca_span_and_range() {
        // Compress pixels into [0.3, 0.7] so the clamp never fires and the
        // affine-span property is observable.
        let set: Vec<(DepthImage, EmotionLabel)> = full_set(20, 21)
            .into_iter()
            .map(|(img, l)| {
                let pixels = img.pixels.iter().map(|&p| 0.3 + 0.4 * p).collect();
                (
                    DepthImage {
                        width: img.width,
                        height: img.height,
                        pixels,
                        source_bit_depth: 8,
                    },
                    l,
                )
            })
            .collect();
        let config = BaselineConfig {
            gmm_components: 3,
            gmm_pca_dim: 8,
            ..Default::default()
        };
        let sampler = GmmSampler::fit(&set, &config, 17).unwrap();
        let samples = sampler.sample(EmotionLabel::Neutral, 20, 5).unwrap();
        let gmm = sampler.class_model(EmotionLabel::Neutral);
        for img in &samples {
            assert!(img.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
            // Residual after re-projection onto the PCA span is tiny
            // (clamping is inactive for these fixtures).
            let v: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
            let coords = gmm.pca.project(&v);
            let recon = gmm.pca.reconstruct(&coords);
            let mut residual = 0.0f64;
            for (a, b) in v.iter().zip(recon.iter()) {
                residual += (a - b) * (a - b);
            }
            assert!(residual.sqrt() < 1e-5, "L2 residual {}", residual.sqrt());
        }
    }

    #[test]
    fn gmm_needs_enough_images() {
        let set = class_set(3, EmotionLabel::Happy, 2);
        let images: Vec<&DepthImage> = set.iter().map(|(i, _)| i).collect();
        assert!(gmm_fit_class(&images, 10, 8, 0).is_err());
    }
}

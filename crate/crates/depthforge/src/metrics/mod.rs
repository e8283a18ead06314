//! Synthetic-data quality metrics: SSIM, PSNR, Fréchet distance over a PCA
//! feature embedding (the FID stand-in), and an inception-score proxy from a
//! gradient-boosted probability model.

mod frechet;
mod inception;
mod ssim;

pub use frechet::{fid, frechet_gaussian, gaussian_stats, EmbeddingModel};
pub use inception::{inception_score_from_probs, inception_score_proxy, ClassProbModel};
pub use ssim::{psnr, ssim, ssim_prepped, SsimConfig, SsimPrep, PSNR_CAP_DB};

use crate::classify::{gbt_train, GbtParams, LabeledFeatures};
use crate::dataio::{DepthImage, EmotionLabel, ALL_LABELS};
use crate::features::{fuse, FeatureConfig};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// PCA components of the feature embedding.
    pub embedding_k: usize,
    pub is_splits: usize,
    /// Boosting rounds for the probability model behind the IS proxy.
    pub prob_model_rounds: usize,
    pub ssim: SsimConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            embedding_k: 64,
            is_splits: 10,
            prob_model_rounds: 60,
            ssim: SsimConfig::default(),
        }
    }
}

/// The full quality report written to `metrics.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub ssim_mean: f64,
    pub psnr_db_mean: f64,
    pub n_real: usize,
    pub n_synth: usize,
    pub embedding_k: usize,
    /// Pairing strategy used for SSIM/PSNR.
    pub pairing: String,
}

/// Computes all four metrics for a synthetic set against a real set.
///
/// The embedding (PCA over fused features) and the probability model are fit
/// on the real set only. SSIM/PSNR are averaged over nearest-real-neighbor
/// pairs per synthetic image (same class, neighbor found by SSIM search).
pub fn evaluate_sets(
    real: &[(DepthImage, EmotionLabel)],
    synth: &[(DepthImage, EmotionLabel)],
    feature_config: &FeatureConfig,
    config: &MetricsConfig,
) -> Result<MetricReport> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Data("evaluate_sets: empty image set".to_string()));
    }
    for label in ALL_LABELS {
        let in_real = real.iter().any(|(_, l)| *l == label);
        let in_synth = synth.iter().any(|(_, l)| *l == label);
        if in_real != in_synth {
            return Err(Error::Data(format!(
                "class `{label}` present in only one of the sets"
            )));
        }
    }

    // Fused features for both sets (order-preserving parallel map).
    let real_features: Vec<Vec<f32>> = real
        .par_iter()
        .map(|(img, _)| fuse(img, feature_config).map(|f| f.values))
        .collect::<Result<_>>()?;
    let synth_features: Vec<Vec<f32>> = synth
        .par_iter()
        .map(|(img, _)| fuse(img, feature_config).map(|f| f.values))
        .collect::<Result<_>>()?;

    // FID over the PCA embedding fit on real features.
    let to_f64 = |rows: &[Vec<f32>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    };
    let real_f64 = to_f64(&real_features);
    let synth_f64 = to_f64(&synth_features);
    let embedding = EmbeddingModel::fit(&real_f64, config.embedding_k)?;
    let fid_value = fid(&embedding.embed_all(&real_f64), &embedding.embed_all(&synth_f64))?;

    // IS proxy from a boosted probability model trained on real features.
    let real_labels: Vec<EmotionLabel> = real.iter().map(|(_, l)| *l).collect();
    let labeled = LabeledFeatures::from_rows(&real_features, real_labels)?;
    let prob_model = gbt_train(
        &labeled,
        GbtParams {
            rounds: config.prob_model_rounds,
            ..Default::default()
        },
    )?;
    let (is_mean, is_std) = inception_score_proxy(&synth_features, &prob_model, config.is_splits)?;

    // SSIM/PSNR against the nearest real neighbor of the same class.
    let real_preps: Vec<SsimPrep> = real
        .par_iter()
        .map(|(img, _)| SsimPrep::new(img, &config.ssim))
        .collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = synth
        .par_iter()
        .map(|(img, label)| -> Result<(f64, f64)> {
            let prep = SsimPrep::new(img, &config.ssim)?;
            let mut best_ssim = f64::NEG_INFINITY;
            let mut best_idx = usize::MAX;
            for (ri, (rimg, rlabel)) in real.iter().enumerate() {
                if rlabel != label {
                    continue;
                }
                let s = ssim_prepped(img, &prep, rimg, &real_preps[ri], &config.ssim)?;
                if s > best_ssim {
                    best_ssim = s;
                    best_idx = ri;
                }
            }
            if best_idx == usize::MAX {
                return Err(Error::Data(format!("no real image of class `{label}` to pair with")));
            }
            let p = psnr(img, &real[best_idx].0, config.ssim.l)?;
            Ok((best_ssim, p))
        })
        .collect::<Result<_>>()?;
    let ssim_mean = pairs.iter().map(|(s, _)| s).sum::<f64>() / pairs.len() as f64;
    let psnr_mean = pairs.iter().map(|(_, p)| p).sum::<f64>() / pairs.len() as f64;

    Ok(MetricReport {
        fid: fid_value,
        is_mean,
        is_std,
        ssim_mean,
        psnr_db_mean: psnr_mean,
        n_real: real.len(),
        n_synth: synth.len(),
        embedding_k: embedding.k(),
        pairing: "nearest-real-same-class-by-ssim".to_string(),
    })
}

pub fn write_metrics_json(path: &std::path::Path, report: &MetricReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{fixture_face, EmotionLabel};
    use rand::prelude::*;

    fn small_fixture_set(n_per_class: usize, seed: u64) -> Vec<(DepthImage, EmotionLabel)> {
        let mut out = Vec::new();
        for label in ALL_LABELS {
            let mut rng = StdRng::seed_from_u64(seed + label.index() as u64);
            for _ in 0..n_per_class {
                out.push((fixture_face(label, 32, &mut rng, 0.01), label));
            }
        }
        out
    }

    #[test]
    fn identical_sets_report_perfect_scores() {
        let set = small_fixture_set(8, 5);
        let cfg = MetricsConfig {
            embedding_k: 8,
            is_splits: 4,
            prob_model_rounds: 10,
            ..Default::default()
        };
        let fc = FeatureConfig {
            hog_cell: 8,
            ..Default::default()
        };
        let report = evaluate_sets(&set, &set, &fc, &cfg).unwrap();
        assert!(report.fid < 1e-6, "fid = {}", report.fid);
        assert!((report.ssim_mean - 1.0).abs() < 1e-9);
        assert_eq!(report.psnr_db_mean, PSNR_CAP_DB);
        assert_eq!(report.embedding_k, 8);
        assert_eq!(report.pairing, "nearest-real-same-class-by-ssim");
        assert!(report.is_mean >= 1.0);
    }

    #[test]
    fn pure_noise_scores_worse_than_similar_set() {
        let real = small_fixture_set(10, 5);
        let similar = small_fixture_set(10, 99);
        let mut rng = StdRng::seed_from_u64(1);
        let noise: Vec<(DepthImage, EmotionLabel)> = real
            .iter()
            .map(|(_, l)| {
                let pixels: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
                (DepthImage::new(32, 32, pixels, 8).unwrap(), *l)
            })
            .collect();
        let cfg = MetricsConfig {
            embedding_k: 8,
            is_splits: 5,
            prob_model_rounds: 10,
            ..Default::default()
        };
        let fc = FeatureConfig::default();
        let r_similar = evaluate_sets(&real, &similar, &fc, &cfg).unwrap();
        let r_noise = evaluate_sets(&real, &noise, &fc, &cfg).unwrap();
        assert!(
            r_noise.fid > r_similar.fid,
            "noise fid {} should exceed similar fid {}",
            r_noise.fid,
            r_similar.fid
        );
        assert!(r_noise.ssim_mean < r_similar.ssim_mean);
    }

    #[test]
    fn class_missing_from_synth_rejected() {
        let real = small_fixture_set(4, 5);
        let synth: Vec<_> = real
            .iter()
            .filter(|(_, l)| *l != EmotionLabel::Fear)
            .cloned()
            .collect();
        let err = evaluate_sets(&real, &synth, &FeatureConfig::default(), &MetricsConfig::default());
        assert!(err.is_err());
    }
}

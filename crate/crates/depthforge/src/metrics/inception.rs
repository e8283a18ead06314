//! Inception-score proxy: exp of the mean KL divergence between per-sample
//! class posteriors and the split's marginal, from any probability model.

use crate::dataio::NUM_CLASSES;
use crate::{Error, Result};

/// Anything that yields class posteriors for a feature vector.
pub trait ClassProbModel: Sync {
    fn class_probs(&self, features: &[f32]) -> [f64; NUM_CLASSES];
}

impl ClassProbModel for crate::classify::GbtModel {
    fn class_probs(&self, features: &[f32]) -> [f64; NUM_CLASSES] {
        crate::classify::GbtModel::class_probs(self, features)
    }
}

/// Core computation on a precomputed probability matrix.
pub fn inception_score_from_probs(probs: &[[f64; NUM_CLASSES]], splits: usize) -> Result<(f64, f64)> {
    let n = probs.len();
    if splits == 0 || n < splits {
        return Err(Error::Data(format!(
            "inception score needs >= {splits} samples for {splits} splits, got {n}"
        )));
    }
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let lo = s * n / splits;
        let hi = (s + 1) * n / splits;
        let chunk = &probs[lo..hi];
        if chunk.is_empty() {
            return Err(Error::Data("degenerate split size".to_string()));
        }
        let mut marginal = [0.0f64; NUM_CLASSES];
        for p in chunk {
            for c in 0..NUM_CLASSES {
                marginal[c] += p[c];
            }
        }
        for m in marginal.iter_mut() {
            *m /= chunk.len() as f64;
        }
        let mean_kl: f64 = chunk
            .iter()
            .map(|p| {
                let mut kl = 0.0;
                for c in 0..NUM_CLASSES {
                    if p[c] > 0.0 && marginal[c] > 0.0 {
                        kl += p[c] * (p[c] / marginal[c]).ln();
                    }
                }
                kl
            })
            .sum::<f64>()
            / chunk.len() as f64;
        scores.push(mean_kl.exp());
    }
    let mean: f64 = scores.iter().sum::<f64>() / splits as f64;
    let var: f64 = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Scores a synthetic feature set under a probability model trained on real
/// data; reports mean ± std over `splits` contiguous splits.
pub fn inception_score_proxy(
    synth_features: &[Vec<f32>],
    model: &dyn ClassProbModel,
    splits: usize,
) -> Result<(f64, f64)> {
    let probs: Vec<[f64; NUM_CLASSES]> = synth_features.iter().map(|f| model.class_probs(f)).collect();
    inception_score_from_probs(&probs, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_posteriors_score_one() {
        let probs = vec![[1.0 / 3.0; NUM_CLASSES]; 30];
        let (mean, std) = inception_score_from_probs(&probs, 10).unwrap();
        assert!((mean - 1.0).abs() < 1e-9);
        assert!(std.abs() < 1e-9);
    }

    #[test]
    fn balanced_one_hot_reaches_class_count() {
        let mut probs = Vec::new();
        for i in 0..30 {
            let mut p = [0.0f64; NUM_CLASSES];
            p[i % NUM_CLASSES] = 1.0;
            probs.push(p);
        }
        let (mean, _) = inception_score_from_probs(&probs, 10).unwrap();
        assert!((mean - NUM_CLASSES as f64).abs() < 1e-6, "IS = {mean}");
    }

    #[test]
    fn score_stays_within_bounds() {
        use rand::prelude::*;
        let mut rng = StdRng::seed_from_u64(6);
        let probs: Vec<[f64; NUM_CLASSES]> = (0..100)
            .map(|_| {
                let mut p = [0.0f64; NUM_CLASSES];
                let mut sum = 0.0;
                for v in p.iter_mut() {
                    *v = rng.gen_range(0.01..1.0);
                    sum += *v;
                }
                for v in p.iter_mut() {
                    *v /= sum;
                }
                p
            })
            .collect();
        let (mean, _) = inception_score_from_probs(&probs, 10).unwrap();
        assert!((1.0..=NUM_CLASSES as f64 + 1e-9).contains(&mean), "IS = {mean}");
    }

    #[test]
    fn too_few_samples_rejected() {
        let probs = vec![[1.0 / 3.0; NUM_CLASSES]; 5];
        assert!(inception_score_from_probs(&probs, 10).is_err());
    }
}

//! Run configuration: a JSON document with per-subsystem sections. Unknown
//! keys are rejected; missing keys fall back to defaults and are reported.

use crate::baselines::BaselineConfig;
use crate::distill::KdConfig;
use crate::features::FeatureConfig;
use crate::ga::{FitnessWeights, GaConfig};
use crate::gan::GanConfig;
use crate::metrics::MetricsConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestOn {
    Real,
    Synthetic,
}

impl std::fmt::Display for TestOn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TestOn::Real => "real",
            TestOn::Synthetic => "synthetic",
        })
    }
}

/// Fixture/dataset section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataioSettings {
    pub n_per_class: usize,
    pub image_size: usize,
    pub noise_amplitude: f64,
}

impl Default for DataioSettings {
    fn default() -> Self {
        DataioSettings {
            n_per_class: 400,
            image_size: 64,
            noise_amplitude: 0.005,
        }
    }
}

/// GA section: algorithm parameters plus fitness weights and the size of the
/// evolved latent bank (which doubles as the synthetic count per class for
/// every generation method).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaSettings {
    pub pop_size: usize,
    pub generations: usize,
    pub p_crossover: f64,
    pub p_mutation: f64,
    pub tournament_k: usize,
    pub elitism: usize,
    pub mutation_sigma: f64,
    pub per_gene_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_outputs_per_class: usize,
}

impl Default for GaSettings {
    fn default() -> Self {
        let ga = GaConfig::default();
        GaSettings {
            pop_size: ga.pop_size,
            generations: ga.generations,
            p_crossover: ga.p_crossover,
            p_mutation: ga.p_mutation,
            tournament_k: ga.tournament_k,
            elitism: ga.elitism,
            mutation_sigma: ga.mutation_sigma,
            per_gene_rate: ga.per_gene_rate,
            alpha: 1.0,
            beta: 1.0,
            n_outputs_per_class: 400,
        }
    }
}

impl GaSettings {
    pub fn ga_config(&self, seed: u64) -> GaConfig {
        GaConfig {
            pop_size: self.pop_size,
            generations: self.generations,
            p_crossover: self.p_crossover,
            p_mutation: self.p_mutation,
            tournament_k: self.tournament_k,
            elitism: self.elitism,
            mutation_sigma: self.mutation_sigma,
            per_gene_rate: self.per_gene_rate,
            seed,
        }
    }

    pub fn weights(&self) -> FitnessWeights {
        FitnessWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifySettings {
    pub rf_trees: usize,
    pub dt_max_depth: usize,
    pub dt_min_leaf: usize,
    pub gbt_rounds: usize,
    pub gbt_lr: f64,
    pub gbt_max_depth: usize,
    pub split_ratio: f64,
    pub test_on: TestOn,
    pub repeats: usize,
}

impl Default for ClassifySettings {
    fn default() -> Self {
        ClassifySettings {
            rf_trees: 100,
            dt_max_depth: 12,
            dt_min_leaf: 2,
            gbt_rounds: 200,
            gbt_lr: 0.1,
            gbt_max_depth: 4,
            split_ratio: 0.8,
            test_on: TestOn::Real,
            repeats: 1,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataio: DataioSettings,
    pub gan: GanConfig,
    pub kd: KdConfig,
    pub ga: GaSettings,
    pub features: FeatureConfig,
    pub classify: ClassifySettings,
    pub metrics: MetricsConfig,
    pub baselines: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            dataio: DataioSettings::default(),
            gan: GanConfig::default(),
            kd: KdConfig::default(),
            ga: GaSettings::default(),
            features: FeatureConfig::default(),
            classify: ClassifySettings::default(),
            metrics: MetricsConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        self.kd.validate()?;
        self.ga.ga_config(self.seed).validate()?;
        self.features.validate(self.gan.image_size)?;
        if self.dataio.n_per_class < 1 {
            return Err(Error::config("dataio.n_per_class", "must be >= 1"));
        }
        if self.dataio.image_size < 8 {
            return Err(Error::config("dataio.image_size", "must be >= 8"));
        }
        if !(self.classify.split_ratio > 0.0 && self.classify.split_ratio < 1.0) {
            return Err(Error::config(
                "classify.split_ratio",
                format!("must be in (0,1), got {}", self.classify.split_ratio),
            ));
        }
        if self.classify.repeats < 1 {
            return Err(Error::config("classify.repeats", "must be >= 1"));
        }
        if self.classify.rf_trees < 1 {
            return Err(Error::config("classify.rf_trees", "must be >= 1"));
        }
        if self.metrics.embedding_k < 1 {
            return Err(Error::config("metrics.embedding_k", "must be >= 1"));
        }
        if self.metrics.is_splits < 1 {
            return Err(Error::config("metrics.is_splits", "must be >= 1"));
        }
        if self.baselines.kde_bandwidth < 0.0 {
            return Err(Error::config("baselines.kde_bandwidth", "must be >= 0"));
        }
        if self.baselines.gmm_components < 1 {
            return Err(Error::config("baselines.gmm_components", "must be >= 1"));
        }
        if self.ga.n_outputs_per_class < 1 {
            return Err(Error::config("ga.n_outputs_per_class", "must be >= 1"));
        }
        Ok(())
    }

    /// Writes the resolved config echo.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join("config_resolved.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

// ---- Partial (file-level) representation: every key optional, unknown ----
// ---- keys rejected.                                                   ----

macro_rules! partial {
    ($name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct $name {
            $( $field: Option<$ty>, )*
        }
    };
}

partial!(PDataio { n_per_class: usize, image_size: usize, noise_amplitude: f64 });
partial!(PGan {
    latent_dim: usize,
    image_size: usize,
    base_channels: usize,
    batch_size: usize,
    epochs: usize,
    lr_g: f64,
    lr_d: f64,
});
partial!(PKd { tau: f64, lambda_kd_g: f64, lambda_kd_d: f64 });
partial!(PGa {
    pop_size: usize,
    generations: usize,
    p_crossover: f64,
    p_mutation: f64,
    tournament_k: usize,
    elitism: usize,
    mutation_sigma: f64,
    per_gene_rate: f64,
    alpha: f64,
    beta: f64,
    n_outputs_per_class: usize,
});
partial!(PFeatures {
    hog_cell: usize,
    hog_bins: usize,
    hog_block: usize,
    lbp_points: usize,
    lbp_radius: f64,
    sobel_bins: usize,
    intensity_bins: usize,
});
partial!(PClassify {
    rf_trees: usize,
    dt_max_depth: usize,
    dt_min_leaf: usize,
    gbt_rounds: usize,
    gbt_lr: f64,
    gbt_max_depth: usize,
    split_ratio: f64,
    test_on: TestOn,
    repeats: usize,
});
partial!(PMetrics { embedding_k: usize, is_splits: usize, prob_model_rounds: usize });
partial!(PBaselines { kde_bandwidth: f64, gmm_components: usize, gmm_pca_dim: usize });

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialRunConfig {
    seed: Option<u64>,
    dataio: Option<PDataio>,
    gan: Option<PGan>,
    kd: Option<PKd>,
    ga: Option<PGa>,
    features: Option<PFeatures>,
    classify: Option<PClassify>,
    metrics: Option<PMetrics>,
    baselines: Option<PBaselines>,
}

fn fill<T>(slot: &mut T, value: Option<T>, path: &str, missing: &mut Vec<String>) {
    match value {
        Some(v) => *slot = v,
        None => missing.push(path.to_string()),
    }
}

/// Parses and validates a config file. Returns the resolved config plus the
/// list of keys that were filled from defaults.
pub fn parse_config(path: &Path) -> Result<(RunConfig, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let partial: PartialRunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    let (config, missing) = resolve(partial);
    config.validate()?;
    Ok((config, missing))
}

fn resolve(p: PartialRunConfig) -> (RunConfig, Vec<String>) {
    let mut cfg = RunConfig::default();
    let mut missing = Vec::new();
    let m = &mut missing;

    fill(&mut cfg.seed, p.seed, "seed", m);

    let d = p.dataio.unwrap_or_else(|| {
        m.push("dataio".to_string());
        PDataio::default()
    });
    fill(&mut cfg.dataio.n_per_class, d.n_per_class, "dataio.n_per_class", m);
    fill(&mut cfg.dataio.image_size, d.image_size, "dataio.image_size", m);
    fill(&mut cfg.dataio.noise_amplitude, d.noise_amplitude, "dataio.noise_amplitude", m);

    let g = p.gan.unwrap_or_else(|| {
        m.push("gan".to_string());
        PGan::default()
    });
    fill(&mut cfg.gan.latent_dim, g.latent_dim, "gan.latent_dim", m);
    fill(&mut cfg.gan.image_size, g.image_size, "gan.image_size", m);
    fill(&mut cfg.gan.base_channels, g.base_channels, "gan.base_channels", m);
    fill(&mut cfg.gan.batch_size, g.batch_size, "gan.batch_size", m);
    fill(&mut cfg.gan.epochs, g.epochs, "gan.epochs", m);
    fill(&mut cfg.gan.lr_g, g.lr_g, "gan.lr_g", m);
    fill(&mut cfg.gan.lr_d, g.lr_d, "gan.lr_d", m);

    let k = p.kd.unwrap_or_else(|| {
        m.push("kd".to_string());
        PKd::default()
    });
    fill(&mut cfg.kd.tau, k.tau, "kd.tau", m);
    fill(&mut cfg.kd.lambda_kd_g, k.lambda_kd_g, "kd.lambda_kd_g", m);
    fill(&mut cfg.kd.lambda_kd_d, k.lambda_kd_d, "kd.lambda_kd_d", m);

    let ga = p.ga.unwrap_or_else(|| {
        m.push("ga".to_string());
        PGa::default()
    });
    fill(&mut cfg.ga.pop_size, ga.pop_size, "ga.pop_size", m);
    fill(&mut cfg.ga.generations, ga.generations, "ga.generations", m);
    fill(&mut cfg.ga.p_crossover, ga.p_crossover, "ga.p_crossover", m);
    fill(&mut cfg.ga.p_mutation, ga.p_mutation, "ga.p_mutation", m);
    fill(&mut cfg.ga.tournament_k, ga.tournament_k, "ga.tournament_k", m);
    fill(&mut cfg.ga.elitism, ga.elitism, "ga.elitism", m);
    fill(&mut cfg.ga.mutation_sigma, ga.mutation_sigma, "ga.mutation_sigma", m);
    fill(&mut cfg.ga.per_gene_rate, ga.per_gene_rate, "ga.per_gene_rate", m);
    fill(&mut cfg.ga.alpha, ga.alpha, "ga.alpha", m);
    fill(&mut cfg.ga.beta, ga.beta, "ga.beta", m);
    fill(
        &mut cfg.ga.n_outputs_per_class,
        ga.n_outputs_per_class,
        "ga.n_outputs_per_class",
        m,
    );

    let f = p.features.unwrap_or_else(|| {
        m.push("features".to_string());
        PFeatures::default()
    });
    fill(&mut cfg.features.hog_cell, f.hog_cell, "features.hog_cell", m);
    fill(&mut cfg.features.hog_bins, f.hog_bins, "features.hog_bins", m);
    fill(&mut cfg.features.hog_block, f.hog_block, "features.hog_block", m);
    fill(&mut cfg.features.lbp_points, f.lbp_points, "features.lbp_points", m);
    fill(&mut cfg.features.lbp_radius, f.lbp_radius, "features.lbp_radius", m);
    fill(&mut cfg.features.sobel_bins, f.sobel_bins, "features.sobel_bins", m);
    fill(
        &mut cfg.features.intensity_bins,
        f.intensity_bins,
        "features.intensity_bins",
        m,
    );

    let c = p.classify.unwrap_or_else(|| {
        m.push("classify".to_string());
        PClassify::default()
    });
    fill(&mut cfg.classify.rf_trees, c.rf_trees, "classify.rf_trees", m);
    fill(&mut cfg.classify.dt_max_depth, c.dt_max_depth, "classify.dt_max_depth", m);
    fill(&mut cfg.classify.dt_min_leaf, c.dt_min_leaf, "classify.dt_min_leaf", m);
    fill(&mut cfg.classify.gbt_rounds, c.gbt_rounds, "classify.gbt_rounds", m);
    fill(&mut cfg.classify.gbt_lr, c.gbt_lr, "classify.gbt_lr", m);
    fill(&mut cfg.classify.gbt_max_depth, c.gbt_max_depth, "classify.gbt_max_depth", m);
    fill(&mut cfg.classify.split_ratio, c.split_ratio, "classify.split_ratio", m);
    fill(&mut cfg.classify.test_on, c.test_on, "classify.test_on", m);
    fill(&mut cfg.classify.repeats, c.repeats, "classify.repeats", m);

    let mt = p.metrics.unwrap_or_else(|| {
        m.push("metrics".to_string());
        PMetrics::default()
    });
    fill(&mut cfg.metrics.embedding_k, mt.embedding_k, "metrics.embedding_k", m);
    fill(&mut cfg.metrics.is_splits, mt.is_splits, "metrics.is_splits", m);
    fill(
        &mut cfg.metrics.prob_model_rounds,
        mt.prob_model_rounds,
        "metrics.prob_model_rounds",
        m,
    );

    let b = p.baselines.unwrap_or_else(|| {
        m.push("baselines".to_string());
        PBaselines::default()
    });
    fill(&mut cfg.baselines.kde_bandwidth, b.kde_bandwidth, "baselines.kde_bandwidth", m);
    fill(&mut cfg.baselines.gmm_components, b.gmm_components, "baselines.gmm_components", m);
    fill(&mut cfg.baselines.gmm_pca_dim, b.gmm_pca_dim, "baselines.gmm_pca_dim", m);

    // Seeds everywhere derive from the global seed.
    cfg.gan.seed = cfg.seed;
    (cfg, missing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_object_fills_all_defaults_with_warnings() {
        let (_d, path) = write_config("{}");
        let (config, missing) = parse_config(&path).unwrap();
        assert!(!missing.is_empty());
        assert!(missing.contains(&"seed".to_string()));
        assert!(missing.contains(&"gan".to_string()));
        assert_eq!(config.seed, 42);
        assert_eq!(config.gan.lr_g, 8e-5);
        assert_eq!(config.kd.tau, 0.994);
        assert_eq!(config.ga.pop_size, 20);
        assert_eq!(config.ga.generations, 100);
    }

    #[test]
    fn negative_lr_rejected_with_key_name() {
        let (_d, path) = write_config(r#"{"gan": {"lr_g": -1.0}}"#);
        let err = parse_config(&path).unwrap_err();
        assert!(format!("{err}").contains("gan.lr_g"), "{err}");
    }

    #[test]
    fn alternative_tau_accepted() {
        let (_d, path) = write_config(r#"{"kd": {"tau": 0.999}}"#);
        let (config, _) = parse_config(&path).unwrap();
        assert_eq!(config.kd.tau, 0.999);
    }

    #[test]
    fn unknown_keys_rejected() {
        let (_d, path) = write_config(r#"{"gan": {"learning_rate": 0.1}}"#);
        assert!(parse_config(&path).is_err());
        let (_d2, path2) = write_config(r#"{"unknown_section": {}}"#);
        assert!(parse_config(&path2).is_err());
    }

    #[test]
    fn malformed_json_reports_path() {
        let (_d, path) = write_config("{ not json");
        let err = parse_config(&path).unwrap_err();
        assert!(format!("{err}").contains("run.json"));
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let (_d, path) = write_config(r#"{"seed": 7, "gan": {"epochs": 3}}"#);
        let (config, missing) = parse_config(&path).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.gan.epochs, 3);
        assert_eq!(config.gan.lr_g, 8e-5);
        assert_eq!(config.gan.seed, 7);
        assert!(missing.contains(&"gan.lr_g".to_string()));
        assert!(!missing.contains(&"gan.epochs".to_string()));
    }

    #[test]
    fn resolved_echo_roundtrips() {
        let config = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        config.write_resolved(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("config_resolved.json")).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.gan.lr_g, config.gan.lr_g);
        assert_eq!(back.classify.test_on, config.classify.test_on);
    }
}

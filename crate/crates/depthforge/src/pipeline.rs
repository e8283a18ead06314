//! End-to-end orchestration: fixture → train → evolve → generate → features
//! → classify → metrics, with a uniform output directory per method.

use crate::baselines::{GmmSampler, KdeSampler};
use crate::classify::{
    dt_train, evaluate, gbt_train, kde1d, lda_project, rf_train, DtParams, EvalReport, GbtParams,
    LabeledFeatures, RfParams,
};
use crate::config::{RunConfig, TestOn};
use crate::dataio::{
    fixture_generate, load_image, save_png, split, DepthImage, EmotionLabel, FixtureConfig, Manifest,
    ALL_LABELS,
};
use crate::distill::KdConfig;
use crate::features::{fuse, FeatureConfig};
use crate::ga::{evolve_all_classes, init_population, GaConfig, Individual};
use crate::gan::{generate, load_checkpoint, train, GanCheckpoint, LatentVector};
use crate::metrics::{evaluate_sets, write_metrics_json, MetricReport};
use crate::{derive_seed, Error, Result};
use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Which generator produces the synthetic set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// KD-trained cDCGAN with GA latent evolution.
    Proposed,
    /// Plain cDCGAN ablation: KD weights zero, no GA.
    Gan,
    Gmm,
    Kde,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        match s {
            "proposed" => Ok(Method::Proposed),
            "gan" => Ok(Method::Gan),
            "gmm" => Ok(Method::Gmm),
            "kde" => Ok(Method::Kde),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Proposed => "proposed",
            Method::Gan => "gan",
            Method::Gmm => "gmm",
            Method::Kde => "kde",
        })
    }
}

/// Writes `features.csv`: header naming each segment entry, one row per
/// image (label first). Values use shortest-roundtrip formatting so the file
/// is lossless and byte-stable.
pub fn write_features_csv(
    path: &Path,
    rows: &[(Vec<f32>, EmotionLabel)],
    config: &FeatureConfig,
    image_size: usize,
) -> Result<()> {
    let mut out = String::from("label");
    let spans = [
        ("hog", config.hog_len(image_size)),
        ("lbp", config.lbp_bins()),
        ("sobel", config.sobel_bins),
        ("intensity", config.intensity_bins),
    ];
    for (name, len) in spans {
        for i in 0..len {
            out.push_str(&format!(",{name}_{i}"));
        }
    }
    out.push('\n');
    for (values, label) in rows {
        out.push_str(label.name());
        for v in values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a `features.csv` back into a labeled matrix.
pub fn read_features_csv(path: &Path) -> Result<LabeledFeatures> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path.display().to_string(), "empty features file"))?;
    let d = header.split(',').count() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = EmotionLabel::parse(fields.next().unwrap_or(""))?;
        let row: Vec<f32> = fields
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::format(path.display().to_string(), format!("line {}: bad value", lineno + 2))
            })?;
        if row.len() != d {
            return Err(Error::format(
                path.display().to_string(),
                format!("line {}: {} values, expected {d}", lineno + 2, row.len()),
            ));
        }
        values.extend_from_slice(&row);
        labels.push(label);
    }
    LabeledFeatures::new(values, d, labels)
}

/// Fused features for an image set, parallel across images.
pub fn extract_features(
    images: &[(DepthImage, EmotionLabel)],
    config: &FeatureConfig,
) -> Result<Vec<(Vec<f32>, EmotionLabel)>> {
    images
        .par_iter()
        .map(|(img, label)| fuse(img, config).map(|f| (f.values, *label)))
        .collect()
}

/// Loads a synthetic directory written by the pipeline: `<class>_<idx>.png`.
pub fn load_synth_dir(dir: &Path) -> Result<Vec<(DepthImage, EmotionLabel)>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Data(format!("no .png files in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(entries.len());
    for path in entries {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(path.display().to_string(), "bad file name"))?;
        let class = stem
            .split('_')
            .next()
            .ok_or_else(|| Error::format(path.display().to_string(), "expected <class>_<index>.png"))?;
        let label = EmotionLabel::parse(class)?;
        out.push((load_image(&path)?, label));
    }
    Ok(out)
}

/// Per-classifier evaluation plus the harness configuration echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub test_on: TestOn,
    pub n_train: usize,
    pub n_test: usize,
    pub rf: EvalReport,
    pub dt: EvalReport,
    pub gbt: EvalReport,
}

/// One classifier evaluation run over prepared train/test matrices.
fn run_classifiers(
    train: &LabeledFeatures,
    test: &LabeledFeatures,
    settings: &crate::config::ClassifySettings,
    seed: u64,
) -> Result<(EvalReport, EvalReport, EvalReport)> {
    let truth: Vec<EmotionLabel> = test.labels.clone();

    let rf = rf_train(
        train,
        RfParams {
            n_trees: settings.rf_trees,
            max_depth: settings.dt_max_depth,
            min_leaf: settings.dt_min_leaf,
            seed,
            ..Default::default()
        },
    )?;
    let rf_pred: Vec<EmotionLabel> = (0..test.n).map(|i| rf.predict(test.row(i))).collect();
    let rf_report = evaluate(&rf_pred, &truth)?;

    let dt = dt_train(
        train,
        DtParams {
            max_depth: settings.dt_max_depth,
            min_leaf: settings.dt_min_leaf,
        },
    )?;
    let dt_pred: Vec<EmotionLabel> = (0..test.n).map(|i| dt.predict(test.row(i))).collect();
    let dt_report = evaluate(&dt_pred, &truth)?;

    let gbt = gbt_train(
        train,
        GbtParams {
            rounds: settings.gbt_rounds,
            learning_rate: settings.gbt_lr,
            max_depth: settings.gbt_max_depth,
        },
    )?;
    let gbt_pred: Vec<EmotionLabel> = (0..test.n).map(|i| gbt.predict(test.row(i))).collect();
    let gbt_report = evaluate(&gbt_pred, &truth)?;

    Ok((rf_report, dt_report, gbt_report))
}

/// Stratified row split of a feature matrix (derives per-class shuffles from
/// the seed), mirroring the manifest splitter.
fn split_features(data: &LabeledFeatures, ratio: f64, seed: u64) -> (LabeledFeatures, LabeledFeatures) {
    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_labels = Vec::new();
    for label in ALL_LABELS {
        let mut idx: Vec<usize> = (0..data.n).filter(|&i| data.labels[i] == label).collect();
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0x59 ^ ((label.index() as u64) << 8)));
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * ratio).floor() as usize;
        for (pos, &i) in idx.iter().enumerate() {
            if pos < n_train {
                train_rows.extend_from_slice(data.row(i));
                train_labels.push(label);
            } else {
                test_rows.extend_from_slice(data.row(i));
                test_labels.push(label);
            }
        }
    }
    (
        LabeledFeatures::new(train_rows, data.d, train_labels).expect("rows consistent"),
        LabeledFeatures::new(test_rows, data.d, test_labels).expect("rows consistent"),
    )
}

/// The Annex-style repeats harness: writes `runs.csv` with one row per
/// (run, classifier) and returns the first run's report. In `real` mode the
/// train set is the full synthetic matrix and the test set is fixed real
/// data, so only seeded classifiers vary across runs; in `synthetic` mode
/// each run re-splits the synthetic matrix.
pub fn classify_harness(
    synth_features: &LabeledFeatures,
    real_test_features: Option<&LabeledFeatures>,
    settings: &crate::config::ClassifySettings,
    seed: u64,
    out_dir: &Path,
) -> Result<ClassifyReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let runs_path = out_dir.join("runs.csv");
    let mut runs = String::from("run,classifier,accuracy,precision,recall,f1\n");
    let mut first: Option<ClassifyReport> = None;

    for run in 0..settings.repeats {
        let run_seed = derive_seed(seed, 0xC1A5 ^ (run as u64) << 8);
        let (train, test) = match (settings.test_on, real_test_features) {
            (TestOn::Real, Some(real)) => (synth_features.clone(), real.clone()),
            (TestOn::Real, None) => {
                return Err(Error::Data(
                    "test_on=real requires real test features".to_string(),
                ))
            }
            (TestOn::Synthetic, _) => split_features(synth_features, settings.split_ratio, run_seed),
        };
        let (rf, dt, gbt) = run_classifiers(&train, &test, settings, run_seed)?;
        for (name, report) in [("rf", &rf), ("dt", &dt), ("gbt", &gbt)] {
            runs.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                run, name, report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1
            ));
        }
        if first.is_none() {
            first = Some(ClassifyReport {
                test_on: settings.test_on,
                n_train: train.n,
                n_test: test.n,
                rf,
                dt,
                gbt,
            });
        }
    }
    std::fs::write(&runs_path, runs).map_err(|e| Error::io(runs_path.display().to_string(), e))?;

    let report = first.expect("repeats >= 1 validated");
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
        path: report_path.display().to_string(),
        source: e,
    })?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(report_path.display().to_string(), e))?;
    Ok(report)
}

/// LDA → per-class KDE curves: writes `lda_kde_<class>.csv` (grid,density).
pub fn write_lda_kde(features: &LabeledFeatures, out_dir: &Path) -> Result<()> {
    let projection = lda_project(features, 1)?;
    for label in ALL_LABELS {
        let samples: Vec<f64> = (0..features.n)
            .filter(|&i| features.labels[i] == label)
            .map(|i| projection.projected[i][0])
            .collect();
        if samples.len() < 2 {
            continue;
        }
        let kde = kde1d(&samples, None)?;
        let path = out_dir.join(format!("lda_kde_{label}.csv"));
        let mut out = String::from("grid,density\n");
        for (g, d) in kde.grid.iter().zip(kde.density.iter()) {
            out.push_str(&format!("{g:.6},{d:.6}\n"));
        }
        std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Everything a pipeline run leaves behind.
pub struct PipelineSummary {
    pub method: Method,
    pub out_dir: PathBuf,
    pub classify: ClassifyReport,
    pub metrics: MetricReport,
    pub checkpoint: Option<GanCheckpoint>,
}

/// Generates the synthetic image set for a GAN-backed method.
fn generate_from_checkpoint(
    ckpt: &GanCheckpoint,
    banks: Option<&[crate::ga::ClassLatentBank]>,
    n_per_class: usize,
    seed: u64,
    use_student: bool,
    synth_dir: &Path,
) -> Result<Vec<(DepthImage, EmotionLabel)>> {
    std::fs::create_dir_all(synth_dir).map_err(|e| Error::io(synth_dir.display().to_string(), e))?;
    let gen = if use_student {
        &ckpt.generator
    } else {
        &ckpt.teacher.generator
    };
    let latent_dim = ckpt.config.latent_dim;
    let mut out = Vec::with_capacity(n_per_class * ALL_LABELS.len());
    for label in ALL_LABELS {
        let latents: Vec<Individual> = match banks {
            Some(banks) => banks
                .iter()
                .find(|b| b.label == label)
                .ok_or_else(|| Error::Data(format!("no latent bank for class `{label}`")))?
                .individuals
                .iter()
                .take(n_per_class)
                .cloned()
                .collect(),
            None => {
                // Unevolved latents: a fresh seeded population of the right size.
                let config = GaConfig {
                    pop_size: n_per_class.max(2),
                    ..Default::default()
                };
                let mut rng =
                    StdRng::seed_from_u64(derive_seed(seed, 0x2A90 ^ ((label.index() as u64) << 16)));
                init_population(&config, latent_dim, &mut rng)
                    .into_iter()
                    .take(n_per_class)
                    .collect()
            }
        };
        if latents.len() < n_per_class {
            return Err(Error::Data(format!(
                "class `{label}`: {} latents available, need {n_per_class}",
                latents.len()
            )));
        }
        let images: Vec<DepthImage> = latents
            .par_iter()
            .map(|ind| generate(gen, &LatentVector(ind.genes.clone()), label, latent_dim))
            .collect::<Result<_>>()?;
        for (i, img) in images.into_iter().enumerate() {
            save_png(&synth_dir.join(format!("{label}_{i:04}.png")), &img)?;
            out.push((img, label));
        }
    }
    Ok(out)
}

/// Runs the full pipeline for one method into `out_dir`.
///
/// `data`: optional manifest of user-supplied real images; the procedural
/// fixture is generated when absent. `use_ga` applies to GAN-backed methods
/// (always off for the `gan` ablation).
pub fn run_pipeline(
    config: &RunConfig,
    out_dir: &Path,
    method: Method,
    use_ga: bool,
    data: Option<&Path>,
    use_student: bool,
) -> Result<PipelineSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    config.write_resolved(out_dir)?;

    // Real data: supplied manifest or the procedural fixture.
    let manifest = match data {
        Some(path) => Manifest::load(path)?,
        None => {
            let fixture_dir = out_dir.join("fixture");
            let fx = FixtureConfig {
                n_per_class: config.dataio.n_per_class,
                image_size: config.dataio.image_size,
                seed: derive_seed(config.seed, 0xF1),
                noise_amplitude: config.dataio.noise_amplitude,
            };
            fixture_generate(&fx, &fixture_dir)?
        }
    };
    let (train_manifest, test_manifest) = split(&manifest, config.classify.split_ratio, config.seed)?;
    let size = config.gan.image_size;
    let train_images = train_manifest.load_images(Some(size))?;
    let test_images = test_manifest.load_images(Some(size))?;
    let all_images: Vec<(DepthImage, EmotionLabel)> =
        train_images.iter().chain(test_images.iter()).cloned().collect();

    let n_synth = config.ga.n_outputs_per_class;
    let synth_dir = out_dir.join("synth");
    let mut checkpoint = None;

    let synth_images = match method {
        Method::Proposed | Method::Gan => {
            let kd = if method == Method::Proposed {
                config.kd
            } else {
                KdConfig {
                    lambda_kd_g: 0.0,
                    lambda_kd_d: 0.0,
                    ..config.kd
                }
            };
            let ckpt_dir = out_dir.join("checkpoint");
            let summary = train(&train_images, &config.gan, &kd, &ckpt_dir, None)?;
            // losses.csv lives in the checkpoint dir; surface a copy at the top level
            std::fs::copy(ckpt_dir.join("losses.csv"), out_dir.join("losses.csv"))
                .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
            let ckpt = summary.checkpoint;

            // The plain-GAN ablation has no conceptual teacher; it samples
            // from the student network.
            let use_student = use_student || method == Method::Gan;
            let run_ga = use_ga && method == Method::Proposed;
            let banks = if run_ga {
                let gen = if use_student {
                    &ckpt.generator
                } else {
                    &ckpt.teacher.generator
                };
                Some(evolve_all_classes(
                    gen,
                    &config.ga.ga_config(derive_seed(config.seed, 0x6A0)),
                    &config.ga.weights(),
                    config.gan.latent_dim,
                    n_synth,
                    Some(out_dir),
                )?)
            } else {
                None
            };
            let images = generate_from_checkpoint(
                &ckpt,
                banks.as_deref(),
                n_synth,
                config.seed,
                use_student,
                &synth_dir,
            )?;
            checkpoint = Some(ckpt);
            images
        }
        Method::Gmm => {
            let sampler = GmmSampler::fit(&train_images, &config.baselines, derive_seed(config.seed, 0x93))?;
            let mut images = Vec::new();
            std::fs::create_dir_all(&synth_dir).map_err(|e| Error::io(synth_dir.display().to_string(), e))?;
            for label in ALL_LABELS {
                let samples = sampler.sample(label, n_synth, derive_seed(config.seed, 0x935 ^ label.index() as u64))?;
                for (i, img) in samples.into_iter().enumerate() {
                    save_png(&synth_dir.join(format!("{label}_{i:04}.png")), &img)?;
                    images.push((img, label));
                }
            }
            images
        }
        Method::Kde => {
            let sampler = KdeSampler::fit(&train_images, config.baselines.kde_bandwidth)?;
            let mut images = Vec::new();
            std::fs::create_dir_all(&synth_dir).map_err(|e| Error::io(synth_dir.display().to_string(), e))?;
            for label in ALL_LABELS {
                let samples = sampler.sample(label, n_synth, derive_seed(config.seed, 0x4DE ^ label.index() as u64))?;
                for (i, img) in samples.into_iter().enumerate() {
                    save_png(&synth_dir.join(format!("{label}_{i:04}.png")), &img)?;
                    images.push((img, label));
                }
            }
            images
        }
    };

    // Features of the synthetic set (written, then read back so the
    // classifiers consume exactly what is on disk).
    let synth_rows = extract_features(&synth_images, &config.features)?;
    let features_path = out_dir.join("features.csv");
    write_features_csv(&features_path, &synth_rows, &config.features, size)?;
    let synth_features = read_features_csv(&features_path)?;

    let real_test_features = {
        let rows = extract_features(&test_images, &config.features)?;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (row, label) in rows {
            values.extend_from_slice(&row);
            labels.push(label);
        }
        LabeledFeatures::new(values, synth_features.d, labels)?
    };

    let classify_report = classify_harness(
        &synth_features,
        Some(&real_test_features),
        &config.classify,
        config.seed,
        out_dir,
    )?;
    write_lda_kde(&synth_features, out_dir)?;

    // Metrics compare the synthetic set against the full real set.
    let metrics = evaluate_sets(&all_images, &synth_images, &config.features, &config.metrics)?;
    write_metrics_json(&out_dir.join("metrics.json"), &metrics)?;

    Ok(PipelineSummary {
        method,
        out_dir: out_dir.to_path_buf(),
        classify: classify_report,
        metrics,
        checkpoint,
    })
}

/// Builds the cross-method comparison table from per-method run directories:
/// one row per method, metric and accuracy columns.
pub fn write_comparison_csv(dirs: &[(String, PathBuf)], out_path: &Path) -> Result<()> {
    let mut out = String::from(
        "method,fid,is_mean,is_std,ssim_mean,psnr_db_mean,rf_accuracy,dt_accuracy,gbt_accuracy\n",
    );
    for (name, dir) in dirs {
        let metrics_path = dir.join("metrics.json");
        let metrics: MetricReport = serde_json::from_str(
            &std::fs::read_to_string(&metrics_path)
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?,
        )
        .map_err(|e| Error::Json {
            path: metrics_path.display().to_string(),
            source: e,
        })?;
        let report_path = dir.join("report.json");
        let report: ClassifyReport = serde_json::from_str(
            &std::fs::read_to_string(&report_path)
                .map_err(|e| Error::io(report_path.display().to_string(), e))?,
        )
        .map_err(|e| Error::Json {
            path: report_path.display().to_string(),
            source: e,
        })?;
        out.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            metrics.fid,
            metrics.is_mean,
            metrics.is_std,
            metrics.ssim_mean,
            metrics.psnr_db_mean,
            report.rf.accuracy,
            report.dt.accuracy,
            report.gbt.accuracy
        ));
    }
    std::fs::write(out_path, out).map_err(|e| Error::io(out_path.display().to_string(), e))
}

/// Loads a checkpoint and emits `n_per_class` images per class (evolved
/// latents from `latents_dir` when given, otherwise fresh random latents).
pub fn generate_command(
    checkpoint_dir: &Path,
    latents_dir: Option<&Path>,
    n_per_class: usize,
    seed: u64,
    use_student: bool,
    out_dir: &Path,
) -> Result<usize> {
    let ckpt = load_checkpoint(checkpoint_dir)?;
    let banks = match latents_dir {
        Some(dir) => {
            let mut banks = Vec::new();
            for label in ALL_LABELS {
                let path = dir.join(format!("latents_{label}.csv"));
                let individuals = crate::ga::read_latent_bank(&path)?;
                banks.push(crate::ga::ClassLatentBank {
                    label,
                    individuals,
                    history: Vec::new(),
                });
            }
            Some(banks)
        }
        None => None,
    };
    let images = generate_from_checkpoint(&ckpt, banks.as_deref(), n_per_class, seed, use_student, out_dir)?;
    Ok(images.len())
}

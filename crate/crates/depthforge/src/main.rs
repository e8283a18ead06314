//! Command-line entry point: fixture generation, training, latent evolution,
//! generation, feature extraction, classification, metric evaluation,
//! gradient checks, and the full pipeline.

use anyhow::{bail, Context};
use clap::{ArgAction, Args, Parser, Subcommand};
use depthforge::config::{parse_config, RunConfig, TestOn};
use depthforge::dataio::{fixture_generate, FixtureConfig, Manifest};
use depthforge::distill::KdConfig;
use depthforge::ga::evolve_all_classes;
use depthforge::gan::{load_checkpoint, train};
use depthforge::metrics::{evaluate_sets, write_metrics_json};
use depthforge::nn::{gradient_check, standard_check_specs};
use depthforge::pipeline::{
    classify_harness, extract_features, generate_command, load_synth_dir, read_features_csv,
    run_pipeline, write_comparison_csv, write_features_csv, write_lda_kde, Method,
};
use depthforge::{derive_seed, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "depthforge",
    about = "Synthetic depth-face generation and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON run configuration; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonOpts {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let (config, missing) = parse_config(path)?;
                if !missing.is_empty() {
                    eprintln!("note: filled {} missing config keys from defaults:", missing.len());
                    eprintln!("  {}", missing.join(", "));
                }
                config
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.gan.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural fixture dataset and its manifest.
    Fixture {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional GAN (with or without distillation).
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Manifest CSV of training images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// proposed (KD on) or gan (KD weights zero).
        #[arg(long, default_value = "proposed")]
        method: String,
        /// Resume from an existing checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evolve per-class latent vectors against a trained generator.
    Evolve {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evolve against the student generator instead of the teacher.
        #[arg(long, action = ArgAction::SetTrue)]
        use_student: bool,
    },
    /// Generate synthetic images from a checkpoint.
    Generate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding latents_<class>.csv (from `evolve`).
        #[arg(long)]
        latents: Option<PathBuf>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long, action = ArgAction::SetTrue)]
        use_student: bool,
    },
    /// Extract fused features for a manifest into a CSV.
    Features {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the classifiers, optionally across repeats.
    Classify {
        #[command(flatten)]
        common: CommonOpts,
        /// Manifest of labeled images (features are extracted on the fly).
        #[arg(long, conflicts_with = "train_features")]
        data: Option<PathBuf>,
        /// Pre-extracted training features CSV.
        #[arg(long)]
        train_features: Option<PathBuf>,
        /// Pre-extracted held-out features CSV (used when --test-on real).
        #[arg(long)]
        test_features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        test_on: Option<String>,
    },
    /// Compute the metric report for a synthetic set, or compare method runs.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        /// Manifest of real images.
        #[arg(long, required_unless_present = "compare")]
        real: Option<PathBuf>,
        /// Directory of <class>_<index>.png synthetic images.
        #[arg(long, required_unless_present = "compare")]
        synth: Option<PathBuf>,
        /// name=dir pairs of pipeline outputs to tabulate.
        #[arg(long, value_delimiter = ',')]
        compare: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline for one method.
    Pipeline {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "proposed")]
        method: String,
        /// Evolve latents with the GA (proposed method only).
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        use_ga: bool,
        /// Optional manifest of real images; the fixture is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, action = ArgAction::SetTrue)]
        use_student: bool,
    },
    /// Finite-difference checks for every layer kind.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn main() {
    if let Ok(threads) = std::env::var("DEPTHFORGE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fixture { common, out } => {
            let config = common.load()?;
            let fx = FixtureConfig {
                n_per_class: config.dataio.n_per_class,
                image_size: config.dataio.image_size,
                seed: derive_seed(config.seed, 0xF1),
                noise_amplitude: config.dataio.noise_amplitude,
            };
            let manifest = fixture_generate(&fx, &out)?;
            println!(
                "fixture: {} images ({} per class) in {}",
                manifest.len(),
                config.dataio.n_per_class,
                out.display()
            );
        }
        Command::Train {
            common,
            data,
            out,
            method,
            resume,
        } => {
            let config = common.load()?;
            let kd = match method.parse::<Method>()? {
                Method::Proposed => config.kd,
                Method::Gan => KdConfig {
                    lambda_kd_g: 0.0,
                    lambda_kd_d: 0.0,
                    ..config.kd
                },
                other => bail!("train supports proposed|gan, got {other}"),
            };
            let manifest = Manifest::load(&data)?;
            let images = manifest.load_images(Some(config.gan.image_size))?;
            config.write_resolved(&out)?;
            let summary = train(&images, &config.gan, &kd, &out, resume.as_deref())?;
            let last = summary.events.last();
            println!(
                "trained {} epochs; checkpoint in {}{}",
                summary.events.len(),
                out.display(),
                last.map(|e| format!(
                    " (d_loss {:.4}, g_adv {:.4}, kd_g {:.4}, kd_d {:.4})",
                    e.d_loss, e.g_adv_loss, e.kd_g_loss, e.kd_d_loss
                ))
                .unwrap_or_default()
            );
        }
        Command::Evolve {
            common,
            checkpoint,
            out,
            use_student,
        } => {
            let config = common.load()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let gen = if use_student {
                &ckpt.generator
            } else {
                &ckpt.teacher.generator
            };
            std::fs::create_dir_all(&out).context("creating output dir")?;
            let banks = evolve_all_classes(
                gen,
                &config.ga.ga_config(derive_seed(config.seed, 0x6A0)),
                &config.ga.weights(),
                ckpt.config.latent_dim,
                config.ga.n_outputs_per_class,
                Some(&out),
            )?;
            for bank in &banks {
                let best = bank.history.last().map(|h| h.best).unwrap_or(f64::NAN);
                println!(
                    "{}: {} latents, final best fitness {best:.4}",
                    bank.label,
                    bank.individuals.len()
                );
            }
        }
        Command::Generate {
            common,
            checkpoint,
            out,
            latents,
            per_class,
            use_student,
        } => {
            let config = common.load()?;
            let n = per_class.unwrap_or(config.ga.n_outputs_per_class);
            let count = generate_command(
                &checkpoint,
                latents.as_deref(),
                n,
                config.seed,
                use_student,
                &out,
            )?;
            println!("generated {count} images in {}", out.display());
        }
        Command::Features { common, data, out } => {
            let config = common.load()?;
            let manifest = Manifest::load(&data)?;
            let images = manifest.load_images(Some(config.gan.image_size))?;
            let rows = extract_features(&images, &config.features)?;
            write_features_csv(&out, &rows, &config.features, config.gan.image_size)?;
            println!("wrote {} feature rows to {}", rows.len(), out.display());
        }
        Command::Classify {
            common,
            data,
            train_features,
            test_features,
            out,
            repeats,
            test_on,
        } => {
            let mut config = common.load()?;
            if let Some(r) = repeats {
                config.classify.repeats = r;
            }
            if let Some(t) = test_on {
                config.classify.test_on = match t.as_str() {
                    "real" => TestOn::Real,
                    "synthetic" => TestOn::Synthetic,
                    other => bail!("--test-on must be real|synthetic, got {other}"),
                };
            }
            let train_matrix = match (&data, &train_features) {
                (Some(manifest_path), None) => {
                    let manifest = Manifest::load(manifest_path)?;
                    let images = manifest.load_images(Some(config.gan.image_size))?;
                    let rows = extract_features(&images, &config.features)?;
                    let mut values = Vec::new();
                    let mut labels = Vec::new();
                    let d = rows.first().map(|(r, _)| r.len()).unwrap_or(0);
                    for (row, label) in rows {
                        values.extend_from_slice(&row);
                        labels.push(label);
                    }
                    depthforge::classify::LabeledFeatures::new(values, d, labels)?
                }
                (None, Some(path)) => read_features_csv(path)?,
                _ => bail!("classify needs exactly one of --data or --train-features"),
            };
            let test_matrix = match &test_features {
                Some(path) => Some(read_features_csv(path)?),
                None => None,
            };
            if config.classify.test_on == TestOn::Real && test_matrix.is_none() {
                // With a single matrix the harness can only split it.
                config.classify.test_on = TestOn::Synthetic;
            }
            let report = classify_harness(
                &train_matrix,
                test_matrix.as_ref(),
                &config.classify,
                config.seed,
                &out,
            )?;
            write_lda_kde(&train_matrix, &out)?;
            println!(
                "classify ({} runs, test on {}): rf acc {:.4}, dt acc {:.4}, gbt acc {:.4}",
                config.classify.repeats,
                report.test_on,
                report.rf.accuracy,
                report.dt.accuracy,
                report.gbt.accuracy
            );
        }
        Command::Evaluate {
            common,
            real,
            synth,
            compare,
            out,
        } => {
            let config = common.load()?;
            if !compare.is_empty() {
                let dirs: Vec<(String, PathBuf)> = compare
                    .iter()
                    .map(|pair| {
                        pair.split_once('=')
                            .map(|(n, d)| (n.to_string(), PathBuf::from(d)))
                            .ok_or_else(|| {
                                anyhow::anyhow!("--compare entries must be name=dir, got `{pair}`")
                            })
                    })
                    .collect::<anyhow::Result<_>>()?;
                write_comparison_csv(&dirs, &out)?;
                println!("wrote comparison of {} runs to {}", dirs.len(), out.display());
            } else {
                let real_manifest = Manifest::load(&real.expect("clap enforces --real"))?;
                let real_images = real_manifest.load_images(Some(config.gan.image_size))?;
                let synth_images = load_synth_dir(&synth.expect("clap enforces --synth"))?;
                let report =
                    evaluate_sets(&real_images, &synth_images, &config.features, &config.metrics)?;
                write_metrics_json(&out, &report)?;
                println!(
                    "fid {:.4}, IS {:.4} +/- {:.4}, ssim {:.4}, psnr {:.2} dB -> {}",
                    report.fid,
                    report.is_mean,
                    report.is_std,
                    report.ssim_mean,
                    report.psnr_db_mean,
                    out.display()
                );
            }
        }
        Command::Pipeline {
            common,
            out,
            method,
            use_ga,
            data,
            use_student,
        } => {
            let config = common.load()?;
            let method = method.parse::<Method>()?;
            let summary = run_pipeline(&config, &out, method, use_ga, data.as_deref(), use_student)?;
            println!(
                "pipeline ({method}): fid {:.4}, ssim {:.4}, rf acc {:.4} -> {}",
                summary.metrics.fid,
                summary.metrics.ssim_mean,
                summary.classify.rf.accuracy,
                out.display()
            );
        }
        Command::Gradcheck { seed, tol } => {
            let mut all_pass = true;
            for spec in standard_check_specs() {
                let report = gradient_check(&spec, seed, tol)?;
                all_pass &= report.pass;
                println!(
                    "{:12} {}  max rel err {:.3e}",
                    report.layer,
                    if report.pass { "pass" } else { "FAIL" },
                    report.max_rel_err()
                );
                for entry in &report.entries {
                    println!("  {:12} {:.3e}", entry.parameter, entry.max_rel_err);
                }
            }
            if !all_pass {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

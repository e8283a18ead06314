//! Genetic algorithm over the generator's latent space: per-class evolution
//! of latent vectors maximizing an image-statistics fitness (weighted mean
//! intensity plus weighted standard deviation).

use crate::dataio::{DepthImage, EmotionLabel, ALL_LABELS};
use crate::derive_seed;
use crate::gan::{generate, LatentVector};
use crate::nn::Network;
use crate::{Error, Result};
use rand::prelude::*;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Gene bounds enforced by every operator.
pub const GENE_MIN: f32 = -3.0;
pub const GENE_MAX: f32 = 3.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitnessWeights {
    /// Weight on the mean intensity.
    pub alpha: f64,
    /// Weight on the (population) standard deviation.
    pub beta: f64,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        FitnessWeights { alpha: 1.0, beta: 1.0 }
    }
}

/// One real-valued chromosome with a cached fitness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Individual {
    pub genes: Vec<f32>,
    pub fitness: Option<f64>,
}

pub type Population = Vec<Individual>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaConfig {
    pub pop_size: usize,
    pub generations: usize,
    /// Probability a parent pair is recombined (uniform crossover).
    pub p_crossover: f64,
    /// Probability an offspring is mutated at all.
    pub p_mutation: f64,
    pub tournament_k: usize,
    pub elitism: usize,
    /// Stddev of the Gaussian gene perturbation.
    pub mutation_sigma: f64,
    /// Per-gene perturbation probability inside a mutated offspring.
    pub per_gene_rate: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            pop_size: 20,
            generations: 100,
            p_crossover: 0.8,
            p_mutation: 0.2,
            tournament_k: 3,
            elitism: 1,
            mutation_sigma: 0.25,
            per_gene_rate: 0.05,
            seed: 42,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 2 {
            return Err(Error::config("ga.pop_size", format!("must be >= 2, got {}", self.pop_size)));
        }
        for (key, p) in [
            ("ga.p_crossover", self.p_crossover),
            ("ga.p_mutation", self.p_mutation),
            ("ga.per_gene_rate", self.per_gene_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("probability must be in [0,1], got {p}")));
            }
        }
        if self.tournament_k == 0 {
            return Err(Error::config("ga.tournament_k", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-generation best/mean fitness, for the progression curves.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
}

/// pop_size individuals with genes i.i.d. N(0,1) clamped to the gene bounds.
pub fn init_population(config: &GaConfig, latent_dim: usize, rng: &mut StdRng) -> Population {
    (0..config.pop_size)
        .map(|_| Individual {
            genes: (0..latent_dim)
                .map(|_| (rng.sample::<f32, _>(StandardNormal)).clamp(GENE_MIN, GENE_MAX))
                .collect(),
            fitness: None,
        })
        .collect()
}

/// Image-statistics fitness on a [0,1] image: α·mean + β·std.
pub fn fitness_stats(image: &DepthImage, weights: &FitnessWeights) -> f64 {
    let n = image.pixels.len() as f64;
    let mean: f64 = image.pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var: f64 = image
        .pixels
        .iter()
        .map(|&p| {
            let d = p as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    weights.alpha * mean + weights.beta * var.sqrt()
}

/// Fitness of a latent vector under a trained generator: the generated image
/// is mapped from [-1,1] to [0,1] and scored by [`fitness_stats`].
pub fn fitness(gen: &Network, y: EmotionLabel, z: &LatentVector, weights: &FitnessWeights) -> Result<f64> {
    let image = generate(gen, z, y, z.len())?;
    Ok(fitness_stats(&image, weights))
}

fn tournament_select<'a>(pop: &'a [Individual], k: usize, rng: &mut StdRng) -> &'a Individual {
    let mut best: Option<&Individual> = None;
    for _ in 0..k {
        let cand = &pop[rng.gen_range(0..pop.len())];
        let better = match best {
            None => true,
            Some(b) => cand.fitness.unwrap_or(f64::NEG_INFINITY) > b.fitness.unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some(cand);
        }
    }
    best.expect("tournament_k >= 1")
}

fn uniform_crossover(a: &[f32], b: &[f32], rng: &mut StdRng) -> (Vec<f32>, Vec<f32>) {
    let mut c1 = a.to_vec();
    let mut c2 = b.to_vec();
    for i in 0..a.len() {
        if rng.gen_bool(0.5) {
            c1[i] = b[i];
            c2[i] = a[i];
        }
    }
    (c1, c2)
}

fn mutate(genes: &mut [f32], config: &GaConfig, rng: &mut StdRng) {
    for g in genes.iter_mut() {
        if rng.gen_bool(config.per_gene_rate) {
            let delta: f64 = rng.sample::<f64, _>(StandardNormal) * config.mutation_sigma;
            *g = (*g + delta as f32).clamp(GENE_MIN, GENE_MAX);
        }
    }
}

/// Evolves a population maximizing `eval` (tournament selection, uniform
/// crossover, Gaussian mutation, elitism). Fitness evaluations within a
/// generation run in parallel; all random choices come from one seeded
/// stream. Returns the best individual and the per-generation history
/// (`generations` rows).
pub fn evolve_fn<F>(config: &GaConfig, latent_dim: usize, eval: F) -> Result<(Individual, Vec<GenerationStats>, Vec<Individual>)>
where
    F: Fn(&[f32]) -> Result<f64> + Sync,
{
    config.validate()?;
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut pop = init_population(config, latent_dim, &mut rng);
    let score = |pop: &mut Population| -> Result<()> {
        let scores: Vec<f64> = pop
            .par_iter()
            .map(|ind| {
                if let Some(f) = ind.fitness {
                    Ok(f)
                } else {
                    eval(&ind.genes)
                }
            })
            .collect::<Result<_>>()?;
        for (ind, s) in pop.iter_mut().zip(scores) {
            ind.fitness = Some(s);
        }
        Ok(())
    };
    score(&mut pop)?;
    // Archive of every evaluated individual, for top-k extraction.
    let mut archive: Vec<Individual> = pop.clone();

    let mut history = Vec::with_capacity(config.generations);
    for generation in 1..=config.generations {
        // Elites survive unchanged.
        let mut ranked: Vec<usize> = (0..pop.len()).collect();
        ranked.sort_by(|&a, &b| {
            pop[b]
                .fitness
                .partial_cmp(&pop[a].fitness)
                .expect("fitness is finite")
        });
        let mut next: Population = ranked
            .iter()
            .take(config.elitism.min(pop.len()))
            .map(|&i| pop[i].clone())
            .collect();

        while next.len() < config.pop_size {
            let p1 = tournament_select(&pop, config.tournament_k, &mut rng).clone();
            let p2 = tournament_select(&pop, config.tournament_k, &mut rng).clone();
            let (mut c1, mut c2) = if rng.gen_bool(config.p_crossover) {
                uniform_crossover(&p1.genes, &p2.genes, &mut rng)
            } else {
                (p1.genes.clone(), p2.genes.clone())
            };
            if rng.gen_bool(config.p_mutation) {
                mutate(&mut c1, config, &mut rng);
            }
            if rng.gen_bool(config.p_mutation) {
                mutate(&mut c2, config, &mut rng);
            }
            next.push(Individual {
                genes: c1,
                fitness: None,
            });
            if next.len() < config.pop_size {
                next.push(Individual {
                    genes: c2,
                    fitness: None,
                });
            }
        }
        pop = next;
        score(&mut pop)?;
        archive.extend(pop.iter().filter(|i| i.fitness.is_some()).cloned());

        let best = pop
            .iter()
            .map(|i| i.fitness.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let mean = pop.iter().map(|i| i.fitness.unwrap()).sum::<f64>() / pop.len() as f64;
        history.push(GenerationStats {
            generation,
            best,
            mean,
        });
    }

    let best = archive
        .iter()
        .max_by(|a, b| a.fitness.partial_cmp(&b.fitness).expect("fitness is finite"))
        .cloned()
        .ok_or_else(|| Error::Data("empty population".to_string()))?;
    Ok((best, history, archive))
}

/// Evolves latent vectors for one class against a trained generator.
pub fn evolve(
    gen: &Network,
    y: EmotionLabel,
    config: &GaConfig,
    weights: &FitnessWeights,
    latent_dim: usize,
) -> Result<(Individual, Vec<GenerationStats>)> {
    let (best, history, _) = evolve_fn(config, latent_dim, |genes| {
        fitness(gen, y, &LatentVector(genes.to_vec()), weights)
    })?;
    Ok((best, history))
}

/// Evolved latents for one class: top-k unique individuals plus the history.
#[derive(Debug, Clone)]
pub struct ClassLatentBank {
    pub label: EmotionLabel,
    pub individuals: Vec<Individual>,
    pub history: Vec<GenerationStats>,
}

/// Runs the evolution per class and extracts the `n_outputs_per_class` best
/// unique individuals (L2 distance > 1e-6) from each class's archive of
/// evaluated candidates. Writes `latents_<class>.csv` and
/// `ga_history_<class>.csv` when `out_dir` is given.
pub fn evolve_all_classes(
    gen: &Network,
    config: &GaConfig,
    weights: &FitnessWeights,
    latent_dim: usize,
    n_outputs_per_class: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<ClassLatentBank>> {
    let mut banks = Vec::with_capacity(ALL_LABELS.len());
    for label in ALL_LABELS {
        let mut class_config = *config;
        class_config.seed = derive_seed(config.seed, 0x6A ^ ((label.index() as u64) << 24));
        let (_, history, mut archive) = evolve_fn(&class_config, latent_dim, |genes| {
            fitness(gen, label, &LatentVector(genes.to_vec()), weights)
        })?;
        archive.sort_by(|a, b| b.fitness.partial_cmp(&a.fitness).expect("fitness is finite"));

        // Greedy unique top-k: skip candidates within L2 1e-6 of an accepted one.
        let mut unique: Vec<Individual> = Vec::with_capacity(n_outputs_per_class);
        'cand: for cand in archive {
            if unique.len() >= n_outputs_per_class {
                break;
            }
            for kept in &unique {
                let mut dist2 = 0.0f64;
                for (a, b) in cand.genes.iter().zip(kept.genes.iter()) {
                    let d = (*a - *b) as f64;
                    dist2 += d * d;
                    if dist2 > 1e-12 {
                        break;
                    }
                }
                if dist2 <= 1e-12 {
                    continue 'cand;
                }
            }
            unique.push(cand);
        }
        if unique.len() < n_outputs_per_class {
            return Err(Error::Data(format!(
                "class `{label}`: only {} unique evolved latents, need {}",
                unique.len(),
                n_outputs_per_class
            )));
        }

        if let Some(dir) = out_dir {
            write_latent_bank(&dir.join(format!("latents_{label}.csv")), &unique)?;
            write_history(&dir.join(format!("ga_history_{label}.csv")), &history)?;
        }
        banks.push(ClassLatentBank {
            label,
            individuals: unique,
            history,
        });
    }
    Ok(banks)
}

/// One row per individual: fitness followed by the genes.
pub fn write_latent_bank(path: &Path, individuals: &[Individual]) -> Result<()> {
    let mut out = String::new();
    for ind in individuals {
        out.push_str(&format!("{}", ind.fitness.unwrap_or(f64::NAN)));
        for g in &ind.genes {
            out.push_str(&format!(",{g}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a latent bank written by [`write_latent_bank`].
pub fn read_latent_bank(path: &Path) -> Result<Vec<Individual>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let fitness: f64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::format(path.display().to_string(), format!("line {}: bad fitness", lineno + 1)))?;
        let genes: Vec<f32> = fields
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path.display().to_string(), format!("line {}: bad gene", lineno + 1)))?;
        out.push(Individual {
            genes,
            fitness: Some(fitness),
        });
    }
    Ok(out)
}

pub fn write_history(path: &Path, history: &[GenerationStats]) -> Result<()> {
    let mut out = String::from("generation,best,mean\n");
    for h in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", h.generation, h.best, h.mean));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

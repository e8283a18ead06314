//! Conditional DCGAN: emotion-conditioned generator and discriminator, the
//! adversarial training step with EMA-teacher consistency terms, and the
//! training loop with checkpointing.
//!
//! Conditioning: the one-hot label is concatenated to z for the generator and
//! broadcast as constant channels for the discriminator. The generator head
//! is tanh, so outputs always live in [-1, 1].

use crate::dataio::{DepthImage, EmotionLabel, NUM_CLASSES};
use crate::derive_seed;
use crate::distill::{consistency_loss, EmaTeacher, KdConfig};
use crate::nn::{
    arch_to_network, init_layer, network_arch, read_tensor_list, read_weights, write_tensor_list,
    write_weights, AdamParams, ArchFile, ArchLayer, LayerSpec, Mode, Network,
};
use crate::{Error, Result, Tensor};
use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// A latent input vector, drawn from N(0, I).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f32>);

impl LatentVector {
    pub fn sample(dim: usize, rng: &mut StdRng) -> LatentVector {
        LatentVector((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub image_size: usize,
    /// Channel multiplier; the generator starts at 4×4×(8·base).
    pub base_channels: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            latent_dim: 256,
            image_size: 64,
            base_channels: 8,
            batch_size: 32,
            epochs: 200,
            lr_g: 8e-5,
            lr_d: 1e-5,
            seed: 42,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 32 {
            return Err(Error::config(
                "gan.image_size",
                format!("must be a power of two >= 32, got {}", self.image_size),
            ));
        }
        if self.lr_g <= 0.0 {
            return Err(Error::config("gan.lr_g", format!("must be > 0, got {}", self.lr_g)));
        }
        if self.lr_d <= 0.0 {
            return Err(Error::config("gan.lr_d", format!("must be > 0, got {}", self.lr_d)));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("gan.latent_dim", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("gan.batch_size", "must be >= 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("gan.base_channels", "must be >= 1"));
        }
        Ok(())
    }

    fn upsample_blocks(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }
}

/// z ‖ one-hot(y) → dense to 4×4×(8·base) → stride-2 transposed-conv blocks
/// with channels halving (batchnorm + ReLU) → final tanh layer.
pub fn build_generator(config: &GanConfig, rng: &mut StdRng) -> Result<Network> {
    config.validate()?;
    let blocks = config.upsample_blocks();
    let c0 = 8 * config.base_channels;
    let mut layers = Vec::new();
    // Magnitude-invariant latent input: only the direction of z matters, so
    // latent-space search cannot escape the prior's support.
    layers.push(init_layer(
        LayerSpec::LatentNorm {
            dim: config.latent_dim,
        },
        "g.znorm",
        rng,
    )?);
    layers.push(init_layer(
        LayerSpec::Dense {
            in_dim: config.latent_dim + NUM_CLASSES,
            out_dim: c0 * 16,
        },
        "g.project",
        rng,
    )?);
    layers.push(init_layer(
        LayerSpec::Reshape {
            shape: vec![c0, 4, 4],
        },
        "g.reshape",
        rng,
    )?);
    layers.push(init_layer(
        LayerSpec::BatchNorm2d {
            channels: c0,
            epsilon: 1e-5,
            momentum: 0.1,
        },
        "g.bn0",
        rng,
    )?);
    layers.push(init_layer(LayerSpec::Relu, "g.relu0", rng)?);
    let mut in_ch = c0;
    for b in 0..blocks {
        let last = b == blocks - 1;
        let out_ch = if last { 1 } else { (c0 >> (b + 1)).max(1) };
        layers.push(init_layer(
            LayerSpec::ConvT2d {
                in_ch,
                out_ch,
                kernel: 4,
                stride: 2,
                pad: 1,
                bias: last,
            },
            &format!("g.up{b}"),
            rng,
        )?);
        if last {
            layers.push(init_layer(LayerSpec::Tanh, "g.tanh", rng)?);
        } else {
            layers.push(init_layer(
                LayerSpec::BatchNorm2d {
                    channels: out_ch,
                    epsilon: 1e-5,
                    momentum: 0.1,
                },
                &format!("g.bn{}", b + 1),
                rng,
            )?);
            layers.push(init_layer(LayerSpec::Relu, &format!("g.relu{}", b + 1), rng)?);
        }
        in_ch = out_ch;
    }
    Ok(Network::new(layers))
}

/// (image ‖ one-hot label channels) → stride-2 conv blocks with
/// LeakyReLU(0.2), batchnorm except on the first block → dense to one logit.
pub fn build_discriminator(config: &GanConfig, rng: &mut StdRng) -> Result<Network> {
    config.validate()?;
    let blocks = config.upsample_blocks();
    let b0 = config.base_channels;
    let mut layers = Vec::new();
    let mut in_ch = 1 + NUM_CLASSES;
    let mut size = config.image_size;
    for b in 0..blocks {
        let out_ch = (b0 << b).min(8 * b0);
        let first = b == 0;
        layers.push(init_layer(
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel: 4,
                stride: 2,
                pad: 1,
                bias: first,
            },
            &format!("d.conv{b}"),
            rng,
        )?);
        if !first {
            layers.push(init_layer(
                LayerSpec::BatchNorm2d {
                    channels: out_ch,
                    epsilon: 1e-5,
                    momentum: 0.1,
                },
                &format!("d.bn{b}"),
                rng,
            )?);
        }
        layers.push(init_layer(
            LayerSpec::LeakyRelu { slope: 0.2 },
            &format!("d.lrelu{b}"),
            rng,
        )?);
        in_ch = out_ch;
        size /= 2;
    }
    layers.push(init_layer(
        LayerSpec::Reshape {
            shape: vec![in_ch * size * size],
        },
        "d.flatten",
        rng,
    )?);
    layers.push(init_layer(
        LayerSpec::Dense {
            in_dim: in_ch * size * size,
            out_dim: 1,
        },
        "d.logit",
        rng,
    )?);
    Ok(Network::new(layers))
}

/// Stacks latent vectors with one-hot labels into a [N, latent+C] batch.
pub fn gen_input(z_batch: &[LatentVector], labels: &[EmotionLabel], latent_dim: usize) -> Result<Tensor> {
    if z_batch.len() != labels.len() || z_batch.is_empty() {
        return Err(Error::Data(format!(
            "gen_input: {} latents vs {} labels",
            z_batch.len(),
            labels.len()
        )));
    }
    let n = z_batch.len();
    let mut data = Vec::with_capacity(n * (latent_dim + NUM_CLASSES));
    for (z, y) in z_batch.iter().zip(labels.iter()) {
        if z.len() != latent_dim {
            return Err(Error::shape(
                "gen_input",
                format!("latent dim {latent_dim}"),
                format!("{}", z.len()),
            ));
        }
        data.extend_from_slice(&z.0);
        data.extend_from_slice(&y.one_hot());
    }
    Tensor::from_vec(&[n, latent_dim + NUM_CLASSES], data)
}

/// Appends one-hot label planes to an image batch: [N,1,H,W] → [N,1+C,H,W].
pub fn disc_input(images: &Tensor, labels: &[EmotionLabel]) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("disc_input", "[N, 1, H, W]", &format!("{s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    if labels.len() != n {
        return Err(Error::Data(format!("disc_input: {n} images vs {} labels", labels.len())));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, 1 + NUM_CLASSES, h, w]);
    {
        let od = out.data_mut();
        let id = images.data();
        for ni in 0..n {
            let src = &id[ni * plane..(ni + 1) * plane];
            let dst_base = ni * (1 + NUM_CLASSES) * plane;
            od[dst_base..dst_base + plane].copy_from_slice(src);
            let hot = labels[ni].index();
            let lbl_base = dst_base + (1 + hot) * plane;
            od[lbl_base..lbl_base + plane].fill(1.0);
        }
    }
    Ok(out)
}

/// Runs the generator in eval mode on a single (z, y) pair.
pub fn generate(gen: &Network, z: &LatentVector, y: EmotionLabel, latent_dim: usize) -> Result<DepthImage> {
    let input = gen_input(std::slice::from_ref(z), &[y], latent_dim)?;
    let out = gen.eval(input)?;
    let s = out.shape().to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(Error::shape("generate", "[1, 1, H, W] output", &format!("{s:?}")));
    }
    DepthImage::denormalize(&out, s[3], s[2])
}

/// Per-step (and per-epoch mean) loss components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainEvent {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub kd_g_loss: f64,
    pub kd_d_loss: f64,
}

impl TrainEvent {
    pub fn all_finite(&self) -> bool {
        self.d_loss.is_finite()
            && self.g_adv_loss.is_finite()
            && self.kd_g_loss.is_finite()
            && self.kd_d_loss.is_finite()
    }
}

/// Adam momentum for adversarial updates (DCGAN convention).
const GAN_ADAM_BETA1: f32 = 0.5;

fn gan_adam(lr: f32) -> AdamParams {
    AdamParams {
        beta1: GAN_ADAM_BETA1,
        ..AdamParams::with_lr(lr)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// BCE-with-logits against a constant target over a [N,1] logit tensor.
/// Returns (mean loss, gradient wrt logits scaled by 1/N).
fn bce_with_logits(logits: &Tensor, target: f64) -> (f64, Tensor) {
    let n = logits.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    {
        let g = grad.data_mut();
        for (i, &l) in logits.data().iter().enumerate() {
            let l = l as f64;
            // loss = softplus(l) − target·l ; grad = σ(l) − target
            loss += softplus(l) - target * l;
            g[i] = ((sigmoid(l) - target) / n) as f32;
        }
    }
    (loss / n, grad)
}

/// One adversarial training step: a discriminator update (BCE real-vs-fake
/// plus the weighted logit-consistency term), a generator update
/// (non-saturating adversarial term plus weighted output-consistency term),
/// then one EMA update of both teachers.
#[allow(clippy::too_many_arguments)]
pub fn gan_train_step(
    gen: &mut Network,
    disc: &mut Network,
    teacher: &mut EmaTeacher,
    real_batch: &Tensor,
    labels: &[EmotionLabel],
    z_batch: &[LatentVector],
    config: &GanConfig,
    kd: &KdConfig,
    epoch: usize,
) -> Result<TrainEvent> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data("gan_train_step: empty batch".to_string()));
    }
    let ctx = |what: &str| format!("epoch {epoch}: {what}");

    // Generate fakes once; the cache is reused for the generator update
    // (generator weights do not change during the discriminator update).
    let g_in = gen_input(z_batch, labels, config.latent_dim)?;
    let (fake_images, gen_caches) = gen.forward(g_in.clone(), Mode::Train)?;

    let d_in_real = disc_input(real_batch, labels)?;
    let d_in_fake = disc_input(&fake_images, labels)?;

    // ---- Discriminator update ----
    let (real_logits, real_caches) = disc.forward(d_in_real.clone(), Mode::Train)?;
    let (fake_logits, fake_caches) = disc.forward(d_in_fake.clone(), Mode::Train)?;
    let (loss_real, mut grad_real) = bce_with_logits(&real_logits, 1.0);
    let (loss_fake, mut grad_fake) = bce_with_logits(&fake_logits, 0.0);
    let d_loss = loss_real + loss_fake;

    let mut kd_d_loss = 0.0;
    if kd.lambda_kd_d > 0.0 {
        // Teacher logits on the same mixed real+fake batch (eval mode).
        let t_real = teacher.discriminator.eval(d_in_real.clone())?;
        let t_fake = teacher.discriminator.eval(d_in_fake.clone())?;
        let total = (2 * n) as f64;
        let mut acc = 0.0f64;
        for ((gr, &s), &t) in grad_real
            .data_mut()
            .iter_mut()
            .zip(real_logits.data().iter())
            .zip(t_real.data().iter())
        {
            let d = s as f64 - t as f64;
            acc += d * d;
            *gr += (kd.lambda_kd_d * 2.0 * d / total) as f32;
        }
        for ((gf, &s), &t) in grad_fake
            .data_mut()
            .iter_mut()
            .zip(fake_logits.data().iter())
            .zip(t_fake.data().iter())
        {
            let d = s as f64 - t as f64;
            acc += d * d;
            *gf += (kd.lambda_kd_d * 2.0 * d / total) as f32;
        }
        kd_d_loss = acc / total;
    }
    if !d_loss.is_finite() || !kd_d_loss.is_finite() {
        return Err(Error::numeric(ctx("discriminator loss"), "non-finite loss"));
    }

    let (_, grads_real) = disc.backward(&real_caches, grad_real)?;
    let (_, grads_fake) = disc.backward(&fake_caches, grad_fake)?;
    let mut d_grads = grads_real;
    Network::add_grads(&mut d_grads, &grads_fake);
    disc.adam_step(&d_grads, gan_adam(config.lr_d as f32))?;

    // ---- Generator update (non-saturating: maximize log D on fakes) ----
    let (g_logits, g_disc_caches) = disc.forward(d_in_fake, Mode::Train)?;
    let (g_adv_loss, g_logit_grad) = bce_with_logits(&g_logits, 1.0);
    let (d_input_grad, _) = disc.backward(&g_disc_caches, g_logit_grad)?;

    // Gradient wrt the fake images is channel 0 of the discriminator input
    // gradient (label planes are constants).
    let s = fake_images.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let mut fake_grad = Tensor::zeros(&s);
    {
        let fg = fake_grad.data_mut();
        let dg = d_input_grad.data();
        for ni in 0..n {
            let src = ni * (1 + NUM_CLASSES) * plane;
            let dst = ni * plane;
            fg[dst..dst + plane].copy_from_slice(&dg[src..src + plane]);
        }
    }

    let mut kd_g_loss = 0.0;
    if kd.lambda_kd_g > 0.0 {
        let teacher_imgs = teacher.generator.eval(g_in)?;
        let (loss, kd_grad) = consistency_loss(&teacher_imgs, &fake_images)?;
        kd_g_loss = loss;
        for (fg, &kg) in fake_grad.data_mut().iter_mut().zip(kd_grad.data().iter()) {
            *fg += kd.lambda_kd_g as f32 * kg;
        }
    }
    if !g_adv_loss.is_finite() || !kd_g_loss.is_finite() {
        return Err(Error::numeric(ctx("generator loss"), "non-finite loss"));
    }

    let (_, g_grads) = gen.backward(&gen_caches, fake_grad)?;
    gen.adam_step(&g_grads, gan_adam(config.lr_g as f32))?;

    // ---- EMA after both optimizer updates ----
    teacher.update(gen, disc, kd.tau)?;

    Ok(TrainEvent {
        epoch,
        d_loss,
        g_adv_loss,
        kd_g_loss,
        kd_d_loss,
    })
}

/// On-disk checkpoint layout for a trained (or in-progress) GAN.
pub struct GanCheckpoint {
    pub generator: Network,
    pub discriminator: Network,
    pub teacher: EmaTeacher,
    pub config: GanConfig,
    pub kd: KdConfig,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEcho {
    gan: GanConfig,
    kd: KdConfig,
    epoch: usize,
    adam_step_g: u64,
    adam_step_d: u64,
    discriminator_layers: Vec<ArchLayer>,
}

fn adam_tensors(net: &Network) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for l in &net.layers {
        for t in l.state.adam_m.iter().chain(l.state.adam_v.iter()) {
            out.push(t);
        }
    }
    out
}

fn adam_step_of(net: &Network) -> u64 {
    net.layers
        .iter()
        .map(|l| l.state.step)
        .max()
        .unwrap_or(0)
}

pub fn save_checkpoint(dir: &Path, ckpt: &GanCheckpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let echo = CheckpointEcho {
        gan: ckpt.config.clone(),
        kd: ckpt.kd,
        epoch: ckpt.epoch,
        adam_step_g: adam_step_of(&ckpt.generator),
        adam_step_d: adam_step_of(&ckpt.discriminator),
        discriminator_layers: network_arch(&ckpt.discriminator),
    };
    let arch = ArchFile {
        format_version: 1,
        layers: network_arch(&ckpt.generator),
        config: serde_json::to_value(&echo).expect("echo serializes"),
    };
    let arch_path = dir.join("arch.json");
    let json = serde_json::to_string_pretty(&arch).map_err(|e| Error::Json {
        path: arch_path.display().to_string(),
        source: e,
    })?;
    std::fs::write(&arch_path, json).map_err(|e| Error::io(arch_path.display().to_string(), e))?;

    write_weights(&dir.join("weights.bin"), &ckpt.generator)?;
    write_weights(&dir.join("disc.bin"), &ckpt.discriminator)?;
    write_weights(&dir.join("teacher_g.bin"), &ckpt.teacher.generator)?;
    write_weights(&dir.join("teacher_d.bin"), &ckpt.teacher.discriminator)?;
    write_tensor_list(&dir.join("adam_g.bin"), &adam_tensors(&ckpt.generator))?;
    write_tensor_list(&dir.join("adam_d.bin"), &adam_tensors(&ckpt.discriminator))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<GanCheckpoint> {
    let arch_path = dir.join("arch.json");
    let text =
        std::fs::read_to_string(&arch_path).map_err(|e| Error::io(arch_path.display().to_string(), e))?;
    let arch: ArchFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: arch_path.display().to_string(),
        source: e,
    })?;
    let echo: CheckpointEcho = serde_json::from_value(arch.config.clone()).map_err(|e| Error::Json {
        path: arch_path.display().to_string(),
        source: e,
    })?;

    let mut generator = arch_to_network(&arch.layers)?;
    read_weights(&dir.join("weights.bin"), &mut generator)?;
    let mut discriminator = arch_to_network(&echo.discriminator_layers)?;
    read_weights(&dir.join("disc.bin"), &mut discriminator)?;
    let mut teacher_g = arch_to_network(&arch.layers)?;
    read_weights(&dir.join("teacher_g.bin"), &mut teacher_g)?;
    let mut teacher_d = arch_to_network(&echo.discriminator_layers)?;
    read_weights(&dir.join("teacher_d.bin"), &mut teacher_d)?;

    let restore_adam = |net: &mut Network, path: &Path, step: u64| -> Result<()> {
        let mut refs: Vec<&mut Tensor> = Vec::new();
        for l in net.layers.iter_mut() {
            let has_weights = !l.state.weights.is_empty();
            for t in l.state.adam_m.iter_mut().chain(l.state.adam_v.iter_mut()) {
                refs.push(t);
            }
            if has_weights {
                l.state.step = step;
            }
        }
        read_tensor_list(path, &mut refs)
    };
    restore_adam(&mut generator, &dir.join("adam_g.bin"), echo.adam_step_g)?;
    restore_adam(&mut discriminator, &dir.join("adam_d.bin"), echo.adam_step_d)?;

    Ok(GanCheckpoint {
        generator,
        discriminator,
        teacher: EmaTeacher {
            generator: teacher_g,
            discriminator: teacher_d,
        },
        config: echo.gan,
        kd: echo.kd,
        epoch: echo.epoch,
    })
}

/// Outcome of a training run.
pub struct TrainSummary {
    pub events: Vec<TrainEvent>,
    pub checkpoint: GanCheckpoint,
}

/// Trains for `config.epochs` epochs (continuing from `resume` when given),
/// appending one mean-loss row per epoch to `losses.csv` in `out_dir` and
/// writing the checkpoint files there at the end.
///
/// Epoch RNG streams are derived from (seed, epoch index), so a resumed run
/// replays exactly the epochs a longer fresh run would have executed.
pub fn train(
    dataset: &[(DepthImage, EmotionLabel)],
    config: &GanConfig,
    kd: &KdConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    kd.validate()?;
    let mut per_class = [0usize; NUM_CLASSES];
    for (_, l) in dataset {
        per_class[l.index()] += 1;
    }
    for (c, &count) in per_class.iter().enumerate() {
        if count < config.batch_size {
            return Err(Error::Data(format!(
                "class `{}` has {count} samples; training needs >= batch_size ({}) per class",
                EmotionLabel::from_index(c)?,
                config.batch_size
            )));
        }
    }

    let (mut gen, mut disc, mut teacher, epoch_start) = match resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            (ckpt.generator, ckpt.discriminator, ckpt.teacher, ckpt.epoch)
        }
        None => {
            let mut rng = StdRng::seed_from_u64(derive_seed(config.seed, 0x6A11));
            let gen = build_generator(config, &mut rng)?;
            let disc = build_discriminator(config, &mut rng)?;
            let teacher = EmaTeacher::from_students(&gen, &disc);
            (gen, disc, teacher, 0)
        }
    };

    // Pre-normalize the dataset once.
    let tensors: Vec<(Tensor, EmotionLabel)> = dataset
        .iter()
        .map(|(img, l)| {
            let t = img.normalize();
            let s = t.shape().to_vec();
            (t.reshape(&[1, s[0], s[1], s[2]]).expect("rank-3 to rank-4"), *l)
        })
        .collect::<Vec<_>>();
    let n = tensors.len();
    let steps_per_epoch = n / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Data(format!(
            "dataset of {n} images too small for batch size {}",
            config.batch_size
        )));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let losses_path = out_dir.join("losses.csv");
    let mut losses = std::io::BufWriter::new(
        std::fs::File::create(&losses_path).map_err(|e| Error::io(losses_path.display().to_string(), e))?,
    );
    writeln!(losses, "epoch,d_loss,g_adv,kd_g,kd_d")
        .map_err(|e| Error::io(losses_path.display().to_string(), e))?;

    let (h, w) = (config.image_size, config.image_size);
    let batch_elems = config.batch_size * h * w;
    let mut events = Vec::with_capacity(config.epochs);

    for epoch in epoch_start..epoch_start + config.epochs {
        let mut rng = StdRng::seed_from_u64(derive_seed(config.seed, 0xE70C ^ (epoch as u64) << 16));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        for step in 0..steps_per_epoch {
            let batch_idx = &order[step * config.batch_size..(step + 1) * config.batch_size];
            let mut batch_data = Vec::with_capacity(batch_elems);
            let mut labels = Vec::with_capacity(config.batch_size);
            for &i in batch_idx {
                batch_data.extend_from_slice(tensors[i].0.data());
                labels.push(tensors[i].1);
            }
            let real = Tensor::from_vec(&[config.batch_size, 1, h, w], batch_data)?;
            let z_batch: Vec<LatentVector> = (0..config.batch_size)
                .map(|_| LatentVector::sample(config.latent_dim, &mut rng))
                .collect();

            let ev = gan_train_step(&mut gen, &mut disc, &mut teacher, &real, &labels, &z_batch, config, kd, epoch)
                .map_err(|e| Error::numeric(format!("epoch {epoch} step {step}"), e.to_string()))?;
            for (s, v) in sums
                .iter_mut()
                .zip([ev.d_loss, ev.g_adv_loss, ev.kd_g_loss, ev.kd_d_loss])
            {
                *s += v;
                if !v.is_finite() || v > 1e4 {
                    return Err(Error::numeric(
                        format!("epoch {epoch} step {step}"),
                        format!("divergence: loss component {v}"),
                    ));
                }
            }
        }
        let k = steps_per_epoch as f64;
        let ev = TrainEvent {
            epoch,
            d_loss: sums[0] / k,
            g_adv_loss: sums[1] / k,
            kd_g_loss: sums[2] / k,
            kd_d_loss: sums[3] / k,
        };
        writeln!(
            losses,
            "{},{:.6},{:.6},{:.6},{:.6}",
            ev.epoch, ev.d_loss, ev.g_adv_loss, ev.kd_g_loss, ev.kd_d_loss
        )
        .map_err(|e| Error::io(losses_path.display().to_string(), e))?;
        events.push(ev);
    }
    losses
        .flush()
        .map_err(|e| Error::io(losses_path.display().to_string(), e))?;

    let ckpt = GanCheckpoint {
        generator: gen,
        discriminator: disc,
        teacher,
        config: config.clone(),
        kd: *kd,
        epoch: epoch_start + config.epochs,
    };
    save_checkpoint(out_dir, &ckpt)?;
    Ok(TrainSummary {
        events,
        checkpoint: ckpt,
    })
}

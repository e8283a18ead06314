//! Dataset ingestion and the procedural fixture: grayscale depth images
//! (8/16-bit PNG or PGM), manifests, bilinear resize, [-1,1] normalization,
//! and a stratified splitter.

use crate::{derive_seed, Error, Result, Tensor};
use rand::prelude::*;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// The three emotion classes used throughout the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Neutral = 0,
    Happy = 1,
    Fear = 2,
}

pub const NUM_CLASSES: usize = 3;
pub const ALL_LABELS: [EmotionLabel; NUM_CLASSES] =
    [EmotionLabel::Neutral, EmotionLabel::Happy, EmotionLabel::Fear];

impl EmotionLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Fear => "fear",
        }
    }

    pub fn from_index(i: usize) -> Result<EmotionLabel> {
        match i {
            0 => Ok(EmotionLabel::Neutral),
            1 => Ok(EmotionLabel::Happy),
            2 => Ok(EmotionLabel::Fear),
            _ => Err(Error::Data(format!("class index {i} out of range (C={NUM_CLASSES})"))),
        }
    }

    pub fn parse(s: &str) -> Result<EmotionLabel> {
        match s {
            "neutral" => Ok(EmotionLabel::Neutral),
            "happy" => Ok(EmotionLabel::Happy),
            "fear" => Ok(EmotionLabel::Fear),
            other => Err(Error::Data(format!("unknown label `{other}`"))),
        }
    }

    pub fn one_hot(self) -> [f32; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.index()] = 1.0;
        v
    }
}

impl std::fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Single-channel depth image with pixels in the canonical [0,1] range.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels in [0,1].
    pub pixels: Vec<f32>,
    /// Bit depth of the source encoding (8 or 16).
    pub source_bit_depth: u8,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, source_bit_depth: u8) -> Result<DepthImage> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                "DepthImage::new",
                format!("{} pixels", width * height),
                format!("{}", pixels.len()),
            ));
        }
        Ok(DepthImage {
            width,
            height,
            pixels,
            source_bit_depth,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> DepthImage {
        DepthImage {
            width,
            height,
            pixels: vec![value; width * height],
            source_bit_depth: 8,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Converts [0,1] pixels to a [-1,1] tensor shaped [1, H, W].
    pub fn normalize(&self) -> Tensor {
        let data: Vec<f32> = self.pixels.iter().map(|&p| 2.0 * p - 1.0).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("pixel count matches")
    }

    /// Inverse of [`DepthImage::normalize`]: [-1,1] tensor data back to [0,1].
    pub fn denormalize(tensor: &Tensor, width: usize, height: usize) -> Result<DepthImage> {
        if tensor.len() != width * height {
            return Err(Error::shape(
                "denormalize",
                format!("{} elements", width * height),
                format!("{}", tensor.len()),
            ));
        }
        let pixels: Vec<f32> = tensor
            .data()
            .iter()
            .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect();
        DepthImage::new(width, height, pixels, 8)
    }

    /// Bilinear resize with corner-aligned sampling.
    pub fn resize(&self, w: usize, h: usize) -> DepthImage {
        if w == self.width && h == self.height {
            return self.clone();
        }
        let sx = if w > 1 {
            (self.width - 1) as f64 / (w - 1) as f64
        } else {
            0.0
        };
        let sy = if h > 1 {
            (self.height - 1) as f64 / (h - 1) as f64
        } else {
            0.0
        };
        let mut pixels = vec![0.0f32; w * h];
        for oy in 0..h {
            let fy = oy as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..w {
                let fx = ox as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let top = self.at(x0, y0) as f64 * (1.0 - wx) + self.at(x1, y0) as f64 * wx;
                let bot = self.at(x0, y1) as f64 * (1.0 - wx) + self.at(x1, y1) as f64 * wx;
                pixels[oy * w + ox] = (top * (1.0 - wy) + bot * wy) as f32;
            }
        }
        DepthImage {
            width: w,
            height: h,
            pixels,
            source_bit_depth: self.source_bit_depth,
        }
    }
}

/// Loads an 8- or 16-bit single-channel PNG or PGM, scaling pixels to [0,1]
/// by the source max value.
pub fn load_image(path: &Path) -> Result<DepthImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "pgm" => load_pgm(path),
        _ => load_png(path),
    }
}

fn load_png(path: &Path) -> Result<DepthImage> {
    let img = image::open(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let pixels = g.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
            DepthImage::new(w as usize, h as usize, pixels, 8)
        }
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            let pixels = g.pixels().map(|p| p.0[0] as f32 / 65535.0).collect();
            DepthImage::new(w as usize, h as usize, pixels, 16)
        }
        other => Err(Error::format(
            path.display().to_string(),
            format!(
                "expected single-channel grayscale, got {} channels",
                other.color().channel_count()
            ),
        )),
    }
}

fn load_pgm(path: &Path) -> Result<DepthImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |m: &str| Error::format(path.display().to_string(), m.to_string());
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(fail("not a binary PGM (P5)"));
    }
    // Header: P5 <width> <height> <maxval>, then one whitespace byte.
    let mut fields = Vec::new();
    let mut i = 2usize;
    while fields.len() < 3 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(fail("truncated PGM header"));
        }
        let text = std::str::from_utf8(&bytes[start..i]).map_err(|_| fail("non-ascii PGM header"))?;
        fields.push(text.parse::<usize>().map_err(|_| fail("bad PGM header field"))?);
    }
    i += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(fail("PGM maxval out of range"));
    }
    let bit16 = maxval > 255;
    let need = w * h * if bit16 { 2 } else { 1 };
    if bytes.len() < i + need {
        return Err(fail("PGM pixel data truncated"));
    }
    let mut pixels = Vec::with_capacity(w * h);
    if bit16 {
        for p in 0..w * h {
            // 16-bit PGM is big-endian.
            let v = u16::from_be_bytes([bytes[i + 2 * p], bytes[i + 2 * p + 1]]);
            pixels.push(v as f32 / maxval as f32);
        }
    } else {
        for p in 0..w * h {
            pixels.push(bytes[i + p] as f32 / maxval as f32);
        }
    }
    DepthImage::new(w, h, pixels, if bit16 { 16 } else { 8 })
}

/// Saves as grayscale PNG at the image's source bit depth.
pub fn save_png(path: &Path, image: &DepthImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    match image.source_bit_depth {
        16 => {
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
                image.width as u32,
                image.height as u32,
            );
            for (x, y, p) in buf.enumerate_pixels_mut() {
                let v = image.at(x as usize, y as usize).clamp(0.0, 1.0);
                p.0[0] = (v * 65535.0).round() as u16;
            }
            buf.save(path)
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
        }
        _ => {
            let mut buf =
                image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(image.width as u32, image.height as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                let v = image.at(x as usize, y as usize).clamp(0.0, 1.0);
                p.0[0] = (v * 255.0).round() as u8;
            }
            buf.save(path)
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
        }
    }
}

/// Saves as binary PGM (P5) at the image's source bit depth.
pub fn save_pgm(path: &Path, image: &DepthImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let maxval: u32 = if image.source_bit_depth == 16 { 65535 } else { 255 };
    let mut out: Vec<u8> = format!("P5\n{} {}\n{}\n", image.width, image.height, maxval).into_bytes();
    for &p in &image.pixels {
        let v = (p.clamp(0.0, 1.0) * maxval as f32).round() as u32;
        if maxval > 255 {
            out.extend_from_slice(&(v as u16).to_be_bytes());
        } else {
            out.push(v as u8);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// One dataset record: image path plus its label.
#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: EmotionLabel,
}

/// Dataset manifest: `path,label` CSV rows relative to a root.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 && line.trim() == "path,label" {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (p, l) = line.rsplit_once(',').ok_or_else(|| {
                Error::format(
                    path.display().to_string(),
                    format!("line {}: expected `path,label`", lineno + 1),
                )
            })?;
            records.push(ManifestRecord {
                path: PathBuf::from(p),
                label: EmotionLabel::parse(l.trim())?,
            });
        }
        Ok(Manifest { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("path,label\n");
        for r in &self.records {
            out.push_str(&format!("{},{}\n", r.path.display(), r.label));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Loads every image, resized to `size`×`size` when given.
    pub fn load_images(&self, size: Option<usize>) -> Result<Vec<(DepthImage, EmotionLabel)>> {
        let mut out = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let full = self.resolve(r);
            let mut img = load_image(&full)?;
            if let Some(s) = size {
                if img.width != s || img.height != s {
                    img = img.resize(s, s);
                }
            }
            out.push((img, r.label));
        }
        Ok(out)
    }
}

/// Stratified split: per class, seeded shuffle then exact floor split.
pub fn split(manifest: &Manifest, ratio: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config("split.ratio", format!("must be in [0,1], got {ratio}")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in ALL_LABELS {
        let mut idx: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "class `{label}` has {} samples; need >= 2 to split",
                idx.len()
            )));
        }
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0x59 ^ ((label.index() as u64) << 8)));
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * ratio).floor() as usize;
        for (pos, &i) in idx.iter().enumerate() {
            if pos < n_train {
                train.push(manifest.records[i].clone());
            } else {
                test.push(manifest.records[i].clone());
            }
        }
    }
    Ok((
        Manifest {
            root: manifest.root.clone(),
            records: train,
        },
        Manifest {
            root: manifest.root.clone(),
            records: test,
        },
    ))
}

/// Configuration for the procedural fixture dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Stddev of additive Gaussian pixel noise.
    pub noise_amplitude: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            n_per_class: 400,
            image_size: 64,
            seed: 42,
            noise_amplitude: 0.005,
        }
    }
}

/// Renders one procedural depth face. Larger pixel values are closer to the
/// sensor; the background sits near 0.08.
pub fn fixture_face(label: EmotionLabel, size: usize, rng: &mut StdRng, noise: f64) -> DepthImage {
    let s = size as f64;
    let jitter = |rng: &mut StdRng, scale: f64| rng.gen_range(-scale..scale);

    // Head dome with per-sample jitter of position, radii and orientation.
    // The jitter is deliberately generous: translation, scale and rotation
    // are what make the pixel-space manifold nonlinear.
    let cx = 0.5 + jitter(rng, 0.10);
    let cy = 0.52 + jitter(rng, 0.08);
    let rx = 0.40 + jitter(rng, 0.07);
    let ry = 0.47 + jitter(rng, 0.07);
    let dome_height = 0.62 + jitter(rng, 0.10);
    let tilt = jitter(rng, 0.35);
    let (tilt_cos, tilt_sin) = (tilt.cos(), tilt.sin());

    // Facial parts relative to the head center.
    let nose_dx = jitter(rng, 0.015);
    let nose_dy = 0.02 + jitter(rng, 0.015);
    let nose_r = 0.055 + jitter(rng, 0.012);
    let eye_off_x = 0.13 + jitter(rng, 0.02);
    let eye_off_y = -0.12 + jitter(rng, 0.02);
    let eye_r = 0.05 + jitter(rng, 0.01);
    let mouth_dy = 0.22 + jitter(rng, 0.02);
    let mouth_w = 0.16 + jitter(rng, 0.025);

    let noise_dist = Normal::new(0.0, noise.max(1e-12)).expect("valid noise stddev");
    let mut pixels = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let v = (y as f64 + 0.5) / s;
            // Face-local coordinates: translate to the head center, rotate
            // by the tilt.
            let du = u - cx;
            let dv = v - cy;
            let fu = tilt_cos * du + tilt_sin * dv;
            let fv = -tilt_sin * du + tilt_cos * dv;
            let mut depth = 0.08;

            let ex = fu / rx;
            let ey = fv / ry;
            let e2 = ex * ex + ey * ey;
            if e2 < 1.0 {
                depth += dome_height * (1.0 - e2).sqrt();

                // Nose bump.
                let nd = ((fu - nose_dx) / nose_r).powi(2)
                    + ((fv - nose_dy) / (nose_r * 1.4)).powi(2);
                depth += 0.18 * (-nd).exp();

                // Eye socket depressions.
                for side in [-1.0f64, 1.0] {
                    let ed = ((fu - side * eye_off_x) / eye_r).powi(2)
                        + ((fv - eye_off_y) / (eye_r * 0.8)).powi(2);
                    depth -= 0.14 * (-ed).exp();
                }

                // Class-dependent mouth.
                let mx = fu;
                let my = fv - mouth_dy;
                match label {
                    EmotionLabel::Neutral => {
                        // Flat bar.
                        if mx.abs() < mouth_w && my.abs() < 0.022 {
                            depth -= 0.20;
                        }
                    }
                    EmotionLabel::Happy => {
                        // Upward arc.
                        let arc = 0.55 * (mx / mouth_w).powi(2) - 0.035;
                        if mx.abs() < mouth_w && (my - arc).abs() < 0.024 {
                            depth -= 0.20;
                        }
                    }
                    EmotionLabel::Fear => {
                        // Open ellipse (gaping mouth).
                        let md = (mx / (mouth_w * 0.65)).powi(2) + (my / 0.075).powi(2);
                        if md < 1.0 {
                            depth -= 0.26 * (1.0 - md).sqrt().max(0.35);
                        }
                    }
                }
            }

            depth += noise_dist.sample(rng);
            pixels[y * size + x] = depth.clamp(0.0, 1.0) as f32;
        }
    }
    DepthImage {
        width: size,
        height: size,
        pixels,
        source_bit_depth: 8,
    }
}

/// Writes `<label>/<index>.png` files plus `manifest.csv` under `dir`.
pub fn fixture_generate(config: &FixtureConfig, dir: &Path) -> Result<Manifest> {
    if config.n_per_class < 1 {
        return Err(Error::config("fixture.n_per_class", "must be >= 1"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut records = Vec::new();
    for label in ALL_LABELS {
        let mut rng = StdRng::seed_from_u64(derive_seed(config.seed, 0xF1 ^ ((label.index() as u64) << 8)));
        for i in 0..config.n_per_class {
            let img = fixture_face(label, config.image_size, &mut rng, config.noise_amplitude);
            let rel = PathBuf::from(format!("{}/{:04}.png", label, i));
            save_png(&dir.join(&rel), &img)?;
            records.push(ManifestRecord { path: rel, label });
        }
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

//! SSIM with an 11×11 Gaussian window (σ=1.5) and PSNR.

use crate::dataio::DepthImage;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub l: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            l: 1.0,
        }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Gaussian-blurred valid-region maps used by SSIM: separable convolution,
/// output (H−w+1)×(W−w+1).
pub struct SsimPrep {
    pub w: usize,
    pub h: usize,
    pub mu: Vec<f64>,
    pub xx: Vec<f64>,
}

fn blur_valid(data: &[f64], width: usize, height: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let kw = kernel.len();
    let ow = width + 1 - kw;
    let oh = height + 1 - kw;
    // horizontal pass
    let mut tmp = vec![0.0f64; ow * height];
    for y in 0..height {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                acc += k * data[y * width + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                acc += k * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

impl SsimPrep {
    pub fn new(img: &DepthImage, config: &SsimConfig) -> Result<SsimPrep> {
        if img.width < config.window || img.height < config.window {
            return Err(Error::Data(format!(
                "image {}x{} smaller than SSIM window {}",
                img.width, img.height, config.window
            )));
        }
        let kernel = gaussian_kernel(config.window, config.sigma);
        let data: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
        let sq: Vec<f64> = data.iter().map(|&p| p * p).collect();
        let (mu, w, h) = blur_valid(&data, img.width, img.height, &kernel);
        let (xx, _, _) = blur_valid(&sq, img.width, img.height, &kernel);
        Ok(SsimPrep { w, h, mu, xx })
    }
}

/// Mean local SSIM between two equally sized images.
pub fn ssim(a: &DepthImage, b: &DepthImage, config: &SsimConfig) -> Result<f64> {
    let pa = SsimPrep::new(a, config)?;
    let pb = SsimPrep::new(b, config)?;
    ssim_prepped(a, &pa, b, &pb, config)
}

/// SSIM using precomputed per-image maps (for nearest-neighbor searches).
pub fn ssim_prepped(
    a: &DepthImage,
    pa: &SsimPrep,
    b: &DepthImage,
    pb: &SsimPrep,
    config: &SsimConfig,
) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            "ssim",
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let kernel = gaussian_kernel(config.window, config.sigma);
    let prod: Vec<f64> = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(&x, &y)| x as f64 * y as f64)
        .collect();
    let (xy, w, h) = blur_valid(&prod, a.width, a.height, &kernel);
    debug_assert_eq!((w, h), (pa.w, pa.h));

    let c1 = (config.k1 * config.l).powi(2);
    let c2 = (config.k2 * config.l).powi(2);
    let mut acc = 0.0f64;
    for i in 0..w * h {
        let mu_a = pa.mu[i];
        let mu_b = pb.mu[i];
        let var_a = pa.xx[i] - mu_a * mu_a;
        let var_b = pb.xx[i] - mu_b * mu_b;
        let cov = xy[i] - mu_a * mu_b;
        let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        acc += s;
    }
    Ok(acc / (w * h) as f64)
}

/// PSNR sentinel reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// 10·log10(max² / MSE) in dB; identical images return the 99 dB sentinel.
pub fn psnr(a: &DepthImage, b: &DepthImage, max_val: f64) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            "psnr",
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let mse: f64 = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn random_image(size: usize, seed: u64) -> DepthImage {
        let mut rng = StdRng::seed_from_u64(seed);
        // smooth-ish image with contrast
        let pixels: Vec<f32> = (0..size * size)
            .map(|i| {
                let x = (i % size) as f32 / size as f32;
                let y = (i / size) as f32 / size as f32;
                (0.5 + 0.4 * (6.0 * x).sin() * (5.0 * y).cos() + rng.gen_range(-0.05..0.05))
                    .clamp(0.0, 1.0)
            })
            .collect();
        DepthImage::new(size, size, pixels, 8).unwrap()
    }

    /// Direct windowed double-loop SSIM used as the oracle.
    fn ssim_naive(a: &DepthImage, b: &DepthImage, config: &SsimConfig) -> f64 {
        let kernel = gaussian_kernel(config.window, config.sigma);
        let c1 = (config.k1 * config.l).powi(2);
        let c2 = (config.k2 * config.l).powi(2);
        let ow = a.width + 1 - config.window;
        let oh = a.height + 1 - config.window;
        let mut acc = 0.0;
        for wy in 0..oh {
            for wx in 0..ow {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for j in 0..config.window {
                    for i in 0..config.window {
                        let wgt = kernel[j] * kernel[i];
                        let pa = a.at(wx + i, wy + j) as f64;
                        let pb = b.at(wx + i, wy + j) as f64;
                        mu_a += wgt * pa;
                        mu_b += wgt * pb;
                        aa += wgt * pa * pa;
                        bb += wgt * pb * pb;
                        ab += wgt * pa * pb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            }
        }
        acc / (ow * oh) as f64
    }

    #[test]
    fn self_ssim_is_one() {
        let img = random_image(32, 1);
        let s = ssim(&img, &img, &SsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(x,x) = {s}");
    }

    #[test]
    fn inverted_high_contrast_drops_below_half() {
        let img = random_image(32, 2);
        let inv = DepthImage::new(32, 32, img.pixels.iter().map(|&p| 1.0 - p).collect(), 8).unwrap();
        let cfg = SsimConfig::default();
        let s = ssim(&img, &inv, &cfg).unwrap();
        assert!(s < 0.5, "ssim(x, 1-x) = {s}");
        let oracle = ssim_naive(&img, &inv, &cfg);
        assert!((s - oracle).abs() < 1e-9, "{s} vs oracle {oracle}");
    }

    #[test]
    fn matches_naive_oracle_on_random_pairs() {
        let cfg = SsimConfig::default();
        for seed in 0..5 {
            let a = random_image(20, seed);
            let b = random_image(20, seed + 100);
            let fast = ssim(&a, &b, &cfg).unwrap();
            let slow = ssim_naive(&a, &b, &cfg);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn constant_images_match_closed_form() {
        // σ terms vanish; SSIM = (2ab+C1)·C2 / ((a²+b²+C1)·C2)
        let cfg = SsimConfig::default();
        let a = 0.6f64;
        let b = 0.4f64;
        let ia = DepthImage::constant(16, 16, a as f32);
        let ib = DepthImage::constant(16, 16, b as f32);
        let s = ssim(&ia, &ib, &cfg).unwrap();
        let a = ia.pixels[0] as f64;
        let b = ib.pixels[0] as f64;
        let c1 = (cfg.k1 * cfg.l).powi(2);
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((s - expected).abs() < 1e-9, "{s} vs {expected}");
    }

    #[test]
    fn ssim_symmetry_and_upper_bound() {
        let a = random_image(24, 5);
        let b = random_image(24, 6);
        let cfg = SsimConfig::default();
        let ab = ssim(&a, &b, &cfg).unwrap();
        let ba = ssim(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab <= 1.0);
    }

    #[test]
    fn psnr_cases() {
        let img = random_image(16, 9);
        assert_eq!(psnr(&img, &img, 1.0).unwrap(), PSNR_CAP_DB);

        // uniform |diff| = 16 on 8-bit range: 10·log10(255²/256) ≈ 24.05 dB
        let a = DepthImage::constant(8, 8, 100.0 / 255.0);
        let b = DepthImage::constant(8, 8, 116.0 / 255.0);
        let p = psnr(&a, &b, 1.0).unwrap();
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((p - expected).abs() < 0.01, "psnr {p}, expected {expected}");

        // doubling MSE lowers PSNR by 10·log10(2)
        let c = DepthImage::new(8, 8, {
            let mut v = vec![100.0 / 255.0; 64];
            // half the pixels differ by d, the rest by d·sqrt(3) -> MSE doubles
            for (i, p) in v.iter_mut().enumerate() {
                let d = 16.0 / 255.0;
                *p += if i % 2 == 0 { d } else { d * (3.0f32).sqrt() };
            }
            v
        }, 8)
        .unwrap();
        let p2 = psnr(&a, &c, 1.0).unwrap();
        assert!((p - p2 - 10.0 * 2.0f64.log10()).abs() < 0.02, "{p} vs {p2}");
    }
}

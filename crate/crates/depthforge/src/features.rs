//! Handcrafted depth-image descriptors: HOG, uniform LBP histogram, Sobel
//! edge-magnitude histogram and intensity histogram, fused into one composite
//! feature vector.
//!
//! The [`reference`] submodule keeps naive double-loop implementations of the
//! same definitions; the fast paths must match them (bitwise for LBP codes).

use crate::dataio::DepthImage;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// HOG cell side in pixels.
    pub hog_cell: usize,
    /// Unsigned orientation bins.
    pub hog_bins: usize,
    /// Block side in cells (blocks slide with stride 1 cell).
    pub hog_block: usize,
    /// LBP sampling points.
    pub lbp_points: usize,
    /// LBP sampling radius.
    pub lbp_radius: f64,
    pub sobel_bins: usize,
    pub intensity_bins: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            hog_cell: 8,
            hog_bins: 9,
            hog_block: 2,
            lbp_points: 8,
            lbp_radius: 1.0,
            sobel_bins: 64,
            intensity_bins: 64,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.hog_bins < 2 || self.sobel_bins < 2 || self.intensity_bins < 2 {
            return Err(Error::config("features", "histogram bin counts must be >= 2"));
        }
        if self.hog_cell == 0 || image_size % self.hog_cell != 0 {
            return Err(Error::config(
                "features.hog_cell",
                format!("cell {} must divide image size {}", self.hog_cell, image_size),
            ));
        }
        if image_size / self.hog_cell < self.hog_block {
            return Err(Error::config(
                "features.hog_block",
                format!("image too small for a {}x{}-cell block", self.hog_block, self.hog_block),
            ));
        }
        Ok(())
    }

    /// Number of uniform LBP bins (58 uniform patterns + 1 catch-all for P=8).
    pub fn lbp_bins(&self) -> usize {
        self.lbp_points * (self.lbp_points - 1) + 3
    }

    pub fn hog_len(&self, image_size: usize) -> usize {
        let cells = image_size / self.hog_cell;
        let blocks = cells + 1 - self.hog_block;
        blocks * blocks * self.hog_block * self.hog_block * self.hog_bins
    }

    pub fn fused_len(&self, image_size: usize) -> usize {
        self.hog_len(image_size) + self.lbp_bins() + self.sobel_bins + self.intensity_bins
    }
}

/// Fused feature vector with named segment spans.
#[derive(Debug, Clone)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    /// (name, offset, len) triples partitioning `values`.
    pub spans: Vec<(String, usize, usize)>,
}

impl FeatureVector {
    pub fn segment(&self, name: &str) -> Option<&[f32]> {
        self.spans
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|&(_, off, len)| &self.values[off..off + len])
    }
}

/// Central-difference gradient with clamped indices (one-sided at borders).
#[inline]
fn gradient_at(img: &DepthImage, x: usize, y: usize) -> (f64, f64) {
    let xm = x.saturating_sub(1);
    let xp = (x + 1).min(img.width - 1);
    let ym = y.saturating_sub(1);
    let yp = (y + 1).min(img.height - 1);
    let gx = img.at(xp, y) as f64 - img.at(xm, y) as f64;
    let gy = img.at(x, yp) as f64 - img.at(x, ym) as f64;
    (gx, gy)
}

/// Unsigned orientation in [0, 180) degrees.
#[inline]
fn unsigned_angle(gx: f64, gy: f64) -> f64 {
    let mut theta = gy.atan2(gx).to_degrees();
    if theta < 0.0 {
        theta += 180.0;
    }
    if theta >= 180.0 {
        theta -= 180.0;
    }
    theta
}

/// Dalal–Triggs HOG: per-cell orientation histograms with bilinear
/// orientation voting (bin centers at i·180/bins), then L2-normalized
/// overlapping blocks.
pub fn hog(image: &DepthImage, config: &FeatureConfig) -> Result<Vec<f32>> {
    if image.width != image.height {
        return Err(Error::Data(format!(
            "hog expects square images, got {}x{}",
            image.width, image.height
        )));
    }
    config.validate(image.width)?;
    let cell = config.hog_cell;
    let bins = config.hog_bins;
    let cells = image.width / cell;

    // Per-cell orientation histograms.
    let mut cell_hist = vec![0.0f64; cells * cells * bins];
    for y in 0..image.height {
        for x in 0..image.width {
            let (gx, gy) = gradient_at(image, x, y);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let theta = unsigned_angle(gx, gy);
            let o = theta * bins as f64 / 180.0;
            let lo = o.floor();
            let frac = o - lo;
            let lo_bin = (lo as usize) % bins;
            let hi_bin = (lo_bin + 1) % bins;
            let c = (y / cell) * cells + (x / cell);
            cell_hist[c * bins + lo_bin] += mag * (1.0 - frac);
            cell_hist[c * bins + hi_bin] += mag * frac;
        }
    }

    // Overlapping blocks, L2 normalization with epsilon guard.
    let b = config.hog_block;
    let blocks = cells + 1 - b;
    let eps = 1e-6f64;
    let mut out = Vec::with_capacity(blocks * blocks * b * b * bins);
    for by in 0..blocks {
        for bx in 0..blocks {
            let mut v = Vec::with_capacity(b * b * bins);
            for cy in 0..b {
                for cx in 0..b {
                    let c = (by + cy) * cells + (bx + cx);
                    v.extend_from_slice(&cell_hist[c * bins..(c + 1) * bins]);
                }
            }
            let norm = (v.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            out.extend(v.iter().map(|&x| (x / norm) as f32));
        }
    }
    Ok(out)
}

/// The LBP sampling offsets (dx, dy) for P points at radius R, with
/// near-integer coordinates snapped so cardinal neighbors are exact reads.
pub fn lbp_offsets(points: usize, radius: f64) -> Vec<(f64, f64)> {
    (0..points)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / points as f64;
            let snap = |v: f64| {
                if (v - v.round()).abs() < 1e-6 {
                    v.round()
                } else {
                    v
                }
            };
            (snap(radius * angle.cos()), snap(radius * angle.sin()))
        })
        .collect()
}

/// Bilinear read of the *centered* neighborhood (pixel − center) at
/// (x+dx, y+dy). Interpolating differences keeps flat regions exactly zero;
/// integer offsets are exact pixel reads.
#[inline]
fn sample_diff(img: &DepthImage, x: usize, y: usize, dx: f64, dy: f64, center: f64) -> f64 {
    if dx.fract() == 0.0 && dy.fract() == 0.0 {
        let sx = (x as isize + dx as isize) as usize;
        let sy = (y as isize + dy as isize) as usize;
        return img.at(sx, sy) as f64 - center;
    }
    let fx = x as f64 + dx;
    let fy = y as f64 + dy;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let p00 = img.at(x0, y0) as f64 - center;
    let p10 = img.at(x0 + 1, y0) as f64 - center;
    let p01 = img.at(x0, y0 + 1) as f64 - center;
    let p11 = img.at(x0 + 1, y0 + 1) as f64 - center;
    (1.0 - tx) * (1.0 - ty) * p00 + tx * (1.0 - ty) * p10 + (1.0 - tx) * ty * p01 + tx * ty * p11
}

/// Number of 0↔1 transitions around the circular code.
fn circular_transitions(code: u8) -> u32 {
    (code ^ code.rotate_right(1)).count_ones()
}

/// Maps each 8-bit code to a bin: uniform codes (≤ 2 transitions) get their
/// own bin in code order, everything else lands in the final catch-all bin.
pub fn uniform_lbp_table() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut next = 0u8;
    for code in 0..=255u8 {
        if circular_transitions(code) <= 2 {
            table[code as usize] = next;
            next += 1;
        } else {
            table[code as usize] = 58;
        }
    }
    debug_assert_eq!(next, 58);
    table
}

/// Raw LBP code at a single interior pixel: bit k set when the sampled
/// neighbor is >= the center.
pub fn lbp_code(img: &DepthImage, x: usize, y: usize, offsets: &[(f64, f64)]) -> u8 {
    let center = img.at(x, y) as f64;
    let mut code = 0u8;
    for (k, &(dx, dy)) in offsets.iter().enumerate() {
        if sample_diff(img, x, y, dx, dy, center) >= 0.0 {
            code |= 1 << k;
        }
    }
    code
}

/// Uniform LBP histogram (59 bins for P=8), L1-normalized over interior pixels.
pub fn lbp_hist(image: &DepthImage, config: &FeatureConfig) -> Result<Vec<f32>> {
    if image.width < 3 || image.height < 3 {
        return Err(Error::Data(format!(
            "lbp needs at least 3x3, got {}x{}",
            image.width, image.height
        )));
    }
    let offsets = lbp_offsets(config.lbp_points, config.lbp_radius);
    let table = uniform_lbp_table();
    let bins = config.lbp_bins();
    let r = config.lbp_radius.ceil() as usize;
    let mut hist = vec![0.0f64; bins];
    let mut count = 0usize;
    for y in r..image.height - r {
        for x in r..image.width - r {
            let code = lbp_code(image, x, y, &offsets);
            hist[table[code as usize] as usize] += 1.0;
            count += 1;
        }
    }
    for h in hist.iter_mut() {
        *h /= count as f64;
    }
    Ok(hist.iter().map(|&h| h as f32).collect())
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// 3×3 Sobel response at (x, y) with replicated borders.
pub fn sobel_at(img: &DepthImage, x: usize, y: usize) -> (f64, f64) {
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (ky, row) in SOBEL_X.iter().enumerate() {
        for (kx, _) in row.iter().enumerate() {
            let sx = (x as isize + kx as isize - 1).clamp(0, img.width as isize - 1) as usize;
            let sy = (y as isize + ky as isize - 1).clamp(0, img.height as isize - 1) as usize;
            let p = img.at(sx, sy) as f64;
            gx += SOBEL_X[ky][kx] * p;
            gy += SOBEL_Y[ky][kx] * p;
        }
    }
    (gx, gy)
}

/// Maximum possible Sobel magnitude for unit dynamic range: each axis peaks
/// at 4, so the joint bound is 4·√2.
pub const SOBEL_MAX_MAGNITUDE: f64 = 5.656854249492381;

/// Histogram of Sobel edge magnitudes normalized by the maximum possible
/// magnitude, L1-normalized.
pub fn sobel_hist(image: &DepthImage, config: &FeatureConfig) -> Result<Vec<f32>> {
    if image.width < 3 || image.height < 3 {
        return Err(Error::Data(format!(
            "sobel needs at least 3x3, got {}x{}",
            image.width, image.height
        )));
    }
    let bins = config.sobel_bins;
    let mut hist = vec![0.0f64; bins];
    for y in 0..image.height {
        for x in 0..image.width {
            let (gx, gy) = sobel_at(image, x, y);
            let mag = (gx * gx + gy * gy).sqrt() / SOBEL_MAX_MAGNITUDE;
            let bin = ((mag * bins as f64) as usize).min(bins - 1);
            hist[bin] += 1.0;
        }
    }
    let count = (image.width * image.height) as f64;
    Ok(hist.iter().map(|&h| (h / count) as f32).collect())
}

/// Equal-width intensity histogram over [0,1], L1-normalized.
pub fn intensity_hist(image: &DepthImage, config: &FeatureConfig) -> Result<Vec<f32>> {
    let bins = config.intensity_bins;
    let mut hist = vec![0.0f64; bins];
    for &p in &image.pixels {
        let bin = ((p as f64 * bins as f64) as usize).min(bins - 1);
        hist[bin] += 1.0;
    }
    let count = image.pixels.len() as f64;
    Ok(hist.iter().map(|&h| (h / count) as f32).collect())
}

/// Concatenates hog ‖ lbp ‖ sobel ‖ intensity with recorded spans.
pub fn fuse(image: &DepthImage, config: &FeatureConfig) -> Result<FeatureVector> {
    let hog_v = hog(image, config)?;
    let lbp_v = lbp_hist(image, config)?;
    let sobel_v = sobel_hist(image, config)?;
    let intensity_v = intensity_hist(image, config)?;

    let mut values = Vec::with_capacity(hog_v.len() + lbp_v.len() + sobel_v.len() + intensity_v.len());
    let mut spans = Vec::with_capacity(4);
    for (name, seg) in [
        ("hog", hog_v),
        ("lbp", lbp_v),
        ("sobel", sobel_v),
        ("intensity", intensity_v),
    ] {
        spans.push((name.to_string(), values.len(), seg.len()));
        values.extend_from_slice(&seg);
    }
    Ok(FeatureVector { values, spans })
}

/// Naive double-loop reference implementations of every descriptor. These are
/// kept as verification oracles: slow, definition-first, and independent of
/// the fast paths above.
pub mod reference {
    use super::*;

    pub fn hog_naive(image: &DepthImage, config: &FeatureConfig) -> Vec<f32> {
        let cell = config.hog_cell;
        let bins = config.hog_bins;
        let cells = image.width / cell;
        let b = config.hog_block;
        let blocks = cells + 1 - b;
        let mut out = Vec::new();
        for by in 0..blocks {
            for bx in 0..blocks {
                // Recompute each cell histogram from scratch, per block.
                let mut v = Vec::new();
                for cy in 0..b {
                    for cx in 0..b {
                        let mut hist = vec![0.0f64; bins];
                        let (cell_x, cell_y) = (bx + cx, by + cy);
                        for py in cell_y * cell..(cell_y + 1) * cell {
                            for px in cell_x * cell..(cell_x + 1) * cell {
                                let xm = px.saturating_sub(1);
                                let xp = (px + 1).min(image.width - 1);
                                let ym = py.saturating_sub(1);
                                let yp = (py + 1).min(image.height - 1);
                                let gx = image.at(xp, py) as f64 - image.at(xm, py) as f64;
                                let gy = image.at(px, yp) as f64 - image.at(px, ym) as f64;
                                let mag = (gx * gx + gy * gy).sqrt();
                                if mag == 0.0 {
                                    continue;
                                }
                                let mut theta = gy.atan2(gx).to_degrees();
                                if theta < 0.0 {
                                    theta += 180.0;
                                }
                                if theta >= 180.0 {
                                    theta -= 180.0;
                                }
                                let o = theta * bins as f64 / 180.0;
                                let lo = o.floor();
                                let frac = o - lo;
                                hist[(lo as usize) % bins] += mag * (1.0 - frac);
                                hist[((lo as usize) + 1) % bins] += mag * frac;
                            }
                        }
                        v.extend_from_slice(&hist);
                    }
                }
                let norm = (v.iter().map(|x| x * x).sum::<f64>() + 1e-6f64 * 1e-6).sqrt();
                out.extend(v.iter().map(|&x| (x / norm) as f32));
            }
        }
        out
    }

    /// Per-pixel LBP codes over the interior, recomputing trig per neighbor.
    pub fn lbp_codes_naive(image: &DepthImage, config: &FeatureConfig) -> Vec<u8> {
        let r = config.lbp_radius.ceil() as usize;
        let mut codes = Vec::new();
        for y in r..image.height - r {
            for x in r..image.width - r {
                let center = image.at(x, y) as f64;
                let mut code = 0u8;
                for k in 0..config.lbp_points {
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / config.lbp_points as f64;
                    let snap = |v: f64| {
                        if (v - v.round()).abs() < 1e-6 {
                            v.round()
                        } else {
                            v
                        }
                    };
                    let dx = snap(config.lbp_radius * angle.cos());
                    let dy = snap(config.lbp_radius * angle.sin());
                    // Interpolate centered taps (pixel − center), matching
                    // the production formulation exactly.
                    let diff = if dx.fract() == 0.0 && dy.fract() == 0.0 {
                        image.at((x as isize + dx as isize) as usize, (y as isize + dy as isize) as usize)
                            as f64
                            - center
                    } else {
                        let fx = x as f64 + dx;
                        let fy = y as f64 + dy;
                        let x0 = fx.floor();
                        let y0 = fy.floor();
                        let tx = fx - x0;
                        let ty = fy - y0;
                        let (x0, y0) = (x0 as usize, y0 as usize);
                        (1.0 - tx) * (1.0 - ty) * (image.at(x0, y0) as f64 - center)
                            + tx * (1.0 - ty) * (image.at(x0 + 1, y0) as f64 - center)
                            + (1.0 - tx) * ty * (image.at(x0, y0 + 1) as f64 - center)
                            + tx * ty * (image.at(x0 + 1, y0 + 1) as f64 - center)
                    };
                    if diff >= 0.0 {
                        code |= 1 << k;
                    }
                }
                codes.push(code);
            }
        }
        codes
    }

    pub fn lbp_hist_naive(image: &DepthImage, config: &FeatureConfig) -> Vec<f32> {
        let codes = lbp_codes_naive(image, config);
        let mut hist = vec![0.0f64; config.lbp_bins()];
        for &code in &codes {
            // Count circular transitions directly.
            let mut transitions = 0;
            for bit in 0..8 {
                let a = (code >> bit) & 1;
                let b = (code >> ((bit + 1) % 8)) & 1;
                if a != b {
                    transitions += 1;
                }
            }
            if transitions <= 2 {
                // Rank of this uniform code among all uniform codes by value.
                let mut rank = 0;
                for c in 0..code {
                    let mut t = 0;
                    for bit in 0..8 {
                        let a = (c >> bit) & 1;
                        let b = (c >> ((bit + 1) % 8)) & 1;
                        if a != b {
                            t += 1;
                        }
                    }
                    if t <= 2 {
                        rank += 1;
                    }
                }
                hist[rank] += 1.0;
            } else {
                hist[58] += 1.0;
            }
        }
        for h in hist.iter_mut() {
            *h /= codes.len() as f64;
        }
        hist.iter().map(|&h| h as f32).collect()
    }

    pub fn sobel_hist_naive(image: &DepthImage, config: &FeatureConfig) -> Vec<f32> {
        let kx: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let bins = config.sobel_bins;
        let mut hist = vec![0.0f64; bins];
        for y in 0..image.height {
            for x in 0..image.width {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for j in 0..3 {
                    for i in 0..3 {
                        let sx = (x as isize + i as isize - 1).clamp(0, image.width as isize - 1) as usize;
                        let sy = (y as isize + j as isize - 1).clamp(0, image.height as isize - 1) as usize;
                        gx += kx[j][i] * image.at(sx, sy) as f64;
                        gy += ky[j][i] * image.at(sx, sy) as f64;
                    }
                }
                let mag = (gx * gx + gy * gy).sqrt() / (32.0f64).sqrt();
                let bin = ((mag * bins as f64) as usize).min(bins - 1);
                hist[bin] += 1.0;
            }
        }
        let count = (image.width * image.height) as f64;
        hist.iter().map(|&h| (h / count) as f32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn random_image(size: usize, rng: &mut StdRng) -> DepthImage {
        let pixels: Vec<f32> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        DepthImage::new(size, size, pixels, 8).unwrap()
    }

    #[test]
    fn flat_image_hog_is_zero() {
        let img = DepthImage::constant(16, 16, 0.4);
        let cfg = FeatureConfig::default();
        let h = hog(&img, &cfg).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_votes_horizontal_gradient_bin() {
        // Left half dark, right half bright: all gradient is in gx → θ = 0
        // → bin 0 gets the mass.
        let mut pixels = vec![0.0f32; 16 * 16];
        for y in 0..16 {
            for x in 8..16 {
                pixels[y * 16 + x] = 1.0;
            }
        }
        let img = DepthImage::new(16, 16, pixels, 8).unwrap();
        let cfg = FeatureConfig::default();
        let h = hog(&img, &cfg).unwrap();
        let bins = cfg.hog_bins;
        let mut per_bin = vec![0.0f64; bins];
        for (i, &v) in h.iter().enumerate() {
            per_bin[i % bins] += v as f64;
        }
        let total: f64 = per_bin.iter().sum();
        assert!(total > 0.0);
        assert!(
            per_bin[0] / total >= 0.8,
            "bin 0 carries {:.3} of the mass",
            per_bin[0] / total
        );
    }

    #[test]
    fn hog_length_64x64() {
        let img = DepthImage::constant(64, 64, 0.0);
        let cfg = FeatureConfig::default();
        let h = hog(&img, &cfg).unwrap();
        assert_eq!(h.len(), 7 * 7 * 4 * 9);
        assert_eq!(h.len(), cfg.hog_len(64));
    }

    #[test]
    fn flat_image_lbp_single_bin() {
        // All neighbors equal the center, ≥ comparison sets all bits →
        // code 255, which is uniform (0 transitions).
        let img = DepthImage::constant(8, 8, 0.3);
        let cfg = FeatureConfig::default();
        let h = lbp_hist(&img, &cfg).unwrap();
        let table = uniform_lbp_table();
        let bin = table[255] as usize;
        assert!((h[bin] - 1.0).abs() < 1e-6);
        let sum: f64 = h.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lbp_gray_shift_invariance() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut img = random_image(12, &mut rng);
        // keep room for the shift so nothing clips
        for p in img.pixels.iter_mut() {
            *p = *p * 0.5 + 0.1;
        }
        let cfg = FeatureConfig::default();
        let h1 = lbp_hist(&img, &cfg).unwrap();
        let shifted = DepthImage::new(
            12,
            12,
            img.pixels.iter().map(|&p| p + 0.25).collect(),
            8,
        )
        .unwrap();
        let h2 = lbp_hist(&shifted, &cfg).unwrap();
        // Shift is exact in f32 here (0.25 is a power of two), so the
        // comparisons and therefore the histogram are unchanged.
        assert_eq!(h1, h2);
    }

    #[test]
    fn flat_image_sobel_mass_in_bin_zero() {
        let img = DepthImage::constant(8, 8, 0.9);
        let cfg = FeatureConfig::default();
        let h = sobel_hist(&img, &cfg).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sobel_step_matches_hand_computation() {
        // 5x5, columns [0,0,1,1,1]: gx = 4 at x∈{1,2}, 0 elsewhere;
        // normalized magnitude 4/(4√2) = 1/√2 → bin floor(64/√2) = 45.
        let mut pixels = vec![0.0f32; 25];
        for y in 0..5 {
            for x in 2..5 {
                pixels[y * 5 + x] = 1.0;
            }
        }
        let img = DepthImage::new(5, 5, pixels, 8).unwrap();
        let (gx, gy) = sobel_at(&img, 1, 2);
        assert_eq!(gx, 4.0);
        assert_eq!(gy, 0.0);
        let (gx2, _) = sobel_at(&img, 2, 2);
        assert_eq!(gx2, 4.0);
        let cfg = FeatureConfig::default();
        let h = sobel_hist(&img, &cfg).unwrap();
        // 10 of 25 pixels carry the edge
        assert!((h[45] as f64 - 0.4).abs() < 1e-6, "bin 45 = {}", h[45]);
        let sum: f64 = h.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn intensity_constant_and_two_valued() {
        let cfg = FeatureConfig::default();
        let mid = DepthImage::constant(8, 8, 0.5);
        let h = intensity_hist(&mid, &cfg).unwrap();
        assert!((h[32] - 1.0).abs() < 1e-6);

        let mut pixels = vec![0.1f32; 64];
        for p in pixels.iter_mut().take(32) {
            *p = 0.9;
        }
        let img = DepthImage::new(8, 8, pixels, 8).unwrap();
        let h2 = intensity_hist(&img, &cfg).unwrap();
        let b_low = (0.1f64 * 64.0) as usize;
        let b_high = (0.9f64 * 64.0) as usize;
        assert!((h2[b_low] - 0.5).abs() < 1e-6);
        assert!((h2[b_high] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn fuse_spans_partition_and_length() {
        let img = DepthImage::constant(64, 64, 0.5);
        let cfg = FeatureConfig::default();
        let f = fuse(&img, &cfg).unwrap();
        assert_eq!(f.values.len(), 1764 + 59 + 64 + 64);
        let mut cursor = 0;
        for (_, off, len) in &f.spans {
            assert_eq!(*off, cursor, "spans must be contiguous");
            cursor += len;
        }
        assert_eq!(cursor, f.values.len());
        // determinism
        let f2 = fuse(&img, &cfg).unwrap();
        assert_eq!(f.values, f2.values);
    }

    #[test]
    fn fast_paths_match_naive_references() {
        let cfg = FeatureConfig::default();
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..100 {
            let img = random_image(16, &mut rng);
            // LBP codes bitwise
            let offsets = lbp_offsets(cfg.lbp_points, cfg.lbp_radius);
            let mut fast_codes = Vec::new();
            for y in 1..15 {
                for x in 1..15 {
                    fast_codes.push(lbp_code(&img, x, y, &offsets));
                }
            }
            let naive_codes = reference::lbp_codes_naive(&img, &cfg);
            assert_eq!(fast_codes, naive_codes);
            // histograms within 1e-6
            let h_fast = lbp_hist(&img, &cfg).unwrap();
            let h_naive = reference::lbp_hist_naive(&img, &cfg);
            for (a, b) in h_fast.iter().zip(h_naive.iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
            let s_fast = sobel_hist(&img, &cfg).unwrap();
            let s_naive = reference::sobel_hist_naive(&img, &cfg);
            for (a, b) in s_fast.iter().zip(s_naive.iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
            let g_fast = hog(&img, &cfg).unwrap();
            let g_naive = reference::hog_naive(&img, &cfg);
            assert_eq!(g_fast.len(), g_naive.len());
            for (a, b) in g_fast.iter().zip(g_naive.iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn histograms_sum_to_one(seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let img = random_image(16, &mut rng);
            let cfg = FeatureConfig::default();
            for seg in [lbp_hist(&img, &cfg).unwrap(), sobel_hist(&img, &cfg).unwrap(), intensity_hist(&img, &cfg).unwrap()] {
                let sum: f64 = seg.iter().map(|&v| v as f64).sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
                proptest::prop_assert!(seg.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

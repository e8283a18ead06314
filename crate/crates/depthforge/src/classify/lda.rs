//! Linear discriminant projection (for the class-separability plots) and a
//! 1-D Gaussian kernel density estimate over the projected values.

use super::LabeledFeatures;
use crate::dataio::NUM_CLASSES;
use crate::linalg::{cholesky, jacobi_eigen, solve_lower, solve_lower_transpose, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LdaProjection {
    /// Projected samples, n rows × out_dims.
    pub projected: Vec<Vec<f64>>,
    /// Discriminant directions, out_dims rows × d, unit length.
    pub basis: Vec<Vec<f64>>,
    /// Generalized eigenvalues (between/within variance ratios).
    pub eigenvalues: Vec<f64>,
}

/// Solves the generalized eigenproblem S_w⁻¹·S_b restricted to the span of
/// the class-mean offsets (exact, since rank(S_b) ≤ C−1). S_w is regularized
/// with 1e-6·tr(S_w)/d·I before factorization.
pub fn lda_project(data: &LabeledFeatures, out_dims: usize) -> Result<LdaProjection> {
    let n = data.n;
    let d = data.d;
    if n < 2 {
        return Err(Error::Data("lda_project needs >= 2 samples".to_string()));
    }
    let counts = data.class_counts();
    let present: Vec<usize> = (0..NUM_CLASSES).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::Data("lda_project needs >= 2 classes".to_string()));
    }
    let max_dims = present.len() - 1;
    let out_dims = out_dims.min(max_dims).max(1);

    // Class means and global mean in f64.
    let mut class_mean = vec![vec![0.0f64; d]; NUM_CLASSES];
    let mut global_mean = vec![0.0f64; d];
    for i in 0..n {
        let c = data.labels[i].index();
        for (j, &v) in data.row(i).iter().enumerate() {
            class_mean[c][j] += v as f64;
            global_mean[j] += v as f64;
        }
    }
    for c in 0..NUM_CLASSES {
        if counts[c] > 0 {
            for v in class_mean[c].iter_mut() {
                *v /= counts[c] as f64;
            }
        }
    }
    for v in global_mean.iter_mut() {
        *v /= n as f64;
    }

    // Within-class scatter (upper triangle, then mirrored).
    let mut sw = Mat::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for i in 0..n {
        let c = data.labels[i].index();
        for (j, &v) in data.row(i).iter().enumerate() {
            centered[j] = v as f64 - class_mean[c][j];
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            let row = &mut sw.data[a * d..(a + 1) * d];
            for b in a..d {
                row[b] += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in (a + 1)..d {
            let v = sw.at(a, b);
            sw.set(b, a, v);
        }
    }
    let trace: f64 = (0..d).map(|i| sw.at(i, i)).sum();
    let reg = 1e-6 * trace.max(1e-30) / d as f64;
    for i in 0..d {
        sw.data[i * d + i] += reg;
    }

    let l = cholesky(&sw).map_err(|_| {
        Error::numeric("lda_project", "within-class scatter degenerate even after regularization")
    })?;

    // B columns: sqrt(n_c)·(μ_c − μ); whitened A = L⁻¹B; M = AᵀA.
    let k = present.len();
    let mut a_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &c in &present {
        let b: Vec<f64> = (0..d)
            .map(|j| (counts[c] as f64).sqrt() * (class_mean[c][j] - global_mean[j]))
            .collect();
        a_cols.push(solve_lower(&l, &b));
    }
    let mut m = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = a_cols[i].iter().zip(a_cols[j].iter()).map(|(x, y)| x * y).sum();
            m.set(i, j, dot);
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(&m);

    let mut basis = Vec::with_capacity(out_dims);
    let mut eigenvalues = Vec::with_capacity(out_dims);
    for dim in 0..out_dims {
        // Combine whitened columns by the small eigenvector, then unwhiten.
        let mut av = vec![0.0f64; d];
        for (ci, col) in a_cols.iter().enumerate() {
            let w = eigvecs.at(ci, dim);
            for j in 0..d {
                av[j] += w * col[j];
            }
        }
        let mut w = solve_lower_transpose(&l, &av);
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in w.iter_mut() {
                *v /= norm;
            }
        }
        // Sign convention: largest-magnitude component positive.
        let mut max_abs = 0.0;
        let mut sign = 1.0;
        for &v in &w {
            if v.abs() > max_abs {
                max_abs = v.abs();
                sign = if v >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        for v in w.iter_mut() {
            *v *= sign;
        }
        basis.push(w);
        eigenvalues.push(eigvals[dim].max(0.0));
    }

    let projected: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            basis
                .iter()
                .map(|w| {
                    data.row(i)
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| (v as f64 - global_mean[j]) * w[j])
                        .sum()
                })
                .collect()
        })
        .collect();

    Ok(LdaProjection {
        projected,
        basis,
        eigenvalues,
    })
}

/// A density curve on a fixed grid.
#[derive(Debug, Clone)]
pub struct Kde1d {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

/// Gaussian-kernel density on a 256-point grid spanning the data ± 3
/// bandwidths. Bandwidth is Silverman's rule; zero-variance samples fall
/// back to a fixed minimal bandwidth.
pub fn kde1d(samples: &[f64], bandwidth: Option<f64>) -> Result<Kde1d> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Data(format!("kde1d needs >= 2 samples, got {n}")));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        _ => silverman_bandwidth(samples),
    };

    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = min - 3.0 * h;
    let hi = max + 3.0 * h;
    let points = 256usize;
    let step = (hi - lo) / (points - 1) as f64;
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..points).map(|i| lo + i as f64 * step).collect();
    let density: Vec<f64> = grid
        .iter()
        .map(|&g| {
            samples
                .iter()
                .map(|&x| {
                    let z = (g - x) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(Kde1d {
        grid,
        density,
        bandwidth: h,
    })
}

fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean: f64 = samples.iter().sum::<f64>() / n;
    let var: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-3 // zero-variance fallback
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::EmotionLabel;
    use rand::prelude::*;

    fn lab(i: usize) -> EmotionLabel {
        EmotionLabel::from_index(i).unwrap()
    }

    #[test]
    fn two_gaussians_separated_along_axis_zero() {
        let mut rng = StdRng::seed_from_u64(12);
        let d = 6;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..400 {
            let c = i % 2;
            let mut row: Vec<f32> = (0..d).map(|_| rng.gen_range(-0.3..0.3f32)).collect();
            row[0] += if c == 0 { -3.0 } else { 3.0 };
            rows.push(row);
            labels.push(lab(c));
        }
        let data = LabeledFeatures::from_rows(&rows, labels).unwrap();
        let proj = lda_project(&data, 1).unwrap();
        let cosine = proj.basis[0][0].abs()
            / proj.basis[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(cosine > 0.99, "cosine with e0 = {cosine}");
        assert!(proj.eigenvalues[0] > 1.0);
    }

    #[test]
    fn identical_class_means_give_tiny_eigenvalue() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..120 {
            rows.push(vec![rng.gen_range(-1.0..1.0f32), rng.gen_range(-1.0..1.0f32)]);
            labels.push(lab(i % 3));
        }
        let data = LabeledFeatures::from_rows(&rows, labels).unwrap();
        let proj = lda_project(&data, 1).unwrap();
        // Sample means differ only by chance, so the variance ratio is small.
        assert!(proj.eigenvalues[0] < 10.0);
        let sep = lda_project(&data, 2).unwrap();
        assert_eq!(sep.basis.len(), 2);
    }

    #[test]
    fn one_dimensional_input_projects_to_itself() {
        let rows: Vec<Vec<f32>> = vec![vec![-1.0], vec![-0.9], vec![1.0], vec![1.1]];
        let labels = vec![lab(0), lab(0), lab(1), lab(1)];
        let data = LabeledFeatures::from_rows(&rows, labels).unwrap();
        let proj = lda_project(&data, 1).unwrap();
        // basis is ±1 in 1-D; projection is input minus mean, up to sign
        assert!((proj.basis[0][0].abs() - 1.0).abs() < 1e-9);
        let mean: f64 = rows.iter().map(|r| r[0] as f64).sum::<f64>() / 4.0;
        for (p, r) in proj.projected.iter().zip(rows.iter()) {
            let expected = (r[0] as f64 - mean) * proj.basis[0][0];
            assert!((p[0] - expected).abs() < 1e-9, "{} vs {expected}", p[0]);
        }
    }

    #[test]
    fn kde_integrates_to_one_and_peaks_near_mode() {
        let mut rng = StdRng::seed_from_u64(8);
        let samples: Vec<f64> = (0..1000)
            .map(|_| {
                // Box-Muller standard normal
                let u1: f64 = rng.gen_range(1e-10..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let kde = kde1d(&samples, None).unwrap();
        // trapezoid integral
        let mut integral = 0.0;
        for w in 0..kde.grid.len() - 1 {
            integral += 0.5 * (kde.density[w] + kde.density[w + 1]) * (kde.grid[w + 1] - kde.grid[w]);
        }
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
        // density at 0 within 20% of the standard normal pdf value
        let at_zero = kde
            .grid
            .iter()
            .zip(kde.density.iter())
            .min_by(|a, b| a.0.abs().partial_cmp(&b.0.abs()).unwrap())
            .map(|(_, &d)| d)
            .unwrap();
        assert!((at_zero - 0.3989).abs() / 0.3989 < 0.2, "density(0) = {at_zero}");
    }

    #[test]
    fn kde_degenerate_sample_is_unimodal_at_value() {
        let samples = vec![2.5f64; 50];
        let kde = kde1d(&samples, None).unwrap();
        let max_idx = kde
            .density
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assert!((kde.grid[max_idx] - 2.5).abs() < kde.bandwidth);
        // unimodal: non-decreasing up to the peak, non-increasing after
        for w in 0..max_idx {
            assert!(kde.density[w] <= kde.density[w + 1] + 1e-12);
        }
        for w in max_idx..kde.density.len() - 1 {
            assert!(kde.density[w] >= kde.density[w + 1] - 1e-12);
        }
    }
}

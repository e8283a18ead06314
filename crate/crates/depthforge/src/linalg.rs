//! Small dense f64 linear algebra: symmetric eigendecomposition (cyclic
//! Jacobi), Cholesky, and a PCA fit used as the metric embedding.

use crate::{Error, Result};

/// Row-major f64 matrix.
#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.at(i, j));
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns (eigenvalues, eigenvectors) sorted by descending eigenvalue;
/// eigenvectors are the columns of the returned matrix.
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    assert_eq!(a.rows, a.cols, "jacobi_eigen needs a square matrix");
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Mat::identity(n);

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.at(p, q).abs();
            }
        }
        if off < 1e-14 * (1.0 + m.frobenius_norm()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for i in 0..n {
                    let mip = m.at(i, p);
                    let miq = m.at(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for i in 0..n {
                    let mpi = m.at(p, i);
                    let mqi = m.at(q, i);
                    m.set(p, i, c * mpi - s * mqi);
                    m.set(q, i, s * mpi + c * mqi);
                }
                for i in 0..n {
                    let vip = v.at(i, p);
                    let viq = v.at(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        // Sign convention: largest-magnitude component positive.
        let mut max_abs = 0.0;
        let mut sign = 1.0;
        for r in 0..n {
            let x = v.at(r, old_col);
            if x.abs() > max_abs {
                max_abs = x.abs();
                sign = if x >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        for r in 0..n {
            vectors.set(r, new_col, v.at(r, old_col) * sign);
        }
    }
    (eigenvalues, vectors)
}

/// Symmetric positive-semidefinite square root via Jacobi eigendecomposition,
/// with negative eigenvalues clamped to zero.
pub fn sqrtm_spd(a: &Mat) -> Mat {
    let (vals, vecs) = jacobi_eigen(a);
    let n = a.rows;
    let mut out = Mat::zeros(n, n);
    for k in 0..n {
        let lam = vals[k].max(0.0).sqrt();
        if lam == 0.0 {
            continue;
        }
        for i in 0..n {
            let vik = vecs.at(i, k) * lam;
            if vik == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data[i * n + j] += vik * vecs.at(j, k);
            }
        }
    }
    out
}

/// Cholesky factorization `a = L·Lᵀ` for symmetric positive-definite `a`.
pub fn cholesky(a: &Mat) -> Result<Mat> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.at(i, j);
            for k in 0..j {
                sum -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::numeric(
                        "cholesky",
                        format!("matrix not positive definite at pivot {i} (value {sum:.3e})"),
                    ));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.at(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `L·x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.at(i, k) * x[k];
        }
        x[i] = sum / l.at(i, i);
    }
    x
}

/// Solves `Lᵀ·x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in (i + 1)..n {
            sum -= l.at(k, i) * x[k];
        }
        x[i] = sum / l.at(i, i);
    }
    x
}

/// PCA basis: mean vector plus top-k orthonormal components (rows).
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// k rows of length d, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Projects a sample onto the basis: `c_i = (x - mean)·u_i`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.mean.len());
        self.components
            .iter()
            .map(|u| {
                let mut acc = 0.0;
                for i in 0..x.len() {
                    acc += (x[i] - self.mean[i]) * u[i];
                }
                acc
            })
            .collect()
    }

    /// Reconstructs a sample from coefficients: `x = mean + Σ c_i·u_i`.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.components.len());
        let mut x = self.mean.clone();
        for (c, u) in coeffs.iter().zip(self.components.iter()) {
            for i in 0..x.len() {
                x[i] += c * u[i];
            }
        }
        x
    }
}

/// Fits a PCA basis with up to `k` components on `samples` (each of length d).
///
/// Uses the Gram-matrix route (n×n eigenproblem), which is the cheap side at
/// desk scale where n ≪ d. Components with negligible variance are dropped.
pub fn pca_fit(samples: &[Vec<f64>], k: usize) -> Result<PcaBasis> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Data(format!("pca_fit needs >= 2 samples, got {n}")));
    }
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        assert_eq!(s.len(), d, "pca_fit: inconsistent sample dimension");
        for i in 0..d {
            mean[i] += s[i];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    // Gram matrix of centered samples.
    let centered: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.iter().zip(mean.iter()).map(|(x, m)| x - m).collect())
        .collect();
    let mut gram = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for t in 0..d {
                acc += centered[i][t] * centered[j][t];
            }
            gram.set(i, j, acc);
            gram.set(j, i, acc);
        }
    }

    let (vals, vecs) = jacobi_eigen(&gram);
    let scale = gram.frobenius_norm().max(1.0);
    let mut components = Vec::new();
    let mut eigenvalues = Vec::new();
    for c in 0..n.min(k) {
        let lam = vals[c];
        if lam <= 1e-12 * scale {
            break;
        }
        let inv = 1.0 / lam.sqrt();
        let mut u = vec![0.0; d];
        for (i, ci) in centered.iter().enumerate() {
            let w = vecs.at(i, c) * inv;
            if w == 0.0 {
                continue;
            }
            for t in 0..d {
                u[t] += w * ci[t];
            }
        }
        components.push(u);
        eigenvalues.push(lam / (n as f64 - 1.0));
    }
    if components.is_empty() {
        return Err(Error::numeric("pca_fit", "all samples identical; no principal components"));
    }
    Ok(PcaBasis {
        mean,
        components,
        eigenvalues,
    })
}

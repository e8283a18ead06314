//! Per-layer forward/backward math. Convolutions run through one pair of
//! im2col/col2im kernels plus matrix multiplies, for both directions.

use crate::tensor::{matmul, matmul_nt, matmul_tn_acc};
use crate::Tensor;

/// Output spatial size of a convolution: floor((in + 2·pad − k)/stride) + 1.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution: (in − 1)·stride − 2·pad + k.
pub fn convt_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfolds `x` ([C, H, W], row-major) into `cols` ([C·k·k, OH·OW]).
/// Out-of-bounds taps read as zero.
pub fn im2col(
    x: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(x.len(), channels * h * w);
    debug_assert_eq!(cols.len(), channels * k * k * oh * ow);
    for c in 0..channels {
        let x_plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out_row = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        cols[out_row..out_row + ow].fill(0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        cols[out_row + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x_plane[iy * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `cols` ([C·k·k, OH·OW]) back into `x` ([C, H, W]), accumulating
/// overlapping taps. `x` must be zeroed by the caller.
pub fn col2im(
    cols: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [f32],
) {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(x.len(), channels * h * w);
    debug_assert_eq!(cols.len(), channels * k * k * oh * ow);
    for c in 0..channels {
        let x_plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x_plane[iy * w + ix as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Conv2d forward for one sample. `weight` is [out_ch, in_ch·k·k].
pub fn conv2d_sample(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols_buf: &mut Vec<f32>,
    out: &mut [f32],
) {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    cols_buf.resize(in_ch * k * k * oh * ow, 0.0);
    im2col(x, in_ch, h, w, k, stride, pad, cols_buf);
    matmul(weight, cols_buf, out_ch, in_ch * k * k, oh * ow, out);
    if let Some(b) = bias {
        for (oc, &bv) in b.iter().enumerate() {
            for v in out[oc * oh * ow..(oc + 1) * oh * ow].iter_mut() {
                *v += bv;
            }
        }
    }
}

/// Conv2d backward for one sample: returns nothing, accumulates into
/// `dweight` ([out_ch, in_ch·k·k]) and `dbias`, writes `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_sample(
    x: &[f32],
    dy: &[f32],
    weight: &[f32],
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols_buf: &mut Vec<f32>,
    dcols_buf: &mut Vec<f32>,
    dweight: &mut [f32],
    dbias: Option<&mut [f32]>,
    dx: &mut [f32],
) {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let ckk = in_ch * k * k;
    cols_buf.resize(ckk * oh * ow, 0.0);
    im2col(x, in_ch, h, w, k, stride, pad, cols_buf);
    // dW += dy · colsᵀ  with dy [out_ch, oh·ow], cols [ckk, oh·ow]
    let mut dw_local = vec![0.0f32; out_ch * ckk];
    matmul_nt(dy, cols_buf, out_ch, oh * ow, ckk, &mut dw_local);
    for (acc, v) in dweight.iter_mut().zip(dw_local.iter()) {
        *acc += v;
    }
    if let Some(db) = dbias {
        for oc in 0..out_ch {
            let mut acc = 0.0f64;
            for &v in &dy[oc * oh * ow..(oc + 1) * oh * ow] {
                acc += v as f64;
            }
            db[oc] += acc as f32;
        }
    }
    // dcols = Wᵀ · dy, then dx = col2im(dcols)
    dcols_buf.resize(ckk * oh * ow, 0.0);
    dcols_buf.fill(0.0);
    matmul_tn_acc(weight, dy, ckk, out_ch, oh * ow, dcols_buf);
    dx.fill(0.0);
    col2im(dcols_buf, in_ch, h, w, k, stride, pad, dx);
}

/// ConvTranspose2d forward for one sample. `weight` is [in_ch, out_ch·k·k].
#[allow(clippy::too_many_arguments)]
pub fn convt2d_sample(
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols_buf: &mut Vec<f32>,
    out: &mut [f32],
) {
    let oh = convt_out_size(h, k, stride, pad);
    let ow = convt_out_size(w, k, stride, pad);
    let okk = out_ch * k * k;
    // cols = Wᵀ · x_flat, with W [in_ch, okk], x_flat [in_ch, h·w]
    cols_buf.resize(okk * h * w, 0.0);
    cols_buf.fill(0.0);
    matmul_tn_acc(weight, x, okk, in_ch, h * w, cols_buf);
    out.fill(0.0);
    col2im(cols_buf, out_ch, oh, ow, k, stride, pad, out);
    if let Some(b) = bias {
        for (oc, &bv) in b.iter().enumerate() {
            for v in out[oc * oh * ow..(oc + 1) * oh * ow].iter_mut() {
                *v += bv;
            }
        }
    }
}

/// ConvTranspose2d backward for one sample.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_backward_sample(
    x: &[f32],
    dy: &[f32],
    weight: &[f32],
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dcols_buf: &mut Vec<f32>,
    dweight: &mut [f32],
    dbias: Option<&mut [f32]>,
    dx: &mut [f32],
) {
    let oh = convt_out_size(h, k, stride, pad);
    let ow = convt_out_size(w, k, stride, pad);
    let okk = out_ch * k * k;
    // dcols = im2col(dy) over the *output* image, giving [okk, h·w]
    dcols_buf.resize(okk * h * w, 0.0);
    im2col(dy, out_ch, oh, ow, k, stride, pad, dcols_buf);
    // dx = W · dcols : [in_ch, okk]·[okk, h·w]
    matmul(weight, dcols_buf, in_ch, okk, h * w, dx);
    // dW += x_flat · dcolsᵀ : [in_ch, h·w]·[h·w, okk]
    let mut dw_local = vec![0.0f32; in_ch * okk];
    matmul_nt(x, dcols_buf, in_ch, h * w, okk, &mut dw_local);
    for (acc, v) in dweight.iter_mut().zip(dw_local.iter()) {
        *acc += v;
    }
    if let Some(db) = dbias {
        for oc in 0..out_ch {
            let mut acc = 0.0f64;
            for &v in &dy[oc * oh * ow..(oc + 1) * oh * ow] {
                acc += v as f64;
            }
            db[oc] += acc as f32;
        }
    }
}

/// Batchnorm statistics for one channel slice gathered across the batch.
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel mean/variance over N·H·W, accumulated in f64.
pub fn bn_batch_stats(x: &Tensor, channels: usize) -> BnStats {
    let shape = x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    debug_assert_eq!(c, channels);
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let data = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = 0.0f64;
            for &v in &data[base..base + plane] {
                acc += v as f64;
            }
            mean[ci] += acc;
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mu = mean[ci];
            let mut acc = 0.0f64;
            for &v in &data[base..base + plane] {
                let d = v as f64 - mu;
                acc += d * d;
            }
            var[ci] += acc;
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    BnStats { mean, var }
}

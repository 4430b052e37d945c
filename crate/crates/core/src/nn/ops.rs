//! Layer kernels with paired backward passes.
//!
//! Convolutions lower to GEMM per batch element (im2col). Work is split
//! across batch elements; reductions over the batch run in index order so
//! results do not depend on the number of workers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor4;
use crate::scalar::{gemm, Scalar};

/// Gradients of a layer with weight and bias.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Tensor4<T>,
}

fn bias_len<T: Scalar>(bias: &Tensor4<T>) -> usize {
    bias.len()
}

fn check_bias<T: Scalar>(bias: &Tensor4<T>, channels: usize, op: &str) -> Result<()> {
    if bias_len(bias) != channels {
        return Err(Error::shape(format!(
            "{op}: bias has {} entries for {channels} channels",
            bias.len()
        )));
    }
    Ok(())
}

// --- convolution ---------------------------------------------------------

fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let line = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - p as isize;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            line[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - p as isize;
                        if sx >= 0 && sx < w as isize {
                            line[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Scalar>(input: &Tensor4<T>, weight: &Tensor4<T>) -> Result<(usize, usize)> {
    let [_, cin, _, _] = input.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!("conv kernel must be odd and square, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv: weight expects {wcin} input channels, input has {cin}"
        )));
    }
    Ok((cout, kh))
}

/// Stride-1 "same" convolution (cross-correlation) with zero padding `k/2`.
///
/// `weight` is `(C_out, C_in, k, k)`, `bias` has `C_out` entries.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let (cout, k) = conv_dims(input, weight)?;
    check_bias(bias, cout, "conv")?;
    let [n, cin, h, w] = input.shape();
    let hw = h * w;
    let kk = cin * k * k;
    let mut out = Tensor4::zeros([n, cout, h, w]);
    let b = bias.as_slice();
    out.as_mut_slice()
        .par_chunks_mut(cout * hw)
        .enumerate()
        .for_each(|(i, dst)| {
            for (co, plane) in dst.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
            let src = input.sample(i);
            if k == 1 {
                gemm(cout, kk, hw, weight.as_slice(), false, src, false, T::one(), dst);
            } else {
                let mut col = vec![T::zero(); kk * hw];
                im2col(src, cin, h, w, k, &mut col);
                gemm(cout, kk, hw, weight.as_slice(), false, &col, false, T::one(), dst);
            }
        });
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<LayerGrads<T>> {
    let (cout, k) = conv_dims(input, weight)?;
    let [n, cin, h, w] = input.shape();
    if grad_out.shape() != [n, cout, h, w] {
        return Err(Error::shape("conv backward: gradient shape mismatch"));
    }
    let hw = h * w;
    let kk = cin * k * k;
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let src = input.sample(i);
            let g = grad_out.sample(i);
            let mut dw = vec![T::zero(); cout * kk];
            let mut din = vec![T::zero(); cin * hw];
            let db: Vec<T> = g.chunks(hw).map(|p| p.iter().copied().sum()).collect();
            if k == 1 {
                gemm(cout, hw, kk, g, false, src, true, T::zero(), &mut dw);
                gemm(kk, cout, hw, weight.as_slice(), true, g, false, T::zero(), &mut din);
            } else {
                let mut col = vec![T::zero(); kk * hw];
                im2col(src, cin, h, w, k, &mut col);
                gemm(cout, hw, kk, g, false, &col, true, T::zero(), &mut dw);
                gemm(kk, cout, hw, weight.as_slice(), true, g, false, T::zero(), &mut col);
                col2im(&col, cin, h, w, k, &mut din);
            }
            (din, dw, db)
        })
        .collect();
    let mut gin = Vec::with_capacity(input.len());
    let mut gw = Tensor4::zeros(weight.shape());
    let mut gb = vec![T::zero(); cout];
    for (din, dw, db) in per_sample {
        gin.extend(din);
        for (a, b) in gw.as_mut_slice().iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(db) {
            *a += b;
        }
    }
    Ok(LayerGrads {
        input: Tensor4::from_vec(input.shape(), gin)?,
        weight: gw,
        bias: Tensor4::from_vec([cout, 1, 1, 1], gb)?,
    })
}

/// 3×3 convolution with padding 1.
pub fn conv3x3<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let [_, _, kh, kw] = weight.shape();
    if (kh, kw) != (3, 3) {
        return Err(Error::shape(format!("conv3x3 needs a 3x3 kernel, got {kh}x{kw}")));
    }
    conv2d_forward(input, weight, bias)
}

// --- relu ----------------------------------------------------------------

pub fn relu_forward<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    Tensor4::from_vec(
        input.shape(),
        input.as_slice().iter().map(|&v| v.max(T::zero())).collect(),
    )
    .expect("same shape")
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    Tensor4::from_vec(
        input.shape(),
        input
            .as_slice()
            .iter()
            .zip(grad_out.as_slice())
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
    )
    .expect("same shape")
}

// --- max pooling ---------------------------------------------------------

/// 2×2 max pooling with stride 2. Returns the output and, for each output
/// element, the flat input index it was taken from (first maximum wins).
pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2x2 needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let src = input.as_slice();
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor4::from_vec([n, c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: [usize; 4],
    argmax: &[usize],
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let mut g = Tensor4::zeros(input_shape);
    let dst = g.as_mut_slice();
    for (&idx, &v) in argmax.iter().zip(grad_out.as_slice()) {
        dst[idx] += v;
    }
    g
}

// --- transposed 2x2 convolution ------------------------------------------

fn upconv_dims<T: Scalar>(input: &Tensor4<T>, weight: &Tensor4<T>) -> Result<usize> {
    let [_, cin, _, _] = input.shape();
    let [wcin, cout, kh, kw] = weight.shape();
    if (kh, kw) != (2, 2) {
        return Err(Error::shape(format!("upconv2x2 needs a 2x2 kernel, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "upconv: weight expects {wcin} input channels, input has {cin}"
        )));
    }
    Ok(cout)
}

/// Stride-2 transposed convolution with a 2×2 kernel; weight is `(C_in, C_out, 2, 2)`.
pub fn upconv2x2_forward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let cout = upconv_dims(input, weight)?;
    check_bias(bias, cout, "upconv")?;
    let [n, cin, h, w] = input.shape();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let b = bias.as_slice();
    let mut out = Tensor4::zeros([n, cout, oh, ow]);
    out.as_mut_slice()
        .par_chunks_mut(cout * oh * ow)
        .enumerate()
        .for_each(|(i, dst)| {
            // r[(co·4 + dy·2 + dx), pixel] = Σ_ci W[ci, co, dy, dx] · x[ci, pixel]
            let mut r = vec![T::zero(); cout * 4 * hw];
            gemm(cout * 4, cin, hw, weight.as_slice(), true, input.sample(i), false, T::zero(), &mut r);
            for co in 0..cout {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let src = &r[(co * 4 + d) * hw..][..hw];
                    for y in 0..h {
                        for x in 0..w {
                            dst[(co * oh + 2 * y + dy) * ow + 2 * x + dx] = src[y * w + x] + b[co];
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn upconv2x2_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<LayerGrads<T>> {
    let cout = upconv_dims(input, weight)?;
    let [n, cin, h, w] = input.shape();
    if grad_out.shape() != [n, cout, 2 * h, 2 * w] {
        return Err(Error::shape("upconv backward: gradient shape mismatch"));
    }
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = grad_out.sample(i);
            let mut dr = vec![T::zero(); cout * 4 * hw];
            let mut db = vec![T::zero(); cout];
            for co in 0..cout {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let row = &mut dr[(co * 4 + d) * hw..][..hw];
                    for y in 0..h {
                        for x in 0..w {
                            let v = g[(co * oh + 2 * y + dy) * ow + 2 * x + dx];
                            row[y * w + x] = v;
                            db[co] += v;
                        }
                    }
                }
            }
            let mut dw = vec![T::zero(); cin * cout * 4];
            gemm(cin, hw, cout * 4, input.sample(i), false, &dr, true, T::zero(), &mut dw);
            let mut din = vec![T::zero(); cin * hw];
            gemm(cin, cout * 4, hw, weight.as_slice(), false, &dr, false, T::zero(), &mut din);
            (din, dw, db)
        })
        .collect();
    let mut gin = Vec::with_capacity(input.len());
    let mut gw = Tensor4::zeros(weight.shape());
    let mut gb = vec![T::zero(); cout];
    for (din, dw, db) in per_sample {
        gin.extend(din);
        for (a, b) in gw.as_mut_slice().iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(db) {
            *a += b;
        }
    }
    Ok(LayerGrads {
        input: Tensor4::from_vec(input.shape(), gin)?,
        weight: gw,
        bias: Tensor4::from_vec([cout, 1, 1, 1], gb)?,
    })
}

// --- channel concatenation -----------------------------------------------

pub fn concat_channels<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of no tensors"))?;
    let [n, _, h, w] = first.shape();
    let mut total_c = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.shape();
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        total_c += pc;
    }
    let mut data = Vec::with_capacity(n * total_c * h * w);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(i));
        }
    }
    Tensor4::from_vec([n, total_c, h, w], data)
}

/// Slices a concatenated gradient back into per-part gradients.
pub fn concat_channels_backward<T: Scalar>(
    part_channels: &[usize],
    grad_out: &Tensor4<T>,
) -> Vec<Tensor4<T>> {
    let [n, _, h, w] = grad_out.shape();
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = part_channels
        .iter()
        .map(|&c| Vec::with_capacity(n * c * hw))
        .collect();
    for i in 0..n {
        let mut s = grad_out.sample(i);
        for (out, &c) in outs.iter_mut().zip(part_channels) {
            let (head, tail) = s.split_at(c * hw);
            out.extend_from_slice(head);
            s = tail;
        }
    }
    outs.into_iter()
        .zip(part_channels)
        .map(|(d, &c)| Tensor4::from_vec([n, c, h, w], d).expect("slice shape"))
        .collect()
}

// --- batch normalization -------------------------------------------------

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub normalized: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

fn channel_planes<T: Scalar>(shape: [usize; 4]) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    (0..n).flat_map(move |i| (0..c).map(move |ch| (ch, (i * c + ch) * hw..(i * c + ch + 1) * hw)))
}

/// Per-channel normalization over `(N, H, W)`.
///
/// Train mode normalizes with batch statistics and updates the running
/// mean and unbiased variance with momentum [`BN_MOMENTUM`]; eval mode uses
/// the running statistics.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    stats: &mut BnStats<T>,
    mode: Mode,
) -> Result<(Tensor4<T>, BnCache<T>)> {
    let [n, c, h, w] = input.shape();
    if gamma.len() != c || beta.len() != c || stats.running_mean.len() != c {
        return Err(Error::shape(format!("batchnorm: parameters do not match {c} channels")));
    }
    let count = n * h * w;
    let eps = T::lit(BN_EPSILON);
    let x = input.as_slice();
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::shape("batchnorm train mode needs N*H*W >= 2"));
            }
            let mut mean = vec![T::zero(); c];
            for (ch, r) in channel_planes::<T>(input.shape()) {
                mean[ch] += x[r].iter().copied().sum::<T>();
            }
            let cnt = T::from_usize_lossy(count);
            mean.iter_mut().for_each(|m| *m /= cnt);
            let mut var = vec![T::zero(); c];
            for (ch, r) in channel_planes::<T>(input.shape()) {
                var[ch] += x[r].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
            var.iter_mut().for_each(|v| *v /= cnt);
            let mom = T::lit(BN_MOMENTUM);
            let unbias = cnt / (cnt - T::one());
            for ch in 0..c {
                stats.running_mean[ch] = (T::one() - mom) * stats.running_mean[ch] + mom * mean[ch];
                stats.running_var[ch] =
                    (T::one() - mom) * stats.running_var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (stats.running_mean.clone(), stats.running_var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (g, b) = (gamma.as_slice(), beta.as_slice());
    for (ch, r) in channel_planes::<T>(input.shape()) {
        for idx in r {
            let xh = (x[idx] - mean[ch]) * inv_std[ch];
            normalized[idx] = xh;
            out[idx] = g[ch] * xh + b[ch];
        }
    }
    Ok((
        Tensor4::from_vec(input.shape(), out)?,
        BnCache {
            normalized: Tensor4::from_vec(input.shape(), normalized)?,
            inv_std,
            mode,
        },
    ))
}

pub fn batchnorm_backward<T: Scalar>(
    gamma: &Tensor4<T>,
    cache: &BnCache<T>,
    grad_out: &Tensor4<T>,
) -> LayerGrads<T> {
    let shape = grad_out.shape();
    let [n, c, h, w] = shape;
    let count = T::from_usize_lossy(n * h * w);
    let dy = grad_out.as_slice();
    let xh = cache.normalized.as_slice();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (ch, r) in channel_planes::<T>(shape) {
        for idx in r {
            dbeta[ch] += dy[idx];
            dgamma[ch] += dy[idx] * xh[idx];
        }
    }
    let g = gamma.as_slice();
    let mut dx = vec![T::zero(); dy.len()];
    for (ch, r) in channel_planes::<T>(shape) {
        let scale = g[ch] * cache.inv_std[ch];
        match cache.mode {
            Mode::Train => {
                let (sb, sg) = (dbeta[ch] / count, dgamma[ch] / count);
                for idx in r {
                    dx[idx] = scale * (dy[idx] - sb - xh[idx] * sg);
                }
            }
            Mode::Eval => {
                for idx in r {
                    dx[idx] = scale * dy[idx];
                }
            }
        }
    }
    LayerGrads {
        input: Tensor4::from_vec(shape, dx).expect("shape"),
        weight: Tensor4::from_vec([c, 1, 1, 1], dgamma).expect("shape"),
        bias: Tensor4::from_vec([c, 1, 1, 1], dbeta).expect("shape"),
    }
}

// --- loss ----------------------------------------------------------------

/// Batch-mean of per-image summed squared error: `(1/N) Σ_i ‖X_i − X̃_i‖²`.
pub fn mse_loss<T: Scalar>(prediction: &Tensor4<T>, target: &Tensor4<T>) -> Result<T> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse_loss: {:?} vs {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let n = T::from_usize_lossy(prediction.shape()[0]);
    let sum: T = prediction
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| (t - p) * (t - p))
        .sum();
    Ok(sum / n)
}

/// `∂L/∂X̃ = −2 (X − X̃) / N`.
pub fn mse_loss_backward<T: Scalar>(prediction: &Tensor4<T>, target: &Tensor4<T>) -> Tensor4<T> {
    let n = T::from_usize_lossy(prediction.shape()[0]);
    let two = T::lit(2.0);
    Tensor4::from_vec(
        prediction.shape(),
        prediction
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(&p, &t)| -two * (t - p) / n)
            .collect(),
    )
    .expect("same shape")
}

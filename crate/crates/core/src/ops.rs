//! Raw numeric kernels over plain slices. The autodiff tape wraps these;
//! the prior pipeline reuses the bilinear kernel for mask resizing.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::math;

/// Output extent of a cross-correlation: floor((in + 2*pad - k) / stride) + 1.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(shape_err!("kernel/stride extents must be nonzero"));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(shape_err!(
            "kernel {} does not fit padded input {} (input {} pad {})",
            k,
            padded,
            input,
            pad
        ));
    }
    Ok((padded - k) / stride + 1)
}

// Valid output range [lo, hi) along one axis for a fixed kernel offset, so the
// inner loops never index outside the input.
fn valid_range(out_ext: usize, in_ext: usize, stride: usize, pad: usize, k_off: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi_num = in_ext + pad;
    let hi = if hi_num > k_off {
        (((hi_num - k_off - 1) / stride) + 1).min(out_ext)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (o, _wc, kh, kw): (usize, usize, usize, usize),
    bias: &[f64],
    stride: (usize, usize),
    pad: (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            let ob = (ni * o + oi) * oh * ow;
            out[ob..ob + oh * ow].fill(bias[oi]);
            for ci in 0..c {
                let xb = (ni * c + ci) * h * w;
                let wb = (oi * c + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, sh, ph, ky);
                    for kx in 0..kw {
                        let wv = weight[wb + ky * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(ow, w, sw, pw, kx);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * sh + ky - ph;
                            let xrow = xb + iy * w;
                            let orow = ob + oy * ow;
                            for ox in ox_lo..ox_hi {
                                out[orow + ox] += wv * x[xrow + ox * sw + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (o, _wc, kh, kw): (usize, usize, usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    (oh, ow): (usize, usize),
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; o];
    for ni in 0..n {
        for oi in 0..o {
            let ob = (ni * o + oi) * oh * ow;
            let mut acc = 0.0;
            for g in &gout[ob..ob + oh * ow] {
                acc += g;
            }
            gb[oi] += acc;
            for ci in 0..c {
                let xb = (ni * c + ci) * h * w;
                let wb = (oi * c + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, sh, ph, ky);
                    for kx in 0..kw {
                        let wv = weight[wb + ky * kw + kx];
                        let mut wacc = 0.0;
                        let (ox_lo, ox_hi) = valid_range(ow, w, sw, pw, kx);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * sh + ky - ph;
                            let xrow = xb + iy * w;
                            let orow = ob + oy * ow;
                            for ox in ox_lo..ox_hi {
                                let g = gout[orow + ox];
                                let xi = xrow + ox * sw + kx - pw;
                                wacc += g * x[xi];
                                gx[xi] += g * wv;
                            }
                        }
                        gw[wb + ky * kw + kx] += wacc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// y[n][o] = bias[o] + sum_i x[n][i] * w[o][i]
pub fn linear_forward(x: &[f64], (n, i): (usize, usize), weight: &[f64], bias: &[f64], o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for ni in 0..n {
        let xrow = &x[ni * i..(ni + 1) * i];
        for oi in 0..o {
            let wrow = &weight[oi * i..(oi + 1) * i];
            let mut acc = bias[oi];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            out[ni * o + oi] = acc;
        }
    }
    out
}

pub fn linear_backward(
    x: &[f64],
    (n, i): (usize, usize),
    weight: &[f64],
    o: usize,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * i];
    let mut gw = vec![0.0; o * i];
    let mut gb = vec![0.0; o];
    for ni in 0..n {
        let xrow = &x[ni * i..(ni + 1) * i];
        for oi in 0..o {
            let g = gout[ni * o + oi];
            if g == 0.0 {
                continue;
            }
            gb[oi] += g;
            let wrow = &weight[oi * i..(oi + 1) * i];
            let gxrow = &mut gx[ni * i..(ni + 1) * i];
            for k in 0..i {
                gxrow[k] += g * wrow[k];
            }
            let gwrow = &mut gw[oi * i..(oi + 1) * i];
            for k in 0..i {
                gwrow[k] += g * xrow[k];
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel batch statistics of a [n][c][spatial] buffer. Variance is the
/// biased (1/m) two-pass estimate over the n*spatial reduction set.
pub fn batch_stats(x: &[f64], (n, c, sp): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let m = (n * sp) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let mut acc = 0.0;
            for v in &x[base..base + sp] {
                acc += v;
            }
            mean[ci] += acc;
        }
    }
    for mv in mean.iter_mut() {
        *mv /= m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let mu = mean[ci];
            let mut acc = 0.0;
            for v in &x[base..base + sp] {
                let d = v - mu;
                acc += d * d;
            }
            var[ci] += acc;
        }
    }
    for vv in var.iter_mut() {
        *vv /= m;
    }
    (mean, var)
}

pub fn batchnorm_apply(
    x: &[f64],
    (n, c, sp): (usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let inv = 1.0 / math::sqrt(var[ci] + eps);
            let g = gamma[ci];
            let b = beta[ci];
            let mu = mean[ci];
            for k in 0..sp {
                out[base + k] = (x[base + k] - mu) * inv * g + b;
            }
        }
    }
    out
}

/// Gradient of train-mode batchnorm (statistics participate in the graph).
pub fn batchnorm_backward_train(
    x: &[f64],
    (n, c, sp): (usize, usize, usize),
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * sp) as f64;
    let mut gsum = vec![0.0; c];
    let mut gxhat_sum = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let inv = 1.0 / math::sqrt(var[ci] + eps);
            let mu = mean[ci];
            for k in 0..sp {
                let g = gout[base + k];
                gsum[ci] += g;
                gxhat_sum[ci] += g * (x[base + k] - mu) * inv;
            }
        }
    }
    let mut gx = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let inv = 1.0 / math::sqrt(var[ci] + eps);
            let mu = mean[ci];
            let scale = gamma[ci] * inv;
            for k in 0..sp {
                let xhat = (x[base + k] - mu) * inv;
                gx[base + k] =
                    scale * (gout[base + k] - gsum[ci] / m - xhat * gxhat_sum[ci] / m);
            }
        }
    }
    (gx, gxhat_sum, gsum)
}

/// Gradient of eval-mode batchnorm (running statistics are constants).
pub fn batchnorm_backward_eval(
    x: &[f64],
    (n, c, sp): (usize, usize, usize),
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * sp;
            let inv = 1.0 / math::sqrt(var[ci] + eps);
            let mu = mean[ci];
            for k in 0..sp {
                let g = gout[base + k];
                gx[base + k] = g * gamma[ci] * inv;
                ggamma[ci] += g * (x[base + k] - mu) * inv;
                gbeta[ci] += g;
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Update running statistics in place. The running variance uses the
/// unbiased (m/(m-1)) estimate when the reduction set has more than one
/// element, mirroring the usual framework convention.
pub fn update_running_stats(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mean: &[f64],
    var: &[f64],
    momentum: f64,
    m: usize,
) {
    let correction = if m > 1 {
        m as f64 / (m as f64 - 1.0)
    } else {
        1.0
    };
    for c in 0..running_mean.len() {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c] * correction;
    }
}

/// One axis of the align-corners-false bilinear sampling grid:
/// src = (o + 0.5) * in/out - 0.5, neighbours clamped to the valid range.
pub fn bilinear_taps(in_ext: usize, out_ext: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_ext as f64 / out_ext as f64;
    (0..out_ext)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = math::floor(src);
            let t = src - base;
            let i0 = base.max(0.0).min((in_ext - 1) as f64) as usize;
            let i1 = (base + 1.0).max(0.0).min((in_ext - 1) as f64) as usize;
            (i0, i1, t)
        })
        .collect()
}

pub fn bilinear_forward(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ytaps = bilinear_taps(h, oh);
    let xtaps = bilinear_taps(w, ow);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let xb = plane * h * w;
        let ob = plane * oh * ow;
        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                let v00 = x[xb + y0 * w + x0];
                let v01 = x[xb + y0 * w + x1];
                let v10 = x[xb + y1 * w + x0];
                let v11 = x[xb + y1 * w + x1];
                let top = v00 * (1.0 - tx) + v01 * tx;
                let bot = v10 * (1.0 - tx) + v11 * tx;
                out[ob + oy * ow + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

pub fn bilinear_backward(
    (n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    gout: &[f64],
) -> Vec<f64> {
    let ytaps = bilinear_taps(h, oh);
    let xtaps = bilinear_taps(w, ow);
    let mut gx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let xb = plane * h * w;
        let ob = plane * oh * ow;
        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                let g = gout[ob + oy * ow + ox];
                gx[xb + y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                gx[xb + y0 * w + x1] += g * (1.0 - ty) * tx;
                gx[xb + y1 * w + x0] += g * ty * (1.0 - tx);
                gx[xb + y1 * w + x1] += g * ty * tx;
            }
        }
    }
    gx
}

/// Per-channel spatial max; records the first argmax in scan order so the
/// backward pass has a deterministic target on ties.
pub fn global_max_pool(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> (Vec<f64>, Vec<usize>) {
    let sp = h * w;
    let mut out = vec![0.0; n * c];
    let mut arg = vec![0usize; n * c];
    for plane in 0..n * c {
        let base = plane * sp;
        let mut best = x[base];
        let mut best_at = 0;
        for k in 1..sp {
            if x[base + k] > best {
                best = x[base + k];
                best_at = k;
            }
        }
        out[plane] = best;
        arg[plane] = best_at;
    }
    (out, arg)
}

/// Row-wise softmax probabilities, stabilized by max subtraction.
pub fn softmax_rows(logits: &[f64], (n, k): (usize, usize)) -> Vec<f64> {
    let mut probs = vec![0.0; n * k];
    for ni in 0..n {
        let row = &logits[ni * k..(ni + 1) * k];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = math::exp(v - mx);
            probs[ni * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            probs[ni * k + j] /= denom;
        }
    }
    probs
}

//! Raw f64 slice kernels shared by the graph forward and backward passes.
//!
//! Everything here is plain row-major arithmetic with a fixed summation
//! order, so repeated runs are bit-identical.

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[k,n] = Aᵀ · B with A[m,k], B[m,n]
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A · Bᵀ with A[m,k], B[n,k]
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Patch extraction for convolution: rows indexed by output position,
/// columns by (kernel row, kernel col, input channel). Out-of-image taps
/// stay zero, which realizes zero padding.
pub fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let row_len = kh * kw * c;
    let mut cols = vec![0.0; oh * ow * row_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * row_len;
            for p in 0..kh {
                let iy = (oy * stride + p) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for q in 0..kw {
                    let ix = (ox * stride + q) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = base + (p * kw + q) * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-adds column gradients back onto the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    dcols: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let row_len = kh * kw * c;
    let mut dx = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * row_len;
            for p in 0..kh {
                let iy = (oy * stride + p) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for q in 0..kw {
                    let ix = (ox * stride + q) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = base + (p * kw + q) * c;
                    for ch in 0..c {
                        dx[dst + ch] += dcols[src + ch];
                    }
                }
            }
        }
    }
    dx
}

/// Depthwise cross-correlation: kernel [kh,kw,C,1], one filter per channel.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for p in 0..kh {
                let iy = (oy * stride + p) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for q in 0..kw {
                    let ix = (ox * stride + q) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let kbase = (p * kw + q) * c;
                    let dst = (oy * ow + ox) * c;
                    for ch in 0..c {
                        out[dst + ch] += x[src + ch] * kernel[kbase + ch];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of the depthwise convolution w.r.t. input and kernel.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; h * w * c];
    let mut dk = vec![0.0; kh * kw * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for p in 0..kh {
                let iy = (oy * stride + p) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for q in 0..kw {
                    let ix = (ox * stride + q) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let kbase = (p * kw + q) * c;
                    let dst = (oy * ow + ox) * c;
                    for ch in 0..c {
                        dx[src + ch] += dout[dst + ch] * kernel[kbase + ch];
                        dk[kbase + ch] += dout[dst + ch] * x[src + ch];
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// 2x2 max pooling with stride 2; ties resolve to the first maximum in scan
/// order so forward and backward agree.
pub fn max_pool2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[((oy * 2 + dy) * w + ox * 2 + dx) * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = best;
            }
        }
    }
    out
}

pub fn max_pool2_backward(x: &[f64], h: usize, w: usize, c: usize, dout: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dxp in 0..2 {
                        let idx = ((oy * 2 + dy) * w + ox * 2 + dxp) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                dx[best_idx] += dout[(oy * ow + ox) * c + ch];
            }
        }
    }
    dx
}

/// Row-wise softmax with max-subtraction stabilization.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (row[j] - m).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-vector normalization over the trailing axis, then affine.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xs, os) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            os[j] = (xs[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
    out
}

/// Standard layer-norm adjoint; returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    d: usize,
    eps: f64,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let df = d as f64;
    for v in 0..x.len() / d {
        let xs = &x[v * d..(v + 1) * d];
        let gs = &dout[v * d..(v + 1) * d];
        let mean = xs.iter().sum::<f64>() / df;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
        let inv_std = 1.0 / (var + eps).sqrt();

        let mut dxhat_sum = 0.0;
        let mut dxhat_xhat_sum = 0.0;
        for j in 0..d {
            let xhat = (xs[j] - mean) * inv_std;
            let dxhat = gs[j] * gamma[j];
            dgamma[j] += gs[j] * xhat;
            dbeta[j] += gs[j];
            dxhat_sum += dxhat;
            dxhat_xhat_sum += dxhat * xhat;
        }
        for j in 0..d {
            let xhat = (xs[j] - mean) * inv_std;
            let dxhat = gs[j] * gamma[j];
            dx[v * d + j] = inv_std / df * (df * dxhat - dxhat_sum - xhat * dxhat_xhat_sum);
        }
    }
    (dx, dgamma, dbeta)
}

/// Exact Gaussian-CDF GELU: x · Φ(x).
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

//! Dense primitives with hand-written backward passes.
//!
//! Token tensors are row-major `[tokens, channels]`. Image tensors (used by the
//! convolutional region classifier) are channel-major `[channels, height, width]`.
//! Every `*_backward` function *accumulates* into its gradient buffers.

/// `y = x W + b` with `x: [rows, d_in]`, `W: [d_in, d_out]`.
pub fn linear(x: &[f64], rows: usize, d_in: usize, w: &[f64], b: &[f64], d_out: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    debug_assert_eq!(b.len(), d_out);
    let mut y = vec![0.0; rows * d_out];
    for r in 0..rows {
        let yr = &mut y[r * d_out..(r + 1) * d_out];
        yr.copy_from_slice(b);
        let xr = &x[r * d_in..(r + 1) * d_in];
        for (i, &xi) in xr.iter().enumerate() {
            let wi = &w[i * d_out..(i + 1) * d_out];
            for (yo, &wio) in yr.iter_mut().zip(wi) {
                *yo += xi * wio;
            }
        }
    }
    y
}

/// Backward of [`linear`]. `dx` may be `None` when the input needs no gradient.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    d_in: usize,
    w: &[f64],
    d_out: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let dyr = &dy[r * d_out..(r + 1) * d_out];
        for (dbo, &g) in db.iter_mut().zip(dyr) {
            *dbo += g;
        }
        let xr = &x[r * d_in..(r + 1) * d_in];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let dwi = &mut dw[i * d_out..(i + 1) * d_out];
            for (d, &g) in dwi.iter_mut().zip(dyr) {
                *d += xi * g;
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * d_out..(r + 1) * d_out];
            let dxr = &mut dx[r * d_in..(r + 1) * d_in];
            for (i, dxi) in dxr.iter_mut().enumerate() {
                let wi = &w[i * d_out..(i + 1) * d_out];
                *dxi += dot(wi, dyr);
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Per-row layer normalization with affine parameters.
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm(x: &[f64], rows: usize, dim: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..dim {
            let h = (xr[c] - mean) * is;
            xhat[r * dim + c] = h;
            y[r * dim + c] = h * gamma[c] + beta[c];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    rows: usize,
    dim: usize,
    gamma: &[f64],
    dy: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let n = dim as f64;
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..dim {
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
            dxhat[c] = dyr[c] * gamma[c];
            sum_dxhat += dxhat[c];
            sum_dxhat_xhat += dxhat[c] * xh[c];
        }
        let is = cache.inv_std[r];
        let dxr = &mut dx[r * dim..(r + 1) * dim];
        for c in 0..dim {
            dxr[c] += is / n * (n * dxhat[c] - sum_dxhat - xh[c] * sum_dxhat_xhat);
        }
    }
}

/// Depthwise 3x3 convolution (zero padding, stride 1) on a token grid
/// `[grid_h * grid_w, channels]`. Kernel layout `[channels, 3, 3]`.
pub fn depthwise_conv3x3(x: &[f64], grid_h: usize, grid_w: usize, ch: usize, k: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; grid_h * grid_w * ch];
    for r in 0..grid_h {
        for c in 0..grid_w {
            let yt = &mut y[(r * grid_w + c) * ch..(r * grid_w + c + 1) * ch];
            yt.copy_from_slice(b);
            for kr in 0..3 {
                let sr = r as isize + kr as isize - 1;
                if sr < 0 || sr >= grid_h as isize {
                    continue;
                }
                for kc in 0..3 {
                    let sc = c as isize + kc as isize - 1;
                    if sc < 0 || sc >= grid_w as isize {
                        continue;
                    }
                    let src = (sr as usize * grid_w + sc as usize) * ch;
                    let xs = &x[src..src + ch];
                    for (j, (yv, &xv)) in yt.iter_mut().zip(xs).enumerate() {
                        *yv += k[j * 9 + kr * 3 + kc] * xv;
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv3x3_backward(
    x: &[f64],
    grid_h: usize,
    grid_w: usize,
    ch: usize,
    k: &[f64],
    dy: &[f64],
    dk: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for r in 0..grid_h {
        for c in 0..grid_w {
            let t = r * grid_w + c;
            let dyt = &dy[t * ch..(t + 1) * ch];
            for (dbj, &g) in db.iter_mut().zip(dyt) {
                *dbj += g;
            }
            for kr in 0..3 {
                let sr = r as isize + kr as isize - 1;
                if sr < 0 || sr >= grid_h as isize {
                    continue;
                }
                for kc in 0..3 {
                    let sc = c as isize + kc as isize - 1;
                    if sc < 0 || sc >= grid_w as isize {
                        continue;
                    }
                    let src = (sr as usize * grid_w + sc as usize) * ch;
                    for j in 0..ch {
                        let kidx = j * 9 + kr * 3 + kc;
                        dk[kidx] += dyt[j] * x[src + j];
                        dx[src + j] += dyt[j] * k[kidx];
                    }
                }
            }
        }
    }
}

/// Dense 3x3 convolution with padding 1 and the given stride on a
/// channel-major image. Kernel layout `[c_out, c_in, 3, 3]`.
pub struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 - 3) / self.stride + 1
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize, k: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut y = vec![0.0; self.c_out * oh * ow];
        for co in 0..self.c_out {
            let yc = &mut y[co * oh * ow..(co + 1) * oh * ow];
            yc.fill(b[co]);
            for ci in 0..self.c_in {
                let xc = &x[ci * h * w..(ci + 1) * h * w];
                let kk = &k[(co * self.c_in + ci) * 9..(co * self.c_in + ci + 1) * 9];
                for orow in 0..oh {
                    for kr in 0..3 {
                        let ir = (orow * self.stride + kr) as isize - 1;
                        if ir < 0 || ir >= h as isize {
                            continue;
                        }
                        let xrow = &xc[ir as usize * w..(ir as usize + 1) * w];
                        let yrow = &mut yc[orow * ow..(orow + 1) * ow];
                        for kc in 0..3 {
                            let kv = kk[kr * 3 + kc];
                            for (ocol, yv) in yrow.iter_mut().enumerate() {
                                let ic = (ocol * self.stride + kc) as isize - 1;
                                if ic >= 0 && ic < w as isize {
                                    *yv += kv * xrow[ic as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        k: &[f64],
        dy: &[f64],
        dk: &mut [f64],
        db: &mut [f64],
        mut dx: Option<&mut [f64]>,
    ) {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        for co in 0..self.c_out {
            let dyc = &dy[co * oh * ow..(co + 1) * oh * ow];
            db[co] += dyc.iter().sum::<f64>();
            for ci in 0..self.c_in {
                let xc = &x[ci * h * w..(ci + 1) * h * w];
                let base = (co * self.c_in + ci) * 9;
                for orow in 0..oh {
                    for kr in 0..3 {
                        let ir = (orow * self.stride + kr) as isize - 1;
                        if ir < 0 || ir >= h as isize {
                            continue;
                        }
                        let ir = ir as usize;
                        for kc in 0..3 {
                            let kv = k[base + kr * 3 + kc];
                            let mut acc = 0.0;
                            for ocol in 0..ow {
                                let ic = (ocol * self.stride + kc) as isize - 1;
                                if ic < 0 || ic >= w as isize {
                                    continue;
                                }
                                let g = dyc[orow * ow + ocol];
                                acc += g * xc[ir * w + ic as usize];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[ci * h * w + ir * w + ic as usize] += g * kv;
                                }
                            }
                            dk[base + kr * 3 + kc] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 1-D linear interpolation table for half-pixel-centred (align_corners =
/// false) bilinear resizing from `src` to `dst` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Interp1d {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl Interp1d {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut w_hi = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let l = pos.floor() as usize;
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            w_hi.push(pos - l as f64);
        }
        Self { lo, hi, w_hi }
    }
}

/// Bilinear upsampling of `channels` planes stored token-major
/// (`[sh * sw, channels]`) into channel-major output planes `[channels, dh, dw]`.
pub fn upsample_bilinear(
    x: &[f64],
    sh: usize,
    sw: usize,
    channels: usize,
    rows: &Interp1d,
    cols: &Interp1d,
) -> Vec<f64> {
    let (dh, dw) = (rows.lo.len(), cols.lo.len());
    let mut out = vec![0.0; channels * dh * dw];
    // Interpolate along columns first: [sh, dw, channels].
    let mut tmp = vec![0.0; sh * dw * channels];
    for r in 0..sh {
        for j in 0..dw {
            let (l, h, a) = (cols.lo[j], cols.hi[j], cols.w_hi[j]);
            for c in 0..channels {
                let vl = x[(r * sw + l) * channels + c];
                let vh = x[(r * sw + h) * channels + c];
                tmp[(r * dw + j) * channels + c] = vl * (1.0 - a) + vh * a;
            }
        }
    }
    for i in 0..dh {
        let (l, h, a) = (rows.lo[i], rows.hi[i], rows.w_hi[i]);
        for j in 0..dw {
            for c in 0..channels {
                let vl = tmp[(l * dw + j) * channels + c];
                let vh = tmp[(h * dw + j) * channels + c];
                out[c * dh * dw + i * dw + j] = vl * (1.0 - a) + vh * a;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(
    dy: &[f64],
    sh: usize,
    sw: usize,
    channels: usize,
    rows: &Interp1d,
    cols: &Interp1d,
    dx: &mut [f64],
) {
    let (dh, dw) = (rows.lo.len(), cols.lo.len());
    let mut dtmp = vec![0.0; sh * dw * channels];
    for i in 0..dh {
        let (l, h, a) = (rows.lo[i], rows.hi[i], rows.w_hi[i]);
        for j in 0..dw {
            for c in 0..channels {
                let g = dy[c * dh * dw + i * dw + j];
                dtmp[(l * dw + j) * channels + c] += g * (1.0 - a);
                dtmp[(h * dw + j) * channels + c] += g * a;
            }
        }
    }
    for r in 0..sh {
        for j in 0..dw {
            let (l, h, a) = (cols.lo[j], cols.hi[j], cols.w_hi[j]);
            for c in 0..channels {
                let g = dtmp[(r * dw + j) * channels + c];
                dx[(r * sw + l) * channels + c] += g * (1.0 - a);
                dx[(r * sw + h) * channels + c] += g * a;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central difference of `f` at `x[i]`.
    fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-5;
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6 * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (rows, din, dout) = (3, 4, 2);
        let x = rand_vec(&mut rng, rows * din);
        let w = rand_vec(&mut rng, din * dout);
        let b = rand_vec(&mut rng, dout);
        let probe = rand_vec(&mut rng, rows * dout);
        let loss = |x: &[f64], w: &[f64]| dot(&linear(x, rows, din, w, &b, dout), &probe);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; dout];
        let mut dx = vec![0.0; x.len()];
        linear_backward(&x, rows, din, &w, dout, &probe, &mut dw, &mut db, Some(&mut dx));
        for i in 0..w.len() {
            assert!(close(dw[i], fd(&|w| loss(&x, w), &w, i)));
        }
        for i in 0..x.len() {
            assert!(close(dx[i], fd(&|x| loss(x, &w), &x, i)));
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rows, dim) = (2, 5);
        let x = rand_vec(&mut rng, rows * dim);
        let g = rand_vec(&mut rng, dim);
        let b = rand_vec(&mut rng, dim);
        let probe = rand_vec(&mut rng, rows * dim);
        let loss = |x: &[f64]| dot(&layer_norm(x, rows, dim, &g, &b).0, &probe);
        let (_, cache) = layer_norm(&x, rows, dim, &g, &b);
        let mut dg = vec![0.0; dim];
        let mut dbeta = vec![0.0; dim];
        let mut dx = vec![0.0; x.len()];
        layer_norm_backward(&cache, rows, dim, &g, &probe, &mut dg, &mut dbeta, &mut dx);
        for i in 0..x.len() {
            assert!(close(dx[i], fd(&loss, &x, i)), "{} vs {}", dx[i], fd(&loss, &x, i));
        }
    }

    #[test]
    fn depthwise_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (gh, gw, ch) = (3, 4, 2);
        let x = rand_vec(&mut rng, gh * gw * ch);
        let k = rand_vec(&mut rng, ch * 9);
        let b = rand_vec(&mut rng, ch);
        let probe = rand_vec(&mut rng, gh * gw * ch);
        let loss = |x: &[f64], k: &[f64]| dot(&depthwise_conv3x3(x, gh, gw, ch, k, &b), &probe);
        let mut dk = vec![0.0; k.len()];
        let mut db = vec![0.0; ch];
        let mut dx = vec![0.0; x.len()];
        depthwise_conv3x3_backward(&x, gh, gw, ch, &k, &probe, &mut dk, &mut db, &mut dx);
        for i in 0..k.len() {
            assert!(close(dk[i], fd(&|k| loss(&x, k), &k, i)));
        }
        for i in 0..x.len() {
            assert!(close(dx[i], fd(&|x| loss(x, &k), &x, i)));
        }
    }

    #[test]
    fn strided_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv3x3 { c_in: 2, c_out: 3, stride: 2 };
        let (h, w) = (6, 5);
        let x = rand_vec(&mut rng, 2 * h * w);
        let k = rand_vec(&mut rng, 3 * 2 * 9);
        let b = rand_vec(&mut rng, 3);
        let out = conv.forward(&x, h, w, &k, &b);
        assert_eq!(out.len(), 3 * conv.out_size(h) * conv.out_size(w));
        let probe = rand_vec(&mut rng, out.len());
        let loss = |x: &[f64], k: &[f64]| dot(&conv.forward(x, h, w, k, &b), &probe);
        let mut dk = vec![0.0; k.len()];
        let mut db = vec![0.0; 3];
        let mut dx = vec![0.0; x.len()];
        conv.backward(&x, h, w, &k, &probe, &mut dk, &mut db, Some(&mut dx));
        for i in 0..k.len() {
            assert!(close(dk[i], fd(&|k| loss(&x, k), &k, i)));
        }
        for i in 0..x.len() {
            assert!(close(dx[i], fd(&|x| loss(x, &k), &x, i)));
        }
    }

    #[test]
    fn upsample_preserves_constants_and_transposes() {
        let rows = Interp1d::new(2, 8);
        let cols = Interp1d::new(3, 12);
        let x = vec![0.25; 2 * 3 * 2];
        let y = upsample_bilinear(&x, 2, 3, 2, &rows, &cols);
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_vec(&mut rng, 2 * 3 * 2);
        let probe = rand_vec(&mut rng, 2 * 8 * 12);
        let lhs = dot(&upsample_bilinear(&x, 2, 3, 2, &rows, &cols), &probe);
        let mut dx = vec![0.0; x.len()];
        upsample_bilinear_backward(&probe, 2, 3, 2, &rows, &cols, &mut dx);
        assert!((lhs - dot(&x, &dx)).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_normalized() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let lp = log_softmax(&[0.0, 0.0]);
        assert!((lp[0] + std::f64::consts::LN_2).abs() < 1e-15);
    }
}

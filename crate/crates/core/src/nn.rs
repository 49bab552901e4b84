//! Dense kernels with explicit backward passes: GEMM, 2-D convolution via
//! im2col, fully connected layers, ReLU and bilinear region pooling.
//!
//! All feature maps are planar `[channels, height, width]` `f32` buffers.
//! Backward functions accumulate into their gradient outputs.

/// Row-major `C = A' * B' + beta * C`, where `A'` is `m x k` and `B'` is `k x n`.
/// `trans_a` means `a` is stored as `k x m`; `trans_b` means `b` is stored as
/// `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the assert above guarantees every strided access stays in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution with `padding = kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvShape {
    #[inline]
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

fn im2col(s: &ConvShape, input: &[f32], cols: &mut [f32]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let pad = s.pad() as isize;
    let ncols = oh * ow;
    for c in 0..s.in_channels {
        let plane = &input[c * s.in_h * s.in_w..(c + 1) * s.in_h * s.in_w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (c * s.kernel + ky) * s.kernel + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * s.stride) as isize + ky as isize - pad;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= s.in_h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.in_w..(iy as usize + 1) * s.in_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s.stride) as isize + kx as isize - pad;
                        *d = if ix < 0 || ix >= s.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(s: &ConvShape, cols: &[f32], grad_input: &mut [f32]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let pad = s.pad() as isize;
    let ncols = oh * ow;
    for c in 0..s.in_channels {
        let plane = &mut grad_input[c * s.in_h * s.in_w..(c + 1) * s.in_h * s.in_w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (c * s.kernel + ky) * s.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * s.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= s.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.in_w..(iy as usize + 1) * s.in_w];
                    for ox in 0..ow {
                        let ix = (ox * s.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < s.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Saved state of a convolution forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub shape: ConvShape,
    /// im2col patches; empty for pointwise convolutions, whose input is kept instead.
    cols: Vec<f32>,
}

/// Convolution forward. `weight` is `[out, in * k * k]`, `bias` is `[out]`.
pub fn conv2d_forward(
    s: ConvShape,
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
) -> (Vec<f32>, ConvCache) {
    let ncols = s.out_h() * s.out_w();
    let mut out = vec![0.0f32; s.out_channels * ncols];
    for (o, &b) in bias.iter().enumerate() {
        out[o * ncols..(o + 1) * ncols].fill(b);
    }
    let cols = if s.is_pointwise() {
        input.to_vec()
    } else {
        let mut cols = vec![0.0f32; s.patch_len() * ncols];
        im2col(&s, input, &mut cols);
        cols
    };
    gemm(
        s.out_channels,
        s.patch_len(),
        ncols,
        weight,
        false,
        &cols,
        false,
        1.0,
        &mut out,
    );
    (out, ConvCache { shape: s, cols })
}

/// Convolution backward. Accumulates into `grad_weight` and `grad_bias`; returns
/// the input gradient when `want_input_grad` is set.
pub fn conv2d_backward(
    cache: &ConvCache,
    weight: &[f32],
    grad_out: &[f32],
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
    want_input_grad: bool,
) -> Option<Vec<f32>> {
    let s = cache.shape;
    let ncols = s.out_h() * s.out_w();
    let plen = s.patch_len();
    gemm(
        s.out_channels,
        ncols,
        plen,
        grad_out,
        false,
        &cache.cols,
        true,
        1.0,
        grad_weight,
    );
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out[o * ncols..(o + 1) * ncols].iter().sum::<f32>();
    }
    if !want_input_grad {
        return None;
    }
    let mut dcols = vec![0.0f32; plen * ncols];
    gemm(
        plen,
        s.out_channels,
        ncols,
        weight,
        true,
        grad_out,
        false,
        0.0,
        &mut dcols,
    );
    if s.is_pointwise() {
        return Some(dcols);
    }
    let mut grad_in = vec![0.0f32; s.in_channels * s.in_h * s.in_w];
    col2im(&s, &dcols, &mut grad_in);
    Some(grad_in)
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace(output: &[f32], grad: &mut [f32]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `Y = X W^T + b` for `rows` inputs. `weight` is `[out, in]`.
pub fn linear_forward(
    x: &[f32],
    rows: usize,
    in_dim: usize,
    weight: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let out_dim = bias.len();
    let mut y = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(rows, in_dim, out_dim, x, false, weight, true, 1.0, &mut y);
    y
}

/// Linear backward; accumulates weight and bias gradients and returns `dX`
/// when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f32],
    rows: usize,
    in_dim: usize,
    weight: &[f32],
    grad_y: &[f32],
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
    want_input_grad: bool,
) -> Option<Vec<f32>> {
    let out_dim = grad_bias.len();
    gemm(out_dim, rows, in_dim, grad_y, true, x, false, 1.0, grad_weight);
    for r in 0..rows {
        for (gb, g) in grad_bias
            .iter_mut()
            .zip(&grad_y[r * out_dim..(r + 1) * out_dim])
        {
            *gb += g;
        }
    }
    want_input_grad.then(|| {
        let mut gx = vec![0.0f32; rows * in_dim];
        gemm(rows, out_dim, in_dim, grad_y, false, weight, false, 0.0, &mut gx);
        gx
    })
}

/// One bilinear tap: four feature-plane offsets and their weights.
#[derive(Debug, Clone, Copy)]
struct Tap {
    idx: [u32; 4],
    w: [f32; 4],
}

/// Saved sampling taps of a region pooling pass.
#[derive(Debug, Clone)]
pub struct RoiPoolCache {
    pooled: usize,
    sampling: usize,
    channels: usize,
    plane: usize,
    /// `[roi][bin][sample]` taps; `None` marks samples falling outside the map.
    taps: Vec<Option<Tap>>,
}

fn bilinear_tap(y: f64, x: f64, h: usize, w: usize) -> Option<Tap> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let (y1, x1);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some(Tap {
        idx: [
            (y0 * w + x0) as u32,
            (y0 * w + x1) as u32,
            (y1 * w + x0) as u32,
            (y1 * w + x1) as u32,
        ],
        w: [
            (hy * hx) as f32,
            (hy * lx) as f32,
            (ly * hx) as f32,
            (ly * lx) as f32,
        ],
    })
}

/// Bilinear crop-and-resize of each region (image pixels, corner convention)
/// to `pooled x pooled` bins, averaging `sampling x sampling` points per bin.
/// Output is `[roi][channel][bin_y][bin_x]`.
pub fn roi_pool_forward(
    features: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    stride: f64,
    rois: &[[f64; 4]],
    pooled: usize,
    sampling: usize,
) -> (Vec<f32>, RoiPoolCache) {
    let bins = pooled * pooled;
    let samples = sampling * sampling;
    let scale = 1.0 / stride;
    let mut taps = Vec::with_capacity(rois.len() * bins * samples);
    for r in rois {
        let x0 = r[0] * scale - 0.5;
        let y0 = r[1] * scale - 0.5;
        let bw = (r[2] - r[0]) * scale / pooled as f64;
        let bh = (r[3] - r[1]) * scale / pooled as f64;
        for py in 0..pooled {
            for px in 0..pooled {
                for sy in 0..sampling {
                    for sx in 0..sampling {
                        let y = y0 + bh * (py as f64 + (sy as f64 + 0.5) / sampling as f64);
                        let x = x0 + bw * (px as f64 + (sx as f64 + 0.5) / sampling as f64);
                        taps.push(bilinear_tap(y, x, h, w));
                    }
                }
            }
        }
    }
    let plane = h * w;
    let inv = 1.0 / samples as f32;
    let feat_len = channels * bins;
    let mut out = vec![0.0f32; rois.len() * feat_len];
    for (ri, out_r) in out.chunks_mut(feat_len.max(1)).enumerate().take(rois.len()) {
        let rtaps = &taps[ri * bins * samples..(ri + 1) * bins * samples];
        for c in 0..channels {
            let fp = &features[c * plane..(c + 1) * plane];
            for b in 0..bins {
                let mut acc = 0.0f32;
                for t in rtaps[b * samples..(b + 1) * samples].iter().flatten() {
                    for k in 0..4 {
                        acc += t.w[k] * fp[t.idx[k] as usize];
                    }
                }
                out_r[c * bins + b] = acc * inv;
            }
        }
    }
    (
        out,
        RoiPoolCache {
            pooled,
            sampling,
            channels,
            plane,
            taps,
        },
    )
}

/// Scatters pooled-output gradients back onto the feature map.
pub fn roi_pool_backward(cache: &RoiPoolCache, grad_out: &[f32], grad_features: &mut [f32]) {
    let bins = cache.pooled * cache.pooled;
    let samples = cache.sampling * cache.sampling;
    let feat_len = cache.channels * bins;
    let n_rois = grad_out.len().checked_div(feat_len).unwrap_or(0);
    let inv = 1.0 / samples as f32;
    for ri in 0..n_rois {
        let rtaps = &cache.taps[ri * bins * samples..(ri + 1) * bins * samples];
        let g_r = &grad_out[ri * feat_len..(ri + 1) * feat_len];
        for c in 0..cache.channels {
            let gp = &mut grad_features[c * cache.plane..(c + 1) * cache.plane];
            for b in 0..bins {
                let g = g_r[c * bins + b] * inv;
                if g == 0.0 {
                    continue;
                }
                for t in rtaps[b * samples..(b + 1) * samples].iter().flatten() {
                    for k in 0..4 {
                        gp[t.idx[k] as usize] += t.w[k] * g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop convolution.
    fn conv_naive(s: &ConvShape, input: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
        let (oh, ow) = (s.out_h(), s.out_w());
        let pad = s.pad() as isize;
        let mut out = vec![0.0f32; s.out_channels * oh * ow];
        for o in 0..s.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o] as f64;
                    for c in 0..s.in_channels {
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride) as isize + ky as isize - pad;
                                let ix = (ox * s.stride) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= s.in_h as isize || ix >= s.in_w as isize {
                                    continue;
                                }
                                let wv = weight[((o * s.in_channels + c) * s.kernel + ky) * s.kernel + kx];
                                acc += (wv * input[(c * s.in_h + iy as usize) * s.in_w + ix as usize]) as f64;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let s = ConvShape {
                in_channels: 3,
                out_channels: 4,
                kernel: k,
                stride,
                in_h: 7,
                in_w: 6,
            };
            let input = rand_vec(&mut rng, 3 * 7 * 6);
            let weight = rand_vec(&mut rng, 4 * s.patch_len());
            let bias = rand_vec(&mut rng, 4);
            let (out, _) = conv2d_forward(s, &input, &weight, &bias);
            let want = conv_naive(&s, &input, &weight, &bias);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = ConvShape {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            in_h: 6,
            in_w: 5,
        };
        let input = rand_vec(&mut rng, 2 * 6 * 5);
        let weight = rand_vec(&mut rng, 3 * s.patch_len());
        let bias = rand_vec(&mut rng, 3);
        let (out, cache) = conv2d_forward(s, &input, &weight, &bias);
        let probe = rand_vec(&mut rng, out.len());
        let loss = |inp: &[f32], w: &[f32]| -> f64 {
            conv_naive(&s, inp, w, &bias)
                .iter()
                .zip(&probe)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let mut gw = vec![0.0; weight.len()];
        let mut gb = vec![0.0; 3];
        let gi = conv2d_backward(&cache, &weight, &probe, &mut gw, &mut gb, true).unwrap();
        let h = 1e-2f32;
        for i in [0, 5, 17, weight.len() - 1] {
            let mut wp = weight.clone();
            wp[i] += h;
            let mut wm = weight.clone();
            wm[i] -= h;
            let fd = (loss(&input, &wp) - loss(&input, &wm)) / (2.0 * h as f64);
            assert!((fd - gw[i] as f64).abs() < 1e-3, "weight {i}: {fd} vs {}", gw[i]);
        }
        for i in [0, 7, 31, input.len() - 1] {
            let mut ip = input.clone();
            ip[i] += h;
            let mut im = input.clone();
            im[i] -= h;
            let fd = (loss(&ip, &weight) - loss(&im, &weight)) / (2.0 * h as f64);
            assert!((fd - gi[i] as f64).abs() < 1e-3, "input {i}: {fd} vs {}", gi[i]);
        }
        let bias_grad: f32 = probe[..s.out_h() * s.out_w()].iter().sum();
        assert!((gb[0] - bias_grad).abs() < 1e-5);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (rows, din, dout) = (3, 5, 4);
        let x = rand_vec(&mut rng, rows * din);
        let w = rand_vec(&mut rng, dout * din);
        let b = rand_vec(&mut rng, dout);
        let probe = rand_vec(&mut rng, rows * dout);
        let loss = |x: &[f32], w: &[f32]| -> f64 {
            linear_forward(x, rows, din, w, &b)
                .iter()
                .zip(&probe)
                .map(|(a, p)| (*a as f64) * (*p as f64))
                .sum()
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; dout];
        let gx = linear_backward(&x, rows, din, &w, &probe, &mut gw, &mut gb, true).unwrap();
        let h = 1e-2f32;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h as f64);
            assert!((fd - gw[i] as f64).abs() < 1e-3);
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h as f64);
            assert!((fd - gx[i] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn roi_pool_constant_map_and_adjoint() {
        let (c, h, w) = (2, 6, 6);
        let feats = vec![0.75f32; c * h * w];
        let rois = [[8.0, 8.0, 30.0, 40.0], [0.0, 0.0, 48.0, 48.0]];
        let (out, _) = roi_pool_forward(&feats, c, h, w, 8.0, &rois, 4, 2);
        assert!(out.iter().all(|v| (v - 0.75).abs() < 1e-6));

        // <pool(F), G> == <F, pool^T(G)>
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let feats = rand_vec(&mut rng, c * h * w);
        let (out, cache) = roi_pool_forward(&feats, c, h, w, 8.0, &rois, 4, 2);
        let g = rand_vec(&mut rng, out.len());
        let mut gf = vec![0.0f32; feats.len()];
        roi_pool_backward(&cache, &g, &mut gf);
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = feats.iter().zip(&gf).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

//! Forward and backward passes of the individual layer types.
//!
//! Every forward function can keep a cache of what its backward pass needs;
//! backward functions accumulate into the parameter gradients and return the
//! gradient with respect to the layer input.

use alloc::vec;
use alloc::vec::Vec;

use super::config::{ConvLayer, DeconvLayer, DenseLayer, UPSAMPLE_KERNEL, UPSAMPLE_PAD, UPSAMPLE_STRIDE};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Op, Real, Tensor, Window};

fn prelu_inplace<T: Real>(data: &mut [T], slope: T) {
    for v in data {
        if *v <= T::zero() {
            *v *= slope;
        }
    }
}

/// Turns the gradient w.r.t. a PReLU output into the gradient w.r.t. its
/// input in place, returning the slope gradient.
fn prelu_backward<T: Real>(pre: &[T], grad: &mut [T], slope: T) -> T {
    let mut d_slope = T::zero();
    for (g, &x) in grad.iter_mut().zip(pre) {
        if x <= T::zero() {
            d_slope += *g * x;
            *g *= slope;
        }
    }
    d_slope
}

fn add_bias<T: Real>(out: &mut Tensor<T>, bias: &[T]) {
    let n = out.plane_len();
    for (plane, &b) in out.data_mut().chunks_mut(n).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias<T: Real>(grad: &Tensor<T>, d_bias: &mut [T]) {
    let n = grad.plane_len();
    for (plane, db) in grad.data().chunks(n).zip(d_bias) {
        *db += plane.iter().fold(T::zero(), |a, &b| a + b);
    }
}

/// 2x2, stride-2 max-pool; returns the pooled stack and the flat index of
/// each winner.
pub(crate) fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    let data = x.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out.data_mut()[o] = data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

fn unpool<T: Real>(grad: &Tensor<T>, arg: &[u32], c: usize, h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(c, h, w);
    for (&i, &g) in arg.iter().zip(grad.data()) {
        out.data_mut()[i as usize] += g;
    }
    out
}

#[derive(Debug, Clone)]
pub(crate) struct ConvCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    pool: Option<Vec<u32>>,
}

/// Same-padded convolution, optional PReLU, optional 2x2 max-pool.
pub(crate) fn conv_forward<T: Real>(
    layer: &ConvLayer,
    params: &[Vec<T>],
    input: Tensor<T>,
    keep: bool,
) -> (Tensor<T>, Option<ConvCache<T>>) {
    debug_assert_eq!(input.channels(), layer.in_c);
    let (h, w) = (input.height(), input.width());
    let win = Window::same(layer.kernel, h, w);
    let taps = layer.in_c * layer.kernel * layer.kernel;
    let mut col = Vec::new();
    let mut out = Tensor::zeros(layer.out_c, h, w);
    if layer.kernel == 1 {
        gemm(layer.out_c, taps, h * w, &params[layer.weight], Op::N, input.data(), Op::N, T::zero(), out.data_mut());
    } else {
        win.im2col(input.data(), layer.in_c, &mut col);
        gemm(layer.out_c, taps, h * w, &params[layer.weight], Op::N, &col, Op::N, T::zero(), out.data_mut());
    }
    add_bias(&mut out, &params[layer.bias]);
    let pre = keep.then(|| out.clone());
    if let Some(s) = layer.slope {
        prelu_inplace(out.data_mut(), params[s][0]);
    }
    let (out, pool) = if layer.pool {
        let (p, arg) = max_pool2(&out);
        (p, Some(arg))
    } else {
        (out, None)
    };
    let cache = pre.map(|pre| ConvCache {
        input,
        pre,
        pool: if keep { pool } else { None },
    });
    (out, cache)
}

pub(crate) fn conv_backward<T: Real>(
    layer: &ConvLayer,
    params: &[Vec<T>],
    cache: &ConvCache<T>,
    grad_out: Tensor<T>,
    grads: &mut [Vec<T>],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let (h, w) = (cache.input.height(), cache.input.width());
    let mut g = match &cache.pool {
        Some(arg) => unpool(&grad_out, arg, layer.out_c, h, w),
        None => grad_out,
    };
    if let Some(s) = layer.slope {
        let ds = prelu_backward(cache.pre.data(), g.data_mut(), params[s][0]);
        grads[s][0] += ds;
    }
    accumulate_bias(&g, &mut grads[layer.bias]);

    let taps = layer.in_c * layer.kernel * layer.kernel;
    let hw = h * w;
    let win = Window::same(layer.kernel, h, w);
    let mut col = Vec::new();
    let cols: &[T] = if layer.kernel == 1 {
        cache.input.data()
    } else {
        win.im2col(cache.input.data(), layer.in_c, &mut col);
        &col
    };
    gemm(layer.out_c, hw, taps, g.data(), Op::N, cols, Op::T, T::one(), &mut grads[layer.weight]);

    if !need_input_grad {
        return None;
    }
    let mut d_col = vec![T::zero(); taps * hw];
    gemm(taps, layer.out_c, hw, &params[layer.weight], Op::T, g.data(), Op::N, T::zero(), &mut d_col);
    if layer.kernel == 1 {
        return Some(Tensor::from_vec(layer.in_c, h, w, d_col));
    }
    let mut d_in = Tensor::zeros(layer.in_c, h, w);
    win.col2im(&d_col, layer.in_c, d_in.data_mut());
    Some(d_in)
}

fn deconv_window(h: usize, w: usize) -> Window {
    Window {
        kernel: UPSAMPLE_KERNEL,
        stride: UPSAMPLE_STRIDE,
        pad: UPSAMPLE_PAD,
        in_h: h * UPSAMPLE_STRIDE,
        in_w: w * UPSAMPLE_STRIDE,
        out_h: h,
        out_w: w,
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DeconvCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

/// Transposed convolution doubling the spatial size, then PReLU. It is the
/// adjoint of a 4x4 stride-2 convolution with padding 1.
pub(crate) fn deconv_forward<T: Real>(
    layer: &DeconvLayer,
    params: &[Vec<T>],
    input: Tensor<T>,
    keep: bool,
) -> (Tensor<T>, Option<DeconvCache<T>>) {
    let (h, w) = (input.height(), input.width());
    let win = deconv_window(h, w);
    let taps = layer.out_c * UPSAMPLE_KERNEL * UPSAMPLE_KERNEL;
    let mut col = vec![T::zero(); taps * h * w];
    gemm(taps, layer.in_c, h * w, &params[layer.weight], Op::T, input.data(), Op::N, T::zero(), &mut col);
    let mut out = Tensor::zeros(layer.out_c, win.in_h, win.in_w);
    win.col2im(&col, layer.out_c, out.data_mut());
    add_bias(&mut out, &params[layer.bias]);
    let pre = keep.then(|| out.clone());
    prelu_inplace(out.data_mut(), params[layer.slope][0]);
    (out, pre.map(|pre| DeconvCache { input, pre }))
}

pub(crate) fn deconv_backward<T: Real>(
    layer: &DeconvLayer,
    params: &[Vec<T>],
    cache: &DeconvCache<T>,
    mut grad_out: Tensor<T>,
    grads: &mut [Vec<T>],
) -> Tensor<T> {
    let ds = prelu_backward(cache.pre.data(), grad_out.data_mut(), params[layer.slope][0]);
    grads[layer.slope][0] += ds;
    accumulate_bias(&grad_out, &mut grads[layer.bias]);

    let (h, w) = (cache.input.height(), cache.input.width());
    let win = deconv_window(h, w);
    let taps = layer.out_c * UPSAMPLE_KERNEL * UPSAMPLE_KERNEL;
    let mut col = Vec::new();
    win.im2col(grad_out.data(), layer.out_c, &mut col);
    gemm(layer.in_c, h * w, taps, cache.input.data(), Op::N, &col, Op::T, T::one(), &mut grads[layer.weight]);
    let mut d_in = Tensor::zeros(layer.in_c, h, w);
    gemm(layer.in_c, taps, h * w, &params[layer.weight], Op::N, &col, Op::N, T::zero(), d_in.data_mut());
    d_in
}

#[derive(Debug, Clone)]
pub(crate) struct DenseCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
}

pub(crate) fn dense_forward<T: Real>(
    layer: &DenseLayer,
    params: &[Vec<T>],
    input: Vec<T>,
    keep: bool,
) -> (Vec<T>, Option<DenseCache<T>>) {
    let mut out = params[layer.bias].clone();
    gemm(layer.outputs, layer.inputs, 1, &params[layer.weight], Op::N, &input, Op::N, T::one(), &mut out);
    let pre = keep.then(|| out.clone());
    if let Some(s) = layer.slope {
        prelu_inplace(&mut out, params[s][0]);
    }
    (out, pre.map(|pre| DenseCache { input, pre }))
}

pub(crate) fn dense_backward<T: Real>(
    layer: &DenseLayer,
    params: &[Vec<T>],
    cache: &DenseCache<T>,
    mut grad_out: Vec<T>,
    grads: &mut [Vec<T>],
) -> Vec<T> {
    if let Some(s) = layer.slope {
        let ds = prelu_backward(&cache.pre, &mut grad_out, params[s][0]);
        grads[s][0] += ds;
    }
    for (db, &g) in grads[layer.bias].iter_mut().zip(&grad_out) {
        *db += g;
    }
    gemm(layer.outputs, 1, layer.inputs, &grad_out, Op::N, &cache.input, Op::N, T::one(), &mut grads[layer.weight]);
    let mut d_in = vec![T::zero(); layer.inputs];
    gemm(layer.inputs, layer.outputs, 1, &params[layer.weight], Op::T, &grad_out, Op::N, T::zero(), &mut d_in);
    d_in
}

/// Cell `i` of an `n`-way split of `len` covers `[floor(i*len/n), ceil((i+1)*len/n))`.
fn cell_range(i: usize, n: usize, len: usize) -> (usize, usize) {
    (i * len / n, ((i + 1) * len).div_ceil(n))
}

/// Spatial pyramid max-pooling into a fixed-length vector, ordered by level,
/// then channel, then cell (row-major). Also returns the winning indices.
pub(crate) fn spp_forward<T: Real>(x: &Tensor<T>, levels: &[usize]) -> Result<(Vec<T>, Vec<u32>)> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let finest = levels.iter().copied().max().unwrap_or(0);
    if levels.contains(&0) || h < finest || w < finest {
        return Err(Error::Input(alloc::format!(
            "a {h}x{w} feature map cannot be split into the {finest}x{finest} pyramid grid"
        )));
    }
    let bins: usize = levels.iter().map(|n| n * n).sum();
    let mut out = Vec::with_capacity(c * bins);
    let mut arg = Vec::with_capacity(c * bins);
    let data = x.data();
    for &n in levels {
        for ch in 0..c {
            for i in 0..n {
                let (y0, y1) = cell_range(i, n, h);
                for j in 0..n {
                    let (x0, x1) = cell_range(j, n, w);
                    let mut best = (ch * h + y0) * w + x0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let k = (ch * h + y) * w + xx;
                            if data[k] > data[best] {
                                best = k;
                            }
                        }
                    }
                    out.push(data[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((out, arg))
}

pub(crate) fn spp_backward<T: Real>(grad: &[T], arg: &[u32], c: usize, h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(c, h, w);
    for (&i, &g) in arg.iter().zip(grad) {
        out.data_mut()[i as usize] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct (loop) convolution used as an oracle for the im2col path.
    fn direct_conv(x: &Tensor<f64>, wts: &[f64], bias: &[f64], out_c: usize, k: usize) -> Tensor<f64> {
        let (c, h, w) = (x.channels(), x.height(), x.width());
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(out_c, h, w);
        for o in 0..out_c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias[o];
                    for i in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - p;
                                let ix = xx as isize + kx as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wts[((o * c + i) * k + ky) * k + kx] * x.get(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    /// Scatter form of a stride-2, pad-1, 4x4 transposed convolution.
    fn direct_deconv(x: &Tensor<f64>, wts: &[f64], out_c: usize) -> Tensor<f64> {
        let (c, h, w) = (x.channels(), x.height(), x.width());
        let mut out = Tensor::zeros(out_c, 2 * h, 2 * w);
        for i in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    for o in 0..out_c {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oy = (2 * y + ky) as isize - 1;
                                let ox = (2 * xx + kx) as isize - 1;
                                if oy >= 0 && ox >= 0 && (oy as usize) < 2 * h && (ox as usize) < 2 * w {
                                    let idx = (o * 2 * h + oy as usize) * 2 * w + ox as usize;
                                    out.data_mut()[idx] += wts[((i * out_c + o) * 4 + ky) * 4 + kx] * x.get(i, y, xx);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn conv_layer(in_c: usize, out_c: usize, k: usize, slope: bool, pool: bool) -> ConvLayer {
        ConvLayer {
            name: "t".into(),
            weight: 0,
            bias: 1,
            slope: slope.then_some(2),
            in_c,
            out_c,
            kernel: k,
            pool,
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        for k in [1, 3, 5] {
            let x = Tensor::from_vec(2, 5, 7, random(70, k as u64));
            let params = vec![random(3 * 2 * k * k, 1), random(3, 2)];
            let (y, _) = conv_forward(&conv_layer(2, 3, k, false, false), &params, x.clone(), false);
            let want = direct_conv(&x, &params[0], &params[1], 3, k);
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_matches_scatter_loops() {
        let x = Tensor::from_vec(3, 4, 5, random(60, 7));
        let layer = DeconvLayer {
            name: "t".into(),
            weight: 0,
            bias: 1,
            slope: 2,
            in_c: 3,
            out_c: 2,
        };
        // Slope 1 makes the PReLU the identity.
        let params = vec![random(3 * 2 * 16, 8), vec![0.0; 2], vec![1.0]];
        let (y, _) = deconv_forward(&layer, &params, x.clone(), false);
        assert_eq!((y.height(), y.width()), (8, 10));
        let want = direct_deconv(&x, &params[0], 2);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_keeps_block_maxima() {
        let x = Tensor::from_vec(1, 2, 4, vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -3.0, -0.5]);
        let (p, arg) = max_pool2(&x);
        assert_eq!(p.data(), &[5.0, -0.5]);
        assert_eq!(arg, vec![1, 7]);
    }

    #[test]
    fn spp_lengths_and_values() {
        let x = Tensor::from_vec(64, 8, 8, random(64 * 64, 3));
        let (v, _) = spp_forward(&x, &[1, 2, 4]).unwrap();
        assert_eq!(v.len(), 64 * 21);
        // Level 1 is the per-channel global max.
        let (g, _) = spp_forward(&x, &[1]).unwrap();
        for c in 0..64 {
            let m = x.plane(c).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(g[c], m);
        }
        let k = Tensor::from_vec(3, 5, 7, vec![0.75; 105]);
        let (v, _) = spp_forward(&k, &[1, 2, 4]).unwrap();
        assert!(v.iter().all(|&e| e == 0.75));
        assert!(spp_forward(&Tensor::<f64>::zeros(1, 3, 8), &[1, 2, 4]).is_err());
    }

    #[test]
    fn spp_cells_cover_the_map() {
        for len in 4..12 {
            for n in [1, 2, 3, 4] {
                if len < n {
                    continue;
                }
                let mut covered = vec![false; len];
                for i in 0..n {
                    let (a, b) = cell_range(i, n, len);
                    assert!(a < b);
                    covered[a..b].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.into_iter().all(|c| c));
            }
        }
    }
}

//! Dense channel-major feature stacks and the handful of kernels the network
//! is built from (matrix products, patch unfolding and its adjoint).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Scalar type the network can be evaluated in.
///
/// Training runs in `f32`; the gradient checker runs in `f64`.
pub trait Real:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` for strided row/column layouts.
    ///
    /// # Safety
    /// Every index addressed through the given dimensions and strides must be
    /// in bounds of the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Whether a matrix operand is read as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    N,
    T,
}

/// `c (m x n) = op(a) (m x k) * op(b) (k x n) + beta * c`, all row-major.
///
/// A non-transposed `a` is stored `m x k`; a transposed one is stored `k x m`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "lhs too short");
    assert!(b.len() >= k * n, "rhs too short");
    assert!(c.len() >= m * n, "output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the length assertions above cover every element addressed by
    // the row-major strides chosen for each operand.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A `channels x height x width` stack stored channel-major, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            channels * height * width,
            "tensor data length does not match its shape"
        );
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Stacks `self` on top of `other` along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "concatenated stacks must share spatial dims"
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Splits off the first `channels` channels; the inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, channels: usize) -> (Self, Self) {
        assert!(channels <= self.channels);
        let cut = channels * self.plane_len();
        (
            Self::from_vec(channels, self.height, self.width, self.data[..cut].to_vec()),
            Self::from_vec(
                self.channels - channels,
                self.height,
                self.width,
                self.data[cut..].to_vec(),
            ),
        )
    }

    /// Copies into a zero tensor of the given (not smaller) spatial size,
    /// anchored at the top-left corner.
    pub fn zero_pad_to(&self, height: usize, width: usize) -> Self {
        assert!(height >= self.height && width >= self.width);
        let mut out = Self::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = (c * self.height + y) * self.width;
                let dst = (c * height + y) * width;
                out.data[dst..dst + self.width].copy_from_slice(&self.data[src..src + self.width]);
            }
        }
        out
    }

    /// The top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Self {
        assert!(height <= self.height && width <= self.width);
        let mut out = Self::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src = (c * self.height + y) * self.width;
                let dst = (c * height + y) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).unwrap_or_else(U::nan))
                .collect(),
        }
    }
}

/// Geometry of a strided, padded sliding window over a `height x width` plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Plane the window reads from.
    pub in_h: usize,
    pub in_w: usize,
    /// Grid of window positions.
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// Stride-1 window whose grid matches the input size (odd kernels).
    pub fn same(kernel: usize, h: usize, w: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            pad: kernel / 2,
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
        }
    }

    /// Input coordinate read by window position `o` at kernel tap `k`, if in range.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }

    /// Unfolds `input` (`channels` planes of `in_h x in_w`) into a
    /// `(channels * k * k) x (out_h * out_w)` matrix.
    pub fn im2col<T: Real>(&self, input: &[T], channels: usize, col: &mut Vec<T>) {
        let k = self.kernel;
        let grid = self.out_h * self.out_w;
        col.clear();
        col.resize(channels * k * k * grid, T::zero());
        let plane = self.in_h * self.in_w;
        for c in 0..channels {
            let src = &input[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * grid..(row + 1) * grid];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.in_h) else {
                            continue;
                        };
                        let src_row = &src[iy * self.in_w..(iy + 1) * self.in_w];
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            // Contiguous run of valid columns.
                            let lo = self.pad.saturating_sub(kx);
                            let hi = (self.in_w + self.pad).saturating_sub(kx).min(self.out_w);
                            if lo < hi {
                                let s = lo + kx - self.pad;
                                dst_row[lo..hi].copy_from_slice(&src_row[s..s + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                if let Some(ix) = self.source(ox, kx, self.in_w) {
                                    *d = src_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-adds `col` back onto
    /// `channels` planes of `in_h x in_w`.
    pub fn col2im<T: Real>(&self, col: &[T], channels: usize, out: &mut [T]) {
        let k = self.kernel;
        let grid = self.out_h * self.out_w;
        let plane = self.in_h * self.in_w;
        assert_eq!(out.len(), channels * plane);
        assert_eq!(col.len(), channels * k * k * grid);
        for c in 0..channels {
            let dst = &mut out[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * grid..(row + 1) * grid];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.in_h) else {
                            continue;
                        };
                        let src_row = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst_row = &mut dst[iy * self.in_w..(iy + 1) * self.in_w];
                        for (ox, v) in src_row.iter().enumerate() {
                            if let Some(ix) = self.source(ox, kx, self.in_w) {
                                dst_row[ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

//! Dense buffers and the handful of kernels the network layers are built on.
//!
//! Feature maps are stored channel-major (`C×H×W`), one sample at a time.
//! Convolutions lower to GEMM through `im2col`/`col2im`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type usable by the network code.
///
/// Training runs in `f32`; finite-difference gradient checks run in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
    ///
    /// `op(a)` is `m×k`, `op(b)` is `k×n`, `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Stored row-major as `rows×cols` of the *stored* matrix; transposing swaps
    // which stride walks the logical row.
    let _ = rows;
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // stored shape of a is m×k (or k×m when transposed)
                let (rsa, csa) = if trans_a { strides(k, m, true) } else { strides(m, k, false) };
                let (rsb, csb) = if trans_b { strides(n, k, true) } else { strides(k, n, false) };
                // SAFETY: bounds asserted above; strides describe dense row-major storage.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A single `C×H×W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Map<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "map buffer length");
        Self { channels, height, width, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn cast<U: Scalar>(&self) -> Map<U> {
        Map {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Geometry of a 2-d convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    /// Output extent of a convolution over `size` input pixels.
    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution over `size` input pixels.
    pub fn transposed_out(&self, size: usize) -> Option<usize> {
        ((size - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

/// Unfolds `input` into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col<T: Scalar>(input: &Map<T>, win: Window, out_h: usize, out_w: usize, cols: &mut Vec<T>) {
    let k = win.kernel;
    let (c, h, w) = input.shape();
    let n = out_h * out_w;
    cols.clear();
    cols.resize(c * k * k * n, T::zero());
    for ch in 0..c {
        let plane = &input.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..out_h {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if win.stride == 1 {
                        // contiguous run of valid x positions
                        let x0 = win.pad.saturating_sub(kx);
                        let x1 = (w + win.pad).saturating_sub(kx).min(out_w);
                        if x1 > x0 {
                            let s0 = x0 + kx - win.pad;
                            drow[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `out`.
pub fn col2im<T: Scalar>(cols: &[T], win: Window, out_h: usize, out_w: usize, out: &mut Map<T>) {
    let k = win.kernel;
    let (c, h, w) = out.shape();
    let n = out_h * out_w;
    debug_assert_eq!(cols.len(), c * k * k * n);
    for ch in 0..c {
        let plane = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * n;
                let srcrow = &cols[row..row + n];
                for oy in 0..out_h {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &srcrow[oy * out_w..(oy + 1) * out_w];
                    if win.stride == 1 {
                        let x0 = win.pad.saturating_sub(kx);
                        let x1 = (w + win.pad).saturating_sub(kx).min(out_w);
                        if x1 > x0 {
                            let d0 = x0 + kx - win.pad;
                            for (d, &v) in dst[d0..d0 + (x1 - x0)].iter_mut().zip(&s[x0..x1]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive_matmul(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                f64::gemm(m, k, n, 1.0, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        for win in [Window::new(3, 1, 1), Window::new(3, 2, 1), Window::new(4, 2, 1), Window::new(1, 2, 0)] {
            let x = Map::from_vec(2, 7, 6, (0..84).map(|i| ((i * 13 % 17) as f64) - 8.0).collect());
            let oh = win.conv_out(7).unwrap();
            let ow = win.conv_out(6).unwrap();
            let mut cols = Vec::new();
            im2col(&x, win, oh, ow, &mut cols);
            let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 7 % 11) as f64) * 0.5 - 2.0).collect();
            let lhs = dot(&cols, &y);
            let mut back = Map::zeros(2, 7, 6);
            col2im(&y, win, oh, ow, &mut back);
            let rhs = dot(&x.data, &back.data);
            assert!((lhs - rhs).abs() < 1e-9, "{win:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn window_extents() {
        let w = Window::new(3, 2, 1);
        assert_eq!(w.conv_out(128), Some(64));
        let t = Window::new(4, 2, 1);
        assert_eq!(t.transposed_out(8), Some(16));
        assert_eq!(Window::new(2, 2, 0).transposed_out(8), Some(16));
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-1000.0f64), 0.0);
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-12);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }
}

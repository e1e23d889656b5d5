//! Straight-line numeric kernels shared by the tape ops.
//!
//! Matrix products go through `matrixmultiply`, which is single-threaded with
//! a fixed blocking, so results are bit-reproducible run to run.

use crate::tensor::Real;

/// `out += a[m×k] · b[k×n]`.
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    T::gemm_strided(
        m,
        k,
        n,
        (a, k as isize, 1),
        (b, n as isize, 1),
        T::one(),
        out,
    );
}

/// `a[m×k] · b[k×n]`.
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm_strided(
        m,
        k,
        n,
        (a, k as isize, 1),
        (b, n as isize, 1),
        T::zero(),
        &mut out,
    );
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm_strided(
        m,
        k,
        n,
        (a, k as isize, 1),
        (b, 1, k as isize),
        T::zero(),
        &mut out,
    );
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm_strided(
        m,
        k,
        n,
        (a, 1, m as isize),
        (b, n as isize, 1),
        T::zero(),
        &mut out,
    );
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Eight independent partial sums let the compiler vectorize the loop.
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds `x[C×H×W]` into `[C·k·k × Ho·Wo]` with zero padding.
pub fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    let mut cols = vec![T::zero(); g.col_rows() * n];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input grid.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    let mut x = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            let v = &mut plane[iy as usize * g.width + ix as usize];
                            *v = *v + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Source taps for half-pixel bilinear resampling along one axis: for each
/// output index, `(lo, hi, weight_of_hi)`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

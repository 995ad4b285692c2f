//! Dense kernels behind the network: GEMM, im2col/col2im, max pooling.
//!
//! Spatial buffers follow the crate-wide axis order (`x` fastest). Two-dimensional
//! inputs are handled as volumes with `z = 1` and a kernel depth of one.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the network.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows x cols); stored transposed when `trans`
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
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
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: buffer extents checked above; strides describe
                // row-major or transposed-row-major layouts inside them.
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

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Spatial extent of a feature map, `[x, y, z]`.
pub type Dims = [usize; 3];

pub fn volume(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// Unfold a `channels x volume(dims)` map into a
/// `(channels * kvol) x volume(dims)` patch matrix for a stride-1,
/// same-padded convolution with kernel extent `kernel`.
pub fn im2col<T: Real>(input: &[T], channels: usize, dims: Dims, kernel: Dims, col: &mut [T]) {
    let [nx, ny, nz] = dims;
    let s = nx * ny * nz;
    let kvol = volume(kernel);
    debug_assert_eq!(input.len(), channels * s);
    debug_assert_eq!(col.len(), channels * kvol * s);
    let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    for c in 0..channels {
        let src = &input[c * s..(c + 1) * s];
        for kz in 0..kernel[2] {
            for ky in 0..kernel[1] {
                for kx in 0..kernel[0] {
                    let row = c * kvol + kx + kernel[0] * (ky + kernel[1] * kz);
                    let dst = &mut col[row * s..(row + 1) * s];
                    let ox = kx as isize - pad[0] as isize;
                    let oy = ky as isize - pad[1] as isize;
                    let oz = kz as isize - pad[2] as isize;
                    // valid x range of output positions whose source x is inside
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((nx as isize - ox).min(nx as isize)).max(0) as usize;
                    for z in 0..nz {
                        let sz = z as isize + oz;
                        for y in 0..ny {
                            let sy = y as isize + oy;
                            let out = &mut dst[nx * (y + ny * z)..nx * (y + ny * z) + nx];
                            if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize || x_lo >= x_hi {
                                out.fill(T::zero());
                                continue;
                            }
                            let base = nx * (sy as usize + ny * sz as usize);
                            out[..x_lo].fill(T::zero());
                            let sx0 = (x_lo as isize + ox) as usize;
                            out[x_lo..x_hi].copy_from_slice(&src[base + sx0..base + sx0 + (x_hi - x_lo)]);
                            out[x_hi..].fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate patch-matrix gradients back into the
/// input map.
pub fn col2im<T: Real>(col: &[T], channels: usize, dims: Dims, kernel: Dims, output: &mut [T]) {
    let [nx, ny, nz] = dims;
    let s = nx * ny * nz;
    let kvol = volume(kernel);
    debug_assert_eq!(output.len(), channels * s);
    debug_assert_eq!(col.len(), channels * kvol * s);
    let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    for c in 0..channels {
        let dst = &mut output[c * s..(c + 1) * s];
        for kz in 0..kernel[2] {
            for ky in 0..kernel[1] {
                for kx in 0..kernel[0] {
                    let row = c * kvol + kx + kernel[0] * (ky + kernel[1] * kz);
                    let src = &col[row * s..(row + 1) * s];
                    let ox = kx as isize - pad[0] as isize;
                    let oy = ky as isize - pad[1] as isize;
                    let oz = kz as isize - pad[2] as isize;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((nx as isize - ox).min(nx as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for z in 0..nz {
                        let sz = z as isize + oz;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let sy = y as isize + oy;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let base = nx * (sy as usize + ny * sz as usize);
                            let sx0 = (x_lo as isize + ox) as usize;
                            let row_in = &src[nx * (y + ny * z) + x_lo..nx * (y + ny * z) + x_hi];
                            for (d, &g) in dst[base + sx0..base + sx0 + (x_hi - x_lo)].iter_mut().zip(row_in) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `rows x cols` to row-major `cols x rows`, in cache tiles.
pub fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 16;
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r0 in (0..rows).step_by(TILE) {
        let r1 = (r0 + TILE).min(rows);
        for c0 in (0..cols).step_by(TILE) {
            let c1 = (c0 + TILE).min(cols);
            for c in c0..c1 {
                for (i, d) in dst[c * rows + r0..c * rows + r1].iter_mut().enumerate() {
                    *d = src[(r0 + i) * cols + c];
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums, a fixed summation
/// order that the compiler can vectorize.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

pub fn pooled_dims(dims: Dims, pool: Dims) -> Dims {
    [dims[0] / pool[0], dims[1] / pool[1], dims[2] / pool[2]]
}

/// Non-overlapping max pooling (stride equals window, trailing voxels
/// dropped). Returns the flat input index of each selected maximum; ties go
/// to the first voxel in scan order.
pub fn max_pool<T: Real>(input: &[T], channels: usize, dims: Dims, pool: Dims, out: &mut [T], argmax: &mut [u32]) {
    let od = pooled_dims(dims, pool);
    let s_in = volume(dims);
    let s_out = volume(od);
    for c in 0..channels {
        let src = &input[c * s_in..(c + 1) * s_in];
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                for ox in 0..od[0] {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for pz in 0..pool[2] {
                        for py in 0..pool[1] {
                            let row = dims[0] * (oy * pool[1] + py + dims[1] * (oz * pool[2] + pz));
                            for px in 0..pool[0] {
                                let i = row + ox * pool[0] + px;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = c * s_out + ox + od[0] * (oy + od[1] * oz);
                    out[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
    }
}

pub fn max_pool_backward<T: Real>(grad_out: &[T], argmax: &[u32], channels: usize, s_in: usize, s_out: usize, grad_in: &mut [T]) {
    for c in 0..channels {
        let gi = &mut grad_in[c * s_in..(c + 1) * s_in];
        for (g, &a) in grad_out[c * s_out..(c + 1) * s_out].iter().zip(&argmax[c * s_out..(c + 1) * s_out]) {
            gi[a as usize] += *g;
        }
    }
}

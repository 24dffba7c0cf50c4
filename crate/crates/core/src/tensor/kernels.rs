//! Raw numeric kernels. All dot products accumulate in `f64`.

use super::Real;

#[inline]
pub(crate) fn to_f64_vec<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

/// Register tile of the matmul kernel: `MR` rows by `NR` columns.
const MR: usize = 4;
const NR: usize = 8;

/// `a [n,k] · b [k,m]`.
///
/// Every output element is summed over `k` in ascending order starting from
/// zero, whatever the tiling, so a row's result does not depend on which
/// other rows share the call.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let b64 = to_f64_vec(b);
    let mut out = vec![T::default(); n * m];
    // MR rows of `a`, interleaved so that column kk is contiguous
    let mut apack = vec![0.0f64; k * MR];
    let full = n - n % MR;
    for i in (0..full).step_by(MR) {
        for kk in 0..k {
            for r in 0..MR {
                apack[kk * MR + r] = a[(i + r) * k + kk].as_f64();
            }
        }
        let mut j = 0;
        while j + NR <= m {
            let mut acc = [[0.0f64; NR]; MR];
            for (ap, brow) in apack.chunks_exact(MR).zip(b64.chunks_exact(m)) {
                let bv: &[f64; NR] = brow[j..j + NR].try_into().expect("tile width");
                for (acc_r, &av) in acc.iter_mut().zip(ap) {
                    for (o, bv) in acc_r.iter_mut().zip(bv) {
                        *o += av * bv;
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                for (d, &v) in out[(i + r) * m + j..(i + r) * m + j + NR].iter_mut().zip(acc_r) {
                    *d = T::from_f64(v);
                }
            }
            j += NR;
        }
        for r in 0..MR {
            for c in j..m {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    acc += apack[kk * MR + r] * b64[kk * m + c];
                }
                out[(i + r) * m + c] = T::from_f64(acc);
            }
        }
    }
    for i in full..n {
        for c in 0..m {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += a[i * k + kk].as_f64() * b64[kk * m + c];
            }
            out[i * m + c] = T::from_f64(acc);
        }
    }
    out
}

/// `aᵀ · g` for `a [n,k]`, `g [n,m]`, giving `[k,m]`.
pub(crate) fn matmul_tn<T: Real>(a: &[T], g: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    matmul(&transpose(a, 1, n, k), g, k, n, m)
}

/// `g · bᵀ` for `g [n,m]`, `b [k,m]`, giving `[n,k]`.
pub(crate) fn matmul_nt<T: Real>(g: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    matmul(g, &transpose(b, 1, k, m), n, m, k)
}

/// Swaps the last two axes of `batch` stacked `[rows, cols]` matrices.
pub(crate) fn transpose<T: Real>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for b in 0..batch {
        let src = &x[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling of `[b, h, w, c]`.
pub(crate) fn upsample2x<T: Real>(x: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(b * h2 * w2 * c);
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((bi * h + y / 2) * w + xx / 2) * c;
                out.extend_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(g: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut acc = vec![0.0f64; b * h * w * c];
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((bi * h2 + y) * w2 + xx) * c;
                let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                for ch in 0..c {
                    acc[dst + ch] += g[src + ch].as_f64();
                }
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// 3×3 patches of `[b, h, w, c]` with zero padding, as `[b·h·w, 9·c]`.
/// Column order is (dy, dx, channel) with dy, dx ∈ {-1, 0, 1}.
pub(crate) fn im2col3x3<T: Real>(x: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); b * h * w * 9 * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for (tap, (dy, dx)) in TAPS.iter().enumerate() {
                    let sy = y as isize + dy;
                    let sx = xx as isize + dx;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                    out[row + tap * c..row + (tap + 1) * c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

pub(crate) fn col2im3x3<T: Real>(g: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for (tap, (dy, dx)) in TAPS.iter().enumerate() {
                    let sy = y as isize + dy;
                    let sx = xx as isize + dx;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                    for ch in 0..c {
                        acc[dst + ch] += g[row + tap * c + ch].as_f64();
                    }
                }
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

const TAPS: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

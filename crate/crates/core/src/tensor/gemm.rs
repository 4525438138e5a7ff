//! Small dense matrix products used by the convolution kernels.
//!
//! `gemm_nn` keeps one accumulator per output element and walks the inner
//! dimension in ascending order, so its result equals a naive triple loop
//! bit for bit. The other two products only feed gradients and are free to
//! split their reductions.

use super::Element;

const COL_BLOCK: usize = 512;
const ROW_BLOCK: usize = 4;

/// `c[m x n] += a[m x k] * b[k x n]`.
pub fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut j0 = 0;
    while j0 < n {
        let jn = COL_BLOCK.min(n - j0);
        let mut i0 = 0;
        while i0 + ROW_BLOCK <= m {
            let (c0, rest) = c[i0 * n..].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, rest) = rest.split_at_mut(n);
            let c3 = &mut rest[..n];
            let (c0, c1, c2, c3) = (
                &mut c0[j0..j0 + jn],
                &mut c1[j0..j0 + jn],
                &mut c2[j0..j0 + jn],
                &mut c3[j0..j0 + jn],
            );
            for kk in 0..k {
                let w0 = a[i0 * k + kk];
                let w1 = a[(i0 + 1) * k + kk];
                let w2 = a[(i0 + 2) * k + kk];
                let w3 = a[(i0 + 3) * k + kk];
                let brow = &b[kk * n + j0..kk * n + j0 + jn];
                for ((((x, o0), o1), o2), o3) in brow
                    .iter()
                    .zip(c0.iter_mut())
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                {
                    *o0 += w0 * *x;
                    *o1 += w1 * *x;
                    *o2 += w2 * *x;
                    *o3 += w3 * *x;
                }
            }
            i0 += ROW_BLOCK;
        }
        for i in i0..m {
            let crow = &mut c[i * n + j0..i * n + j0 + jn];
            for kk in 0..k {
                let w = a[i * k + kk];
                let brow = &b[kk * n + j0..kk * n + j0 + jn];
                for (o, x) in crow.iter_mut().zip(brow) {
                    *o += w * *x;
                }
            }
        }
        j0 += jn;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
pub fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for (cx, cy) in x.chunks_exact(8).zip(y.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += cx[l] * cy[l];
        }
    }
    let mut tail = T::zero();
    for (a, b) in x[chunks * 8..].iter().zip(&y[chunks * 8..]) {
        tail += *a * *b;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `c[m x k] += a[m x n] * b[k x n]^T`.
pub fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            c[i * k + kk] += dot(arow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `c[k x n] += a[m x k]^T * b[m x n]`.
pub fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut j0 = 0;
    while j0 < n {
        let jn = COL_BLOCK.min(n - j0);
        for kk in 0..k {
            let crow = &mut c[kk * n + j0..kk * n + j0 + jn];
            for i in 0..m {
                let w = a[i * k + kk];
                if w == T::zero() {
                    continue;
                }
                let brow = &b[i * n + j0..i * n + j0 + jn];
                for (o, x) in crow.iter_mut().zip(brow) {
                    *o += w * *x;
                }
            }
        }
        j0 += jn;
    }
}

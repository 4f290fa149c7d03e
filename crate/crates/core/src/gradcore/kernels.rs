//! Dense numeric kernels shared by forward and backward passes.
//!
//! All reductions use a fixed order (four independent accumulator chains,
//! combined left-to-right) so repeated runs are bit-identical regardless of
//! batch-level threading.

use super::Real;

/// Dot product with a fixed 4-chain reduction order.
pub fn dot<E: Real>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4 * 4;
    let mut s0 = E::zero();
    let mut s1 = E::zero();
    let mut s2 = E::zero();
    let mut s3 = E::zero();
    let mut i = 0;
    while i < chunks {
        s0 = s0 + a[i] * b[i];
        s1 = s1 + a[i + 1] * b[i + 1];
        s2 = s2 + a[i + 2] * b[i + 2];
        s3 = s3 + a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = E::zero();
    while i < a.len() {
        tail = tail + a[i] * b[i];
        i += 1;
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

/// c[m,n] += a[m,k] @ b[k,n], row-major, axpy inner loop over contiguous rows.
pub fn matmul_acc<E: Real>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &ap) in a_row.iter().enumerate() {
            if ap == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + ap * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] @ b[n,k]^T (both operands traversed along contiguous rows).
pub fn matmul_transb_acc<E: Real>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// c[k,n] += a[m,k]^T @ b[m,n].
pub fn matmul_transa_acc<E: Real>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &ap) in a_row.iter().enumerate() {
            if ap == E::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + ap * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over NHWC data with a square kernel.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        n: usize,
        h: usize,
        w: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<ConvGeom> {
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom { n, h, w, c_in, c_out, k, stride, pad, oh, ow })
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    pub fn out_positions(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unrolls input patches into a [out_positions, k*k*c_in] matrix. Out-of-range
/// (padding) samples are zero.
pub fn im2col<E: Real>(input: &[E], g: &ConvGeom) -> Vec<E> {
    let mut col = vec![E::zero(); g.out_positions() * g.patch_len()];
    let row_len = g.w * g.c_in;
    for img in 0..g.n {
        let in_base = img * g.h * row_len;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let out_pos = (img * g.oh + oy) * g.ow + ox;
                let col_base = out_pos * g.patch_len();
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let ix0 = (ox * g.stride) as isize - g.pad as isize;
                    // columns [ix0, ix0+k) clipped to the valid range
                    let x_lo = ix0.max(0) as usize;
                    let x_hi = ((ix0 + g.k as isize).min(g.w as isize)) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src = in_base + iy as usize * row_len + x_lo * g.c_in;
                    let src_len = (x_hi - x_lo) * g.c_in;
                    let dst = col_base
                        + ky * g.k * g.c_in
                        + (x_lo as isize - ix0) as usize * g.c_in;
                    col[dst..dst + src_len].copy_from_slice(&input[src..src + src_len]);
                }
            }
        }
    }
    col
}

/// Scatter-adds a column-matrix gradient back onto the input layout.
pub fn col2im_acc<E: Real>(col: &[E], d_input: &mut [E], g: &ConvGeom) {
    let row_len = g.w * g.c_in;
    for img in 0..g.n {
        let in_base = img * g.h * row_len;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let out_pos = (img * g.oh + oy) * g.ow + ox;
                let col_base = out_pos * g.patch_len();
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let ix0 = (ox * g.stride) as isize - g.pad as isize;
                    let x_lo = ix0.max(0) as usize;
                    let x_hi = ((ix0 + g.k as isize).min(g.w as isize)) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let dst = in_base + iy as usize * row_len + x_lo * g.c_in;
                    let len = (x_hi - x_lo) * g.c_in;
                    let src = col_base
                        + ky * g.k * g.c_in
                        + (x_lo as isize - ix0) as usize * g.c_in;
                    for (d, s) in d_input[dst..dst + len].iter_mut().zip(&col[src..src + len]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

/// Row-wise numerically stable softmax in place.
pub fn softmax_rows_inplace<E: Real>(data: &mut [E], rows: usize, dim: usize) {
    debug_assert_eq!(data.len(), rows * dim);
    for r in 0..rows {
        let row = &mut data[r * dim..(r + 1) * dim];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

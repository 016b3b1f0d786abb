//! Convolution and pooling kernels: im2col/col2im plus a single accumulating
//! matmul primitive that every matrix product in the crate is phrased through.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// `c += a * b` where `a` is `m x k`, `b` is `k x n`, `c` is `m x n`,
/// all row-major. Four rows of `b` are folded per pass over the output
/// row, which roughly halves the memory traffic of a plain axpy loop.
/// f32 inputs take an AVX2+FMA path when the CPU has it. Accumulation
/// order is fixed either way, so results are deterministic per platform.
pub(crate) fn mm_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<E>() == std::any::TypeId::of::<f32>() && simd::avx2_fma_available()
    {
        // E == f32 here, so these casts only erase the generic parameter
        unsafe {
            let a32 = std::slice::from_raw_parts(a.as_ptr() as *const f32, a.len());
            let b32 = std::slice::from_raw_parts(b.as_ptr() as *const f32, b.len());
            let c32 = std::slice::from_raw_parts_mut(c.as_mut_ptr() as *mut f32, c.len());
            simd::mm_nn_f32(a32, b32, m, k, n, c32);
        }
        return;
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                c_row[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            p += 4;
        }
        while p < k {
            let av = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += av * bj;
            }
            p += 1;
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    pub(super) fn avx2_fma_available() -> bool {
        static AVAILABLE: OnceLock<bool> = OnceLock::new();
        *AVAILABLE.get_or_init(|| {
            is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
        })
    }

    pub(super) unsafe fn mm_nn_f32(
        a: &[f32],
        b: &[f32],
        m: usize,
        k: usize,
        n: usize,
        c: &mut [f32],
    ) {
        mm_nn_f32_inner(a, b, m, k, n, c)
    }

    /// Register-blocked GEMM: 4 output rows x 16 columns held in eight ymm
    /// accumulators across the whole k loop. Column tiles are the outer
    /// loop so one k x 16 stripe of `b` stays cache-resident while every
    /// row block consumes it.
    #[target_feature(enable = "avx2", enable = "fma")]
    unsafe fn mm_nn_f32_inner(
        a: &[f32],
        b: &[f32],
        m: usize,
        k: usize,
        n: usize,
        c: &mut [f32],
    ) {
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();

        let mut j0 = 0;
        while j0 + 16 <= n {
            let mut i = 0;
            while i + 4 <= m {
                let a0 = ap.add(i * k);
                let a1 = ap.add((i + 1) * k);
                let a2 = ap.add((i + 2) * k);
                let a3 = ap.add((i + 3) * k);
                let c0 = cp.add(i * n + j0);
                let c1 = cp.add((i + 1) * n + j0);
                let c2 = cp.add((i + 2) * n + j0);
                let c3 = cp.add((i + 3) * n + j0);
                let mut acc00 = _mm256_loadu_ps(c0);
                let mut acc01 = _mm256_loadu_ps(c0.add(8));
                let mut acc10 = _mm256_loadu_ps(c1);
                let mut acc11 = _mm256_loadu_ps(c1.add(8));
                let mut acc20 = _mm256_loadu_ps(c2);
                let mut acc21 = _mm256_loadu_ps(c2.add(8));
                let mut acc30 = _mm256_loadu_ps(c3);
                let mut acc31 = _mm256_loadu_ps(c3.add(8));
                for p in 0..k {
                    let b0 = _mm256_loadu_ps(bp.add(p * n + j0));
                    let b1 = _mm256_loadu_ps(bp.add(p * n + j0 + 8));
                    let v0 = _mm256_set1_ps(*a0.add(p));
                    acc00 = _mm256_fmadd_ps(v0, b0, acc00);
                    acc01 = _mm256_fmadd_ps(v0, b1, acc01);
                    let v1 = _mm256_set1_ps(*a1.add(p));
                    acc10 = _mm256_fmadd_ps(v1, b0, acc10);
                    acc11 = _mm256_fmadd_ps(v1, b1, acc11);
                    let v2 = _mm256_set1_ps(*a2.add(p));
                    acc20 = _mm256_fmadd_ps(v2, b0, acc20);
                    acc21 = _mm256_fmadd_ps(v2, b1, acc21);
                    let v3 = _mm256_set1_ps(*a3.add(p));
                    acc30 = _mm256_fmadd_ps(v3, b0, acc30);
                    acc31 = _mm256_fmadd_ps(v3, b1, acc31);
                }
                _mm256_storeu_ps(c0, acc00);
                _mm256_storeu_ps(c0.add(8), acc01);
                _mm256_storeu_ps(c1, acc10);
                _mm256_storeu_ps(c1.add(8), acc11);
                _mm256_storeu_ps(c2, acc20);
                _mm256_storeu_ps(c2.add(8), acc21);
                _mm256_storeu_ps(c3, acc30);
                _mm256_storeu_ps(c3.add(8), acc31);
                i += 4;
            }
            while i < m {
                let arow = ap.add(i * k);
                let crow = cp.add(i * n + j0);
                let mut acc0 = _mm256_loadu_ps(crow);
                let mut acc1 = _mm256_loadu_ps(crow.add(8));
                for p in 0..k {
                    let av = _mm256_set1_ps(*arow.add(p));
                    acc0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp.add(p * n + j0)), acc0);
                    acc1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(bp.add(p * n + j0 + 8)), acc1);
                }
                _mm256_storeu_ps(crow, acc0);
                _mm256_storeu_ps(crow.add(8), acc1);
                i += 1;
            }
            j0 += 16;
        }

        // narrow j tail, all rows
        legacy_rows(ap, bp, cp, m, k, n, j0);
    }

    /// Row-at-a-time fallback covering columns `j0..n` (the < 16 tail).
    #[target_feature(enable = "avx2", enable = "fma")]
    unsafe fn legacy_rows(
        ap: *const f32,
        bp: *const f32,
        cp: *mut f32,
        m: usize,
        k: usize,
        n: usize,
        j0: usize,
    ) {
        if j0 >= n {
            return;
        }
        let mut i = 0;
        while i + 4 <= m {
            let a0 = ap.add(i * k);
            let a1 = ap.add((i + 1) * k);
            let a2 = ap.add((i + 2) * k);
            let a3 = ap.add((i + 3) * k);
            let c0 = cp.add(i * n);
            let c1 = cp.add((i + 1) * n);
            let c2 = cp.add((i + 2) * n);
            let c3 = cp.add((i + 3) * n);

            let mut j = j0;
            while j + 8 <= n {
                let mut acc0 = _mm256_loadu_ps(c0.add(j));
                let mut acc1 = _mm256_loadu_ps(c1.add(j));
                let mut acc2 = _mm256_loadu_ps(c2.add(j));
                let mut acc3 = _mm256_loadu_ps(c3.add(j));
                for p in 0..k {
                    let bv = _mm256_loadu_ps(bp.add(p * n + j));
                    acc0 = _mm256_fmadd_ps(_mm256_set1_ps(*a0.add(p)), bv, acc0);
                    acc1 = _mm256_fmadd_ps(_mm256_set1_ps(*a1.add(p)), bv, acc1);
                    acc2 = _mm256_fmadd_ps(_mm256_set1_ps(*a2.add(p)), bv, acc2);
                    acc3 = _mm256_fmadd_ps(_mm256_set1_ps(*a3.add(p)), bv, acc3);
                }
                _mm256_storeu_ps(c0.add(j), acc0);
                _mm256_storeu_ps(c1.add(j), acc1);
                _mm256_storeu_ps(c2.add(j), acc2);
                _mm256_storeu_ps(c3.add(j), acc3);
                j += 8;
            }
            while j < n {
                let mut s0 = *c0.add(j);
                let mut s1 = *c1.add(j);
                let mut s2 = *c2.add(j);
                let mut s3 = *c3.add(j);
                for p in 0..k {
                    let bv = *bp.add(p * n + j);
                    s0 += *a0.add(p) * bv;
                    s1 += *a1.add(p) * bv;
                    s2 += *a2.add(p) * bv;
                    s3 += *a3.add(p) * bv;
                }
                *c0.add(j) = s0;
                *c1.add(j) = s1;
                *c2.add(j) = s2;
                *c3.add(j) = s3;
                j += 1;
            }
            i += 4;
        }

        // remaining rows, one at a time
        while i < m {
            let arow = ap.add(i * k);
            let crow = cp.add(i * n);
            let mut j = j0;
            while j + 8 <= n {
                let mut acc = _mm256_loadu_ps(crow.add(j));
                for p in 0..k {
                    acc = _mm256_fmadd_ps(
                        _mm256_set1_ps(*arow.add(p)),
                        _mm256_loadu_ps(bp.add(p * n + j)),
                        acc,
                    );
                }
                _mm256_storeu_ps(crow.add(j), acc);
                j += 8;
            }
            while j < n {
                let mut s = *crow.add(j);
                for p in 0..k {
                    s += *arow.add(p) * *bp.add(p * n + j);
                }
                *crow.add(j) = s;
                j += 1;
            }
            i += 1;
        }
    }
}

/// `dst[j][i] = src[i][j]` for a row-major `rows x cols` matrix.
pub(crate) fn transpose<E: Scalar>(src: &[E], rows: usize, cols: usize, dst: &mut [E]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Output spatial size of a cross-correlation sweep.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one `c_in x h x w` sample into a `(c_in*kh*kw) x (h_out*w_out)`
/// patch matrix. Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<E: Scalar>(
    input: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(cols.len(), c_in * kh * kw * h_out * w_out);
    let hw_out = h_out * w_out;
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row_base = ((c * kh + ky) * kw + kx) * hw_out;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row_base + oy * w_out..row_base + (oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // valid ox satisfy 0 <= ox + kx - pad < w
                        let shift = kx as isize - pad as isize;
                        let lo = (-shift).max(0).min(w_out as isize) as usize;
                        let hi = (w as isize - shift).max(0).min(w_out as isize) as usize;
                        dst[..lo].fill(E::ZERO);
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                        dst[hi.max(lo)..].fill(E::ZERO);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                src_row[ix as usize]
                            } else {
                                E::ZERO
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input layout
/// (the adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<E: Scalar>(
    cols: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    input_grad: &mut [E],
) {
    let hw_out = h_out * w_out;
    for c in 0..c_in {
        let plane = &mut input_grad[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row_base = ((c * kh + ky) * kw + kx) * hw_out;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row_base + oy * w_out..row_base + (oy + 1) * w_out];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation forward pass. `input` is `b x c_in x h x w`,
/// `kernels` is `c_out x c_in x kh x kw` (row-major, which matches the
/// im2col row order), output is `b x c_out x h_out x w_out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<E: Scalar>(
    input: &[E],
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kernels: &[E],
    c_out: usize,
    kh: usize,
    kw: usize,
    bias: &[E],
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let h_out = conv_out_dim(h, kh, stride, pad);
    let w_out = conv_out_dim(w, kw, stride, pad);
    let hw_out = h_out * w_out;
    let ck = c_in * kh * kw;
    let in_stride = c_in * h * w;
    let out_stride = c_out * hw_out;
    let mut out = vec![E::ZERO; b * out_stride];

    out.par_chunks_mut(out_stride)
        .zip(input.par_chunks(in_stride))
        .for_each(|(out_s, in_s)| {
            let mut cols = vec![E::ZERO; ck * hw_out];
            im2col(in_s, c_in, h, w, kh, kw, stride, pad, h_out, w_out, &mut cols);
            for (c, chunk) in out_s.chunks_mut(hw_out).enumerate() {
                chunk.fill(bias[c]);
            }
            mm_nn(kernels, &cols, c_out, ck, hw_out, out_s);
        });
    out
}

pub(crate) struct ConvGrads<E> {
    pub d_input: Option<Vec<E>>,
    pub d_kernels: Option<Vec<E>>,
    pub d_bias: Option<Vec<E>>,
}

/// Batched cross-correlation backward pass. Per-sample contributions to the
/// kernel and bias gradients are reduced in sample order so the result does
/// not depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<E: Scalar>(
    input: &[E],
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kernels: &[E],
    c_out: usize,
    kh: usize,
    kw: usize,
    d_out: &[E],
    stride: usize,
    pad: usize,
    need_input: bool,
    need_kernels: bool,
    need_bias: bool,
) -> ConvGrads<E> {
    let h_out = conv_out_dim(h, kh, stride, pad);
    let w_out = conv_out_dim(w, kw, stride, pad);
    let hw_out = h_out * w_out;
    let ck = c_in * kh * kw;
    let in_stride = c_in * h * w;
    let out_stride = c_out * hw_out;

    let mut kernels_t = Vec::new();
    if need_input {
        kernels_t = vec![E::ZERO; ck * c_out];
        transpose(kernels, c_out, ck, &mut kernels_t);
    }

    let mut d_input = if need_input {
        Some(vec![E::ZERO; b * in_stride])
    } else {
        None
    };

    // (d_kernels^T, d_bias) per sample, reduced sequentially afterwards.
    let per_sample: Vec<(Option<Vec<E>>, Option<Vec<E>>)> = match d_input.as_mut() {
        Some(di) => di
            .par_chunks_mut(in_stride)
            .zip(input.par_chunks(in_stride))
            .zip(d_out.par_chunks(out_stride))
            .map(|((di_s, in_s), dout_s)| {
                let mut dcols = vec![E::ZERO; ck * hw_out];
                mm_nn(&kernels_t, dout_s, ck, c_out, hw_out, &mut dcols);
                col2im_add(
                    &dcols, c_in, h, w, kh, kw, stride, pad, h_out, w_out, di_s,
                );
                sample_param_grads(
                    in_s, dout_s, c_in, h, w, kh, kw, stride, pad, h_out, w_out, c_out,
                    need_kernels, need_bias,
                )
            })
            .collect(),
        None => input
            .par_chunks(in_stride)
            .zip(d_out.par_chunks(out_stride))
            .map(|(in_s, dout_s)| {
                sample_param_grads(
                    in_s, dout_s, c_in, h, w, kh, kw, stride, pad, h_out, w_out, c_out,
                    need_kernels, need_bias,
                )
            })
            .collect(),
    };

    let mut d_kernels = need_kernels.then(|| vec![E::ZERO; c_out * ck]);
    let mut d_bias = need_bias.then(|| vec![E::ZERO; c_out]);
    for (dk_t, db) in per_sample {
        if let (Some(acc), Some(dk_t)) = (d_kernels.as_mut(), dk_t) {
            // dk_t is ck x c_out; accumulate transposed into c_out x ck.
            for r in 0..ck {
                for c in 0..c_out {
                    acc[c * ck + r] += dk_t[r * c_out + c];
                }
            }
        }
        if let (Some(acc), Some(db)) = (d_bias.as_mut(), db) {
            for (a, v) in acc.iter_mut().zip(db) {
                *a += v;
            }
        }
    }

    ConvGrads {
        d_input,
        d_kernels,
        d_bias,
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_param_grads<E: Scalar>(
    in_s: &[E],
    dout_s: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    c_out: usize,
    need_kernels: bool,
    need_bias: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let hw_out = h_out * w_out;
    let ck = c_in * kh * kw;
    let dk_t = need_kernels.then(|| {
        let mut cols = vec![E::ZERO; ck * hw_out];
        im2col(in_s, c_in, h, w, kh, kw, stride, pad, h_out, w_out, &mut cols);
        let mut dout_t = vec![E::ZERO; c_out * hw_out];
        transpose(dout_s, c_out, hw_out, &mut dout_t);
        let mut dk_t = vec![E::ZERO; ck * c_out];
        mm_nn(&cols, &dout_t, ck, hw_out, c_out, &mut dk_t);
        dk_t
    });
    let db = need_bias.then(|| {
        dout_s
            .chunks(hw_out)
            .map(|ch| ch.iter().fold(E::ZERO, |a, &v| a + v))
            .collect()
    });
    (dk_t, db)
}

/// 2x2/stride-2 max pooling over `b x c x h x w` (h, w even). Returns the
/// pooled tensor and, per output cell, the flat input index of its argmax
/// (first occurrence wins on ties).
pub(crate) fn maxpool2_forward<E: Scalar>(
    input: &[E],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<E>, Vec<u32>) {
    let ho = h / 2;
    let wo = w / 2;
    let mut out = vec![E::ZERO; b * c * ho * wo];
    let mut argmax = vec![0u32; out.len()];
    for s in 0..b * c {
        let plane = &input[s * h * w..(s + 1) * h * w];
        let base = s * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = 2 * oy * w + 2 * ox;
                let mut best = plane[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                let o = s * ho * wo + oy * wo + ox;
                out[o] = best;
                argmax[o] = (base + best_idx) as u32;
            }
        }
    }
    (out, argmax)
}

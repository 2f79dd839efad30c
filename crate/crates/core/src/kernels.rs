//! Raw compute kernels for the differentiable primitives.
//!
//! Every kernel keeps a fixed per-element reduction order, so results are
//! bit-stable regardless of how work is partitioned across threads: parallel
//! units own disjoint output slices, and cross-image accumulations (weight
//! gradients) fold per-image partials in batch order.
//!
//! Matmuls use a 4x4 register-blocked micro-kernel; convolutions go through
//! an explicit im2col buffer per image so both passes run as matmuls.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// `out[m][n] += a[m][k] * b[k][n]` (row-major, accumulating).
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut m0 = 0;
    while m0 + 4 <= m {
        let (head, tail) = out[m0 * n..].split_at_mut(2 * n);
        let (c0, c1) = head.split_at_mut(n);
        let (c2, c3) = tail[..2 * n].split_at_mut(n);
        let a0 = &a[m0 * k..(m0 + 1) * k];
        let a1 = &a[(m0 + 1) * k..(m0 + 2) * k];
        let a2 = &a[(m0 + 2) * k..(m0 + 3) * k];
        let a3 = &a[(m0 + 3) * k..(m0 + 4) * k];
        let mut k0 = 0;
        while k0 + 4 <= k {
            let (b0, b1, b2, b3) = (
                &b[k0 * n..(k0 + 1) * n],
                &b[(k0 + 1) * n..(k0 + 2) * n],
                &b[(k0 + 2) * n..(k0 + 3) * n],
                &b[(k0 + 3) * n..(k0 + 4) * n],
            );
            let (w00, w01, w02, w03) = (a0[k0], a0[k0 + 1], a0[k0 + 2], a0[k0 + 3]);
            let (w10, w11, w12, w13) = (a1[k0], a1[k0 + 1], a1[k0 + 2], a1[k0 + 3]);
            let (w20, w21, w22, w23) = (a2[k0], a2[k0 + 1], a2[k0 + 2], a2[k0 + 3]);
            let (w30, w31, w32, w33) = (a3[k0], a3[k0 + 1], a3[k0 + 2], a3[k0 + 3]);
            for j in 0..n {
                let (v0, v1, v2, v3) = (b0[j], b1[j], b2[j], b3[j]);
                c0[j] += w00 * v0 + w01 * v1 + w02 * v2 + w03 * v3;
                c1[j] += w10 * v0 + w11 * v1 + w12 * v2 + w13 * v3;
                c2[j] += w20 * v0 + w21 * v1 + w22 * v2 + w23 * v3;
                c3[j] += w30 * v0 + w31 * v1 + w32 * v2 + w33 * v3;
            }
            k0 += 4;
        }
        while k0 < k {
            let brow = &b[k0 * n..(k0 + 1) * n];
            let (w0, w1, w2, w3) = (a0[k0], a1[k0], a2[k0], a3[k0]);
            for j in 0..n {
                let v = brow[j];
                c0[j] += w0 * v;
                c1[j] += w1 * v;
                c2[j] += w2 * v;
                c3[j] += w3 * v;
            }
            k0 += 1;
        }
        m0 += 4;
    }
    for i in m0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m][j] += dot(a[m][..], b[j][..])` where `b` is `j x k` (i.e. `a * b^T`).
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, j: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), j * k);
    debug_assert_eq!(out.len(), m * j);
    let mut m0 = 0;
    while m0 + 4 <= m {
        let a0 = &a[m0 * k..(m0 + 1) * k];
        let a1 = &a[(m0 + 1) * k..(m0 + 2) * k];
        let a2 = &a[(m0 + 2) * k..(m0 + 3) * k];
        let a3 = &a[(m0 + 3) * k..(m0 + 4) * k];
        let mut j0 = 0;
        while j0 + 2 <= j {
            let b0 = &b[j0 * k..(j0 + 1) * k];
            let b1 = &b[(j0 + 1) * k..(j0 + 2) * k];
            let mut s = [T::zero(); 8];
            for i in 0..k {
                let (y0, y1) = (b0[i], b1[i]);
                s[0] += a0[i] * y0;
                s[1] += a0[i] * y1;
                s[2] += a1[i] * y0;
                s[3] += a1[i] * y1;
                s[4] += a2[i] * y0;
                s[5] += a2[i] * y1;
                s[6] += a3[i] * y0;
                s[7] += a3[i] * y1;
            }
            for r in 0..4 {
                out[(m0 + r) * j + j0] += s[2 * r];
                out[(m0 + r) * j + j0 + 1] += s[2 * r + 1];
            }
            j0 += 2;
        }
        while j0 < j {
            let b0 = &b[j0 * k..(j0 + 1) * k];
            let mut s = [T::zero(); 4];
            for i in 0..k {
                let y = b0[i];
                s[0] += a0[i] * y;
                s[1] += a1[i] * y;
                s[2] += a2[i] * y;
                s[3] += a3[i] * y;
            }
            for r in 0..4 {
                out[(m0 + r) * j + j0] += s[r];
            }
            j0 += 1;
        }
        m0 += 4;
    }
    for i in m0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * j..(i + 1) * j];
        let mut j0 = 0;
        while j0 + 2 <= j {
            let b0 = &b[j0 * k..(j0 + 1) * k];
            let b1 = &b[(j0 + 1) * k..(j0 + 2) * k];
            let (mut s0, mut s1) = (T::zero(), T::zero());
            for i2 in 0..k {
                s0 += a_row[i2] * b0[i2];
                s1 += a_row[i2] * b1[i2];
            }
            out_row[j0] += s0;
            out_row[j0 + 1] += s1;
            j0 += 2;
        }
        while j0 < j {
            let b_row = &b[j0 * k..(j0 + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out_row[j0] += acc;
            j0 += 1;
        }
    }
}

/// `out[k][n] += a[m][k]^T * b[m][n]`.
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut k0 = 0;
    while k0 + 4 <= k {
        let (head, tail) = out[k0 * n..].split_at_mut(2 * n);
        let (c0, c1) = head.split_at_mut(n);
        let (c2, c3) = tail[..2 * n].split_at_mut(n);
        let mut i0 = 0;
        while i0 + 4 <= m {
            let (b0, b1, b2, b3) = (
                &b[i0 * n..(i0 + 1) * n],
                &b[(i0 + 1) * n..(i0 + 2) * n],
                &b[(i0 + 2) * n..(i0 + 3) * n],
                &b[(i0 + 3) * n..(i0 + 4) * n],
            );
            let (w00, w10, w20, w30) = (
                a[i0 * k + k0],
                a[i0 * k + k0 + 1],
                a[i0 * k + k0 + 2],
                a[i0 * k + k0 + 3],
            );
            let (w01, w11, w21, w31) = (
                a[(i0 + 1) * k + k0],
                a[(i0 + 1) * k + k0 + 1],
                a[(i0 + 1) * k + k0 + 2],
                a[(i0 + 1) * k + k0 + 3],
            );
            let (w02, w12, w22, w32) = (
                a[(i0 + 2) * k + k0],
                a[(i0 + 2) * k + k0 + 1],
                a[(i0 + 2) * k + k0 + 2],
                a[(i0 + 2) * k + k0 + 3],
            );
            let (w03, w13, w23, w33) = (
                a[(i0 + 3) * k + k0],
                a[(i0 + 3) * k + k0 + 1],
                a[(i0 + 3) * k + k0 + 2],
                a[(i0 + 3) * k + k0 + 3],
            );
            for j in 0..n {
                let (v0, v1, v2, v3) = (b0[j], b1[j], b2[j], b3[j]);
                c0[j] += w00 * v0 + w01 * v1 + w02 * v2 + w03 * v3;
                c1[j] += w10 * v0 + w11 * v1 + w12 * v2 + w13 * v3;
                c2[j] += w20 * v0 + w21 * v1 + w22 * v2 + w23 * v3;
                c3[j] += w30 * v0 + w31 * v1 + w32 * v2 + w33 * v3;
            }
            i0 += 4;
        }
        while i0 < m {
            let brow = &b[i0 * n..(i0 + 1) * n];
            let (w0, w1, w2, w3) = (
                a[i0 * k + k0],
                a[i0 * k + k0 + 1],
                a[i0 * k + k0 + 2],
                a[i0 * k + k0 + 3],
            );
            for j in 0..n {
                let v = brow[j];
                c0[j] += w0 * v;
                c1[j] += w1 * v;
                c2[j] += w2 * v;
                c3[j] += w3 * v;
            }
            i0 += 1;
        }
        k0 += 4;
    }
    while k0 < k {
        let crow = &mut out[k0 * n..(k0 + 1) * n];
        for i in 0..m {
            let av = a[i * k + k0];
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        k0 += 1;
    }
}

/// Parallel `a * b^T` over row blocks of `a`; each output row is computed by
/// exactly one thread with a fixed dot order.
pub fn mm_nt_par<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, j: usize) {
    if m * k * j < 1 << 16 || m < 8 {
        mm_nt(a, b, out, m, k, j);
        return;
    }
    let band = m.div_ceil(rayon::current_num_threads().max(1)).max(4);
    out.par_chunks_mut(band * j)
        .zip(a.par_chunks(band * k))
        .for_each(|(out_band, a_band)| {
            let rows = a_band.len() / k;
            mm_nt(a_band, b, out_band, rows, k, j);
        });
}

/// Parallel `a * b` over row blocks of `a`.
pub fn mm_nn_par<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n < 1 << 16 || m < 8 {
        mm_nn(a, b, out, m, k, n);
        return;
    }
    let band = m.div_ceil(rayon::current_num_threads().max(1)).max(4);
    out.par_chunks_mut(band * n)
        .zip(a.par_chunks(band * k))
        .for_each(|(out_band, a_band)| {
            let rows = a_band.len() / k;
            mm_nn(a_band, b, out_band, rows, k, n);
        });
}

/// Copy one image `[c, h, w]` into a zero-padded buffer `[c, h+2p, w+2p]`.
fn pad_image<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, p: usize, out: &mut [T]) {
    let hp = h + 2 * p;
    let wp = w + 2 * p;
    debug_assert_eq!(out.len(), c * hp * wp);
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for ci in 0..c {
        for y in 0..h {
            let src = &img[ci * h * w + y * w..ci * h * w + y * w + w];
            let dst_off = ci * hp * wp + (y + p) * wp + p;
            out[dst_off..dst_off + w].copy_from_slice(src);
        }
    }
}

/// Output spatial extent of a convolution, if positive.
pub fn conv_out_extent(input: usize, kernel: usize, padding: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold output rows `[y0, y0+rows)` of a padded image into the
/// `[c_in*kh*kw, rows*wo]` patch matrix strip.
#[allow(clippy::too_many_arguments)]
fn im2col_strip<T: Scalar>(
    padded: &[T],
    col: &mut [T],
    c_in: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    y0: usize,
    rows: usize,
    wo: usize,
) {
    let _ = hp;
    let mut row = 0;
    for ci in 0..c_in {
        let plane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * rows * wo..(row + 1) * rows * wo];
                for (r, dst_row) in dst.chunks_mut(wo).enumerate() {
                    let src = &plane[((y0 + r) * stride + ky) * wp + kx..];
                    if stride == 1 {
                        dst_row.copy_from_slice(&src[..wo]);
                    } else {
                        for (xo, o) in dst_row.iter_mut().enumerate() {
                            *o = src[xo * stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a patch-matrix gradient strip back into a padded image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_strip_add<T: Scalar>(
    col: &[T],
    padded: &mut [T],
    c_in: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    y0: usize,
    rows: usize,
    wo: usize,
) {
    let _ = hp;
    let mut row = 0;
    for ci in 0..c_in {
        let plane = &mut padded[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * rows * wo..(row + 1) * rows * wo];
                for (r, src_row) in src.chunks(wo).enumerate() {
                    let dst = &mut plane[((y0 + r) * stride + ky) * wp + kx..];
                    if stride == 1 {
                        for (d, &s) in dst[..wo].iter_mut().zip(src_row) {
                            *d += s;
                        }
                    } else {
                        for (xo, &s) in src_row.iter().enumerate() {
                            dst[xo * stride] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output rows per strip, sized so each col strip stays cache-resident.
fn strip_rows<T: Scalar>(patch: usize, wo: usize, ho: usize) -> usize {
    const TARGET_BYTES: usize = 1 << 21;
    (TARGET_BYTES / (patch * wo * std::mem::size_of::<T>()).max(1)).clamp(1, ho)
}

/// Cross-correlation with per-channel bias over a batch.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let ho = conv_out_extent(h, kh, padding, stride).expect("validated by caller");
    let wo = conv_out_extent(w, kw, padding, stride).expect("validated by caller");
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    let patch = c_in * kh * kw;
    let strip = strip_rows::<T>(patch, wo, ho);
    let mut out = vec![T::zero(); n * c_out * ho * wo];
    out.par_chunks_mut(c_out * ho * wo)
        .zip(input.par_chunks(c_in * h * w))
        .for_each(|(out_img, in_img)| {
            let mut padded = vec![T::zero(); c_in * hp * wp];
            pad_image(in_img, c_in, h, w, padding, &mut padded);
            let mut col = vec![T::zero(); patch * strip * wo];
            let mut strip_out = vec![T::zero(); c_out * strip * wo];
            let mut y0 = 0;
            while y0 < ho {
                let rows = strip.min(ho - y0);
                let sn = rows * wo;
                im2col_strip(&padded, &mut col[..patch * sn], c_in, hp, wp, kh, kw, stride, y0, rows, wo);
                for co in 0..c_out {
                    let b = bias[co];
                    for v in strip_out[co * sn..(co + 1) * sn].iter_mut() {
                        *v = b;
                    }
                }
                mm_nn(weight, &col[..patch * sn], &mut strip_out[..c_out * sn], c_out, patch, sn);
                for co in 0..c_out {
                    out_img[co * ho * wo + y0 * wo..co * ho * wo + (y0 + rows) * wo]
                        .copy_from_slice(&strip_out[co * sn..(co + 1) * sn]);
                }
                y0 += rows;
            }
        });
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input (when `need_input`), weight
/// and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ho = conv_out_extent(h, kh, padding, stride).expect("validated by caller");
    let wo = conv_out_extent(w, kw, padding, stride).expect("validated by caller");
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    let patch = c_in * kh * kw;
    let strip = strip_rows::<T>(patch, wo, ho);

    let mut grad_input = vec![T::zero(); if need_input { n * c_in * h * w } else { 0 }];
    let mut gin_slices: Vec<Option<&mut [T]>> = if need_input {
        grad_input.chunks_mut(c_in * h * w).map(Some).collect()
    } else {
        (0..n).map(|_| None).collect()
    };

    // One pass per image: strip-tiled dW/db partials (folded in batch order
    // below) plus, when needed, the input gradient via col2im.
    let partials: Vec<(Vec<T>, Vec<T>)> = gin_slices
        .par_iter_mut()
        .zip(input.par_chunks(c_in * h * w))
        .zip(grad_out.par_chunks(c_out * ho * wo))
        .map(|((gin_img, in_img), gout_img)| {
            let mut padded = vec![T::zero(); c_in * hp * wp];
            pad_image(in_img, c_in, h, w, padding, &mut padded);
            let mut col = vec![T::zero(); patch * strip * wo];
            let mut gout_strip = vec![T::zero(); c_out * strip * wo];
            let mut dcol = if gin_img.is_some() {
                vec![T::zero(); patch * strip * wo]
            } else {
                Vec::new()
            };
            let mut gpad = if gin_img.is_some() {
                vec![T::zero(); c_in * hp * wp]
            } else {
                Vec::new()
            };

            let mut dw = vec![T::zero(); c_out * patch];
            let mut db = vec![T::zero(); c_out];
            let mut y0 = 0;
            while y0 < ho {
                let rows = strip.min(ho - y0);
                let sn = rows * wo;
                im2col_strip(&padded, &mut col[..patch * sn], c_in, hp, wp, kh, kw, stride, y0, rows, wo);
                for co in 0..c_out {
                    gout_strip[co * sn..(co + 1) * sn]
                        .copy_from_slice(&gout_img[co * ho * wo + y0 * wo..co * ho * wo + (y0 + rows) * wo]);
                }
                mm_nt(&gout_strip[..c_out * sn], &col[..patch * sn], &mut dw, c_out, sn, patch);
                if gin_img.is_some() {
                    for v in dcol[..patch * sn].iter_mut() {
                        *v = T::zero();
                    }
                    mm_tn(weight, &gout_strip[..c_out * sn], &mut dcol[..patch * sn], c_out, patch, sn);
                    col2im_strip_add(&dcol[..patch * sn], &mut gpad, c_in, hp, wp, kh, kw, stride, y0, rows, wo);
                }
                y0 += rows;
            }
            for co in 0..c_out {
                let mut acc = T::zero();
                for &g in &gout_img[co * ho * wo..(co + 1) * ho * wo] {
                    acc += g;
                }
                db[co] = acc;
            }
            if let Some(gin) = gin_img {
                for ci in 0..c_in {
                    for y in 0..h {
                        let src = &gpad[ci * hp * wp + (y + padding) * wp + padding..];
                        gin[ci * h * w + y * w..ci * h * w + y * w + w].copy_from_slice(&src[..w]);
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut grad_weight = vec![T::zero(); c_out * patch];
    let mut grad_bias = vec![T::zero(); c_out];
    for (dw, db) in partials {
        for (g, v) in grad_weight.iter_mut().zip(dw) {
            *g += v;
        }
        for (g, v) in grad_bias.iter_mut().zip(db) {
            *g += v;
        }
    }

    (grad_input, grad_weight, grad_bias)
}

/// Per-channel 3x3 convolution, padding 1, stride 1.
#[allow(clippy::too_many_arguments)]
pub fn depthwise3x3_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let hp = h + 2;
    let wp = w + 2;
    let mut out = vec![T::zero(); n * c * h * w];
    out.par_chunks_mut(c * h * w)
        .zip(input.par_chunks(c * h * w))
        .for_each(|(out_img, in_img)| {
            let mut padded = vec![T::zero(); hp * wp];
            for ci in 0..c {
                pad_image(&in_img[ci * h * w..(ci + 1) * h * w], 1, h, w, 1, &mut padded);
                let out_plane = &mut out_img[ci * h * w..(ci + 1) * h * w];
                let b = bias[ci];
                for v in out_plane.iter_mut() {
                    *v = b;
                }
                let wv = &weight[ci * 9..(ci + 1) * 9];
                for yo in 0..h {
                    let r0 = &padded[yo * wp..yo * wp + w + 2];
                    let r1 = &padded[(yo + 1) * wp..(yo + 1) * wp + w + 2];
                    let r2 = &padded[(yo + 2) * wp..(yo + 2) * wp + w + 2];
                    let out_row = &mut out_plane[yo * w..(yo + 1) * w];
                    for x in 0..w {
                        out_row[x] += wv[0] * r0[x]
                            + wv[1] * r0[x + 1]
                            + wv[2] * r0[x + 2]
                            + wv[3] * r1[x]
                            + wv[4] * r1[x + 1]
                            + wv[5] * r1[x + 2]
                            + wv[6] * r2[x]
                            + wv[7] * r2[x + 1]
                            + wv[8] * r2[x + 2];
                    }
                }
            }
        });
    out
}

/// Gradients of [`depthwise3x3_forward`].
#[allow(clippy::too_many_arguments)]
pub fn depthwise3x3_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    need_input: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hp = h + 2;
    let wp = w + 2;
    let mut grad_input = vec![T::zero(); if need_input { n * c * h * w } else { 0 }];
    let mut gin_chunks: Vec<&mut [T]> = if need_input {
        grad_input.chunks_mut(c * h * w).collect()
    } else {
        Vec::new()
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .zip(input.par_chunks(c * h * w))
        .zip(grad_out.par_chunks(c * h * w))
        .map(|((_, in_img), gout_img)| {
            let mut dw = vec![T::zero(); c * 9];
            let mut db = vec![T::zero(); c];
            let mut padded = vec![T::zero(); hp * wp];
            for ci in 0..c {
                pad_image(&in_img[ci * h * w..(ci + 1) * h * w], 1, h, w, 1, &mut padded);
                let gout_plane = &gout_img[ci * h * w..(ci + 1) * h * w];
                let mut bias_acc = T::zero();
                for &g in gout_plane {
                    bias_acc += g;
                }
                db[ci] = bias_acc;
                let dwv = &mut dw[ci * 9..(ci + 1) * 9];
                for yo in 0..h {
                    let r0 = &padded[yo * wp..yo * wp + w + 2];
                    let r1 = &padded[(yo + 1) * wp..(yo + 1) * wp + w + 2];
                    let r2 = &padded[(yo + 2) * wp..(yo + 2) * wp + w + 2];
                    let gout_row = &gout_plane[yo * w..(yo + 1) * w];
                    let mut acc = [T::zero(); 9];
                    for x in 0..w {
                        let g = gout_row[x];
                        acc[0] += g * r0[x];
                        acc[1] += g * r0[x + 1];
                        acc[2] += g * r0[x + 2];
                        acc[3] += g * r1[x];
                        acc[4] += g * r1[x + 1];
                        acc[5] += g * r1[x + 2];
                        acc[6] += g * r2[x];
                        acc[7] += g * r2[x + 1];
                        acc[8] += g * r2[x + 2];
                    }
                    for (slot, add) in dwv.iter_mut().zip(acc) {
                        *slot += add;
                    }
                }
            }
            (dw, db)
        })
        .collect();

    if need_input {
        gin_chunks
            .par_iter_mut()
            .zip(grad_out.par_chunks(c * h * w))
            .for_each(|(gin_img, gout_img)| {
                let mut gpad = vec![T::zero(); hp * wp];
                for ci in 0..c {
                    for v in gpad.iter_mut() {
                        *v = T::zero();
                    }
                    let wv = &weight[ci * 9..(ci + 1) * 9];
                    let gout_plane = &gout_img[ci * h * w..(ci + 1) * h * w];
                    for yo in 0..h {
                        let gout_row = &gout_plane[yo * w..(yo + 1) * w];
                        for (tap, &wt) in wv.iter().enumerate() {
                            let (ky, kx) = (tap / 3, tap % 3);
                            let dst = &mut gpad[(yo + ky) * wp + kx..(yo + ky) * wp + kx + w];
                            for (d, &g) in dst.iter_mut().zip(gout_row) {
                                *d += wt * g;
                            }
                        }
                    }
                    let gin_plane = &mut gin_img[ci * h * w..(ci + 1) * h * w];
                    for y in 0..h {
                        let src = &gpad[(y + 1) * wp + 1..(y + 1) * wp + 1 + w];
                        gin_plane[y * w..(y + 1) * w].copy_from_slice(src);
                    }
                }
            });
    }

    let mut grad_weight = vec![T::zero(); c * 9];
    let mut grad_bias = vec![T::zero(); c];
    for (dw, db) in partials {
        for (g, v) in grad_weight.iter_mut().zip(dw) {
            *g += v;
        }
        for (g, v) in grad_bias.iter_mut().zip(db) {
            *g += v;
        }
    }
    (grad_input, grad_weight, grad_bias)
}

/// 1x1 convolution: a per-pixel linear map across channels.
pub fn pointwise_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    n: usize,
    c_in: usize,
    c_out: usize,
    hw: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * c_out * hw];
    out.par_chunks_mut(c_out * hw)
        .zip(input.par_chunks(c_in * hw))
        .for_each(|(out_img, in_img)| {
            for co in 0..c_out {
                let b = bias[co];
                for v in out_img[co * hw..(co + 1) * hw].iter_mut() {
                    *v = b;
                }
            }
            mm_nn(weight, in_img, out_img, c_out, c_in, hw);
        });
    out
}

/// Gradients of [`pointwise_forward`].
#[allow(clippy::too_many_arguments)]
pub fn pointwise_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    n: usize,
    c_in: usize,
    c_out: usize,
    hw: usize,
    need_input: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut grad_input = vec![T::zero(); if need_input { n * c_in * hw } else { 0 }];
    if need_input {
        grad_input
            .par_chunks_mut(c_in * hw)
            .zip(grad_out.par_chunks(c_out * hw))
            .for_each(|(gin_img, gout_img)| {
                mm_tn(weight, gout_img, gin_img, c_out, c_in, hw);
            });
    }
    let partials: Vec<(Vec<T>, Vec<T>)> = input
        .par_chunks(c_in * hw)
        .zip(grad_out.par_chunks(c_out * hw))
        .map(|(in_img, gout_img)| {
            let mut dw = vec![T::zero(); c_out * c_in];
            mm_nt(gout_img, in_img, &mut dw, c_out, hw, c_in);
            let mut db = vec![T::zero(); c_out];
            for co in 0..c_out {
                let mut acc = T::zero();
                for &g in &gout_img[co * hw..(co + 1) * hw] {
                    acc += g;
                }
                db[co] = acc;
            }
            (dw, db)
        })
        .collect();

    let mut grad_weight = vec![T::zero(); c_out * c_in];
    let mut grad_bias = vec![T::zero(); c_out];
    for (dw, db) in partials {
        for (g, v) in grad_weight.iter_mut().zip(dw) {
            *g += v;
        }
        for (g, v) in grad_bias.iter_mut().zip(db) {
            *g += v;
        }
    }
    (grad_input, grad_weight, grad_bias)
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, per output
/// element, the flat input index of the selected maximum (first in row-major
/// scan on ties).
pub fn maxpool2_forward<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = h / 2;
    let wo = w / 2;
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = vec![0usize; n * c * ho * wo];
    out.par_chunks_mut(ho * wo)
        .zip(argmax.par_chunks_mut(ho * wo))
        .enumerate()
        .for_each(|(plane, (out_plane, arg_plane))| {
            let in_plane_off = plane * h * w;
            let in_plane = &input[in_plane_off..in_plane_off + h * w];
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut best_idx = (yo * 2) * w + xo * 2;
                    let mut best = in_plane[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = (yo * 2 + dy) * w + xo * 2 + dx;
                        if in_plane[idx] > best {
                            best = in_plane[idx];
                            best_idx = idx;
                        }
                    }
                    out_plane[yo * wo + xo] = best;
                    arg_plane[yo * wo + xo] = in_plane_off + best_idx;
                }
            }
        });
    let _ = (n, c);
    (out, argmax)
}

/// Scatter output gradients back to the recorded argmax positions.
pub fn maxpool2_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut grad_input = vec![T::zero(); input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        grad_input[idx] += g;
    }
    grad_input
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        out
    }

    fn arb(len: usize, salt: u64) -> Vec<f64> {
        (0..len)
            .map(|i| (((i as u64).wrapping_mul(2654435761).wrapping_add(salt) % 1000) as f64) / 499.0 - 1.0)
            .collect()
    }

    #[test]
    fn blocked_mm_variants_match_reference_on_odd_sizes() {
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (4, 4, 8), (5, 7, 9), (6, 3, 2), (9, 13, 5)] {
            let a = arb(m * k, 1);
            let b = arb(k * n, 2);
            let expect = reference_mm(&a, &b, m, k, n);

            let mut nn = vec![0.0; m * n];
            mm_nn(&a, &b, &mut nn, m, k, n);
            for (x, y) in nn.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12, "nn {}x{}x{}", m, k, n);
            }

            // b^T laid out [n, k]
            let mut bt = vec![0.0; n * k];
            for kk in 0..k {
                for j in 0..n {
                    bt[j * k + kk] = b[kk * n + j];
                }
            }
            let mut nt = vec![0.0; m * n];
            mm_nt(&a, &bt, &mut nt, m, k, n);
            for (x, y) in nt.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12, "nt {}x{}x{}", m, k, n);
            }

            // a^T laid out [k, m]: tn(a_t as [m0=k rows? ...]) -- check via
            // tn(x [m,k], y [m,n]) == x^T y with x = a^T^T
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for kk in 0..k {
                    at[kk * m + i] = a[i * k + kk];
                }
            }
            let mut tn = vec![0.0; m * n];
            mm_tn(&at, &b, &mut tn, k, m, n);
            let mut expect_tn = vec![0.0; m * n];
            for i in 0..m {
                for kk in 0..k {
                    for j in 0..n {
                        expect_tn[i * n + j] += at[kk * m + i] * b[kk * n + j];
                    }
                }
            }
            for (x, y) in tn.iter().zip(&expect_tn) {
                assert!((x - y).abs() < 1e-12, "tn {}x{}x{}", m, k, n);
            }
        }
    }

    #[test]
    fn conv_out_extent_rejects_negative() {
        assert_eq!(conv_out_extent(4, 7, 0, 1), None);
        assert_eq!(conv_out_extent(224, 7, 3, 1), Some(224));
        assert_eq!(conv_out_extent(5, 3, 0, 2), Some(2));
    }

    #[test]
    fn maxpool_tie_breaks_to_first_in_scan() {
        let input = vec![1.0f32, 1.0, 1.0, 1.0];
        let (out, argmax) = maxpool2_forward(&input, 1, 1, 2, 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn im2col_col2im_strip_round_trip() {
        // col2im(im2col(x)) multiplies each padded cell by its patch count.
        let h = 4;
        let w = 4;
        let x = arb(h * w, 3);
        let mut padded = vec![0.0; 6 * 6];
        pad_image(&x, 1, h, w, 1, &mut padded);
        let mut col = vec![0.0; 9 * h * w];
        im2col_strip(&padded, &mut col, 1, 6, 6, 3, 3, 1, 0, h, w);
        let mut back = vec![0.0; 6 * 6];
        col2im_strip_add(&col, &mut back, 1, 6, 6, 3, 3, 1, 0, h, w);
        // interior cells appear in 9 patches
        assert!((back[2 * 6 + 2] - 9.0 * padded[2 * 6 + 2]).abs() < 1e-12);
        // corner of the padding appears once
        assert!((back[0] - padded[0]).abs() < 1e-12);
    }
}

//! Raw numeric kernels behind the graph ops.
//!
//! Every kernel is bitwise deterministic: parallel loops split over output
//! elements only, and each output element is reduced in a fixed order.

use super::tensor::Element;
use rayon::prelude::*;

/// Below this many multiply-adds a serial loop beats the rayon dispatch.
const PAR_FLOP_THRESHOLD: usize = 1 << 15;

/// C[m,n] = A[m,k] · B[k,n], row-major.
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![E::zero(); m * n];
    let row = |i: usize, out_row: &mut [E]| {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * n * k < PAR_FLOP_THRESHOLD || m == 1 {
        for i in 0..m {
            row(i, &mut out[i * n..(i + 1) * n]);
        }
    } else {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    }
    out
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ — both operands row-major, so each output is a
/// dot product of two contiguous rows.
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![E::zero(); m * n];
    let row = |i: usize, out_row: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    };
    if m * n * k < PAR_FLOP_THRESHOLD || m == 1 {
        for i in 0..m {
            row(i, &mut out[i * n..(i + 1) * n]);
        }
    } else {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    }
    out
}

/// C[m,n] = A[k,m]ᵀ · B[k,n].
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![E::zero(); m * n];
    let row = |i: usize, out_row: &mut [E]| {
        for p in 0..k {
            let av = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * n * k < PAR_FLOP_THRESHOLD || m == 1 {
        for i in 0..m {
            row(i, &mut out[i * n..(i + 1) * n]);
        }
    } else {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    }
    out
}

/// Output spatial extent of a convolution axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unrolls one image [C,H,W] into columns [C·kh·kw, oh·ow].
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Element>(
    input: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut cols = vec![E::zero(); c * kh * kw * oh * ow];
    let p = oh * ow;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[(ci * kh * kw + ki * kw + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds columns [C·kh·kw, oh·ow] back onto an image [C,H,W].
#[allow(clippy::too_many_arguments)]
pub fn col2im<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut img = vec![E::zero(); c * h * w];
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[(ci * kh * kw + ki * kw + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + s;
                        }
                    }
                }
            }
        }
    }
    img
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Cross-correlation forward pass, batched over N.
pub fn conv2d_forward<E: Element>(
    input: &[E],
    weight: &[E],
    bias: Option<&[E]>,
    d: &ConvDims,
) -> Vec<E> {
    let p = d.oh * d.ow;
    let in_plane = d.in_ch * d.h * d.w;
    let out_plane = d.out_ch * p;
    let k = d.in_ch * d.kh * d.kw;
    let run_one = |n: usize, out_n: &mut [E]| {
        let cols = im2col(
            &input[n * in_plane..(n + 1) * in_plane],
            d.in_ch,
            d.h,
            d.w,
            d.kh,
            d.kw,
            d.stride,
            d.pad,
            d.oh,
            d.ow,
        );
        let res = matmul(weight, &cols, d.out_ch, k, p);
        out_n.copy_from_slice(&res);
        if let Some(b) = bias {
            for f in 0..d.out_ch {
                let bv = b[f];
                for v in &mut out_n[f * p..(f + 1) * p] {
                    *v = *v + bv;
                }
            }
        }
    };
    let mut out = vec![E::zero(); d.batch * out_plane];
    if d.batch > 1 {
        out.par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(n, out_n)| run_one(n, out_n));
    } else {
        run_one(0, &mut out[..]);
    }
    out
}

/// Backward pass of [`conv2d_forward`]. Returns (d_input, d_weight, d_bias).
pub fn conv2d_backward<E: Element>(
    input: &[E],
    weight: &[E],
    grad_out: &[E],
    d: &ConvDims,
    want_input: bool,
    want_weight: bool,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let p = d.oh * d.ow;
    let in_plane = d.in_ch * d.h * d.w;
    let out_plane = d.out_ch * p;
    let k = d.in_ch * d.kh * d.kw;

    // Per-sample partials, folded in batch order so accumulation is
    // deterministic regardless of thread scheduling.
    let partials: Vec<(Vec<E>, Vec<E>)> = (0..d.batch)
        .into_par_iter()
        .map(|n| {
            let go = &grad_out[n * out_plane..(n + 1) * out_plane];
            let dw = if want_weight {
                let cols = im2col(
                    &input[n * in_plane..(n + 1) * in_plane],
                    d.in_ch,
                    d.h,
                    d.w,
                    d.kh,
                    d.kw,
                    d.stride,
                    d.pad,
                    d.oh,
                    d.ow,
                );
                // dW = gO [F,P] · colsᵀ [P,K]
                matmul_nt(go, &cols, d.out_ch, p, k)
            } else {
                Vec::new()
            };
            let dx = if want_input {
                // dcols = Wᵀ [K,F] · gO [F,P]
                let dcols = matmul_tn(weight, go, k, d.out_ch, p);
                col2im(
                    &dcols, d.in_ch, d.h, d.w, d.kh, d.kw, d.stride, d.pad, d.oh, d.ow,
                )
            } else {
                Vec::new()
            };
            (dx, dw)
        })
        .collect();

    let mut d_input = vec![E::zero(); if want_input { d.batch * in_plane } else { 0 }];
    let mut d_weight = vec![E::zero(); if want_weight { d.out_ch * k } else { 0 }];
    let mut d_bias = vec![E::zero(); d.out_ch];
    for (n, (dx, dw)) in partials.into_iter().enumerate() {
        if want_input {
            d_input[n * in_plane..(n + 1) * in_plane].copy_from_slice(&dx);
        }
        if want_weight {
            for (acc, v) in d_weight.iter_mut().zip(&dw) {
                *acc = *acc + *v;
            }
        }
    }
    for n in 0..d.batch {
        for f in 0..d.out_ch {
            let mut acc = E::zero();
            for &g in &grad_out[n * out_plane + f * p..n * out_plane + (f + 1) * p] {
                acc = acc + g;
            }
            d_bias[f] = d_bias[f] + acc;
        }
    }
    (d_input, d_weight, d_bias)
}

/// Per-row normalization statistics: (mean, 1/sqrt(var+eps)) over groups of
/// `d` consecutive values.
pub fn norm_stats<E: Element>(x: &[E], d: usize, eps: f64) -> (Vec<E>, Vec<E>) {
    let rows = x.len() / d;
    let inv_d = E::from_f64(1.0 / d as f64);
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut s = E::zero();
        for &v in row {
            s = s + v;
        }
        let mean = s * inv_d;
        let mut var = E::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        means.push(mean);
        rstds.push(E::one() / (var + E::from_f64(eps)).sqrt());
    }
    (means, rstds)
}

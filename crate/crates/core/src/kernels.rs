//! Low-level compute kernels behind the tape operations.
//!
//! Layout notes that every kernel relies on:
//! - tensors are dense row-major (N, C, H, W);
//! - convolution weights are (C_out, C_in, K, K), biases are length C_out;
//! - every output element is produced by exactly one task with a fixed
//!   inner summation order, so results are bitwise reproducible for any
//!   worker-thread count.
//!
//! The stride-1, same-size path (kernel sizes 1, 3, 7 with half padding,
//! which is everything the networks use) runs blocked kernels: four output
//! channels per pass over a zero-padded input plane, with fused
//! multiply-adds where the target supports them. Everything else falls
//! back to a plain nested loop.

use rayon::prelude::*;

use crate::tensor::{Scalar, Shape};

/// Accumulator lanes for vectorizable reductions. Partial sums are folded
/// in a fixed order, keeping reductions deterministic.
const LANES: usize = 16;

/// Sum with lane-split accumulation (vectorizes; fixed fold order).
#[allow(clippy::needless_range_loop)]
pub fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut lanes = [T::ZERO; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for chunk in &mut chunks {
        for l in 0..LANES {
            lanes[l] = lanes[l].add(chunk[l]);
        }
    }
    let mut tail = T::ZERO;
    for &v in chunks.remainder() {
        tail = tail.add(v);
    }
    let mut total = T::ZERO;
    for l in 0..LANES {
        total = total.add(lanes[l]);
    }
    total.add(tail)
}

/// All nine 3x3 tap correlations of one output-gradient plane against
/// one padded input plane, accumulated into `acc` (row-major tap order).
///
/// Per-tap product rows accumulate into an L1-resident buffer with four
/// gradient rows fused per pass (scalar reductions do not vectorize, an
/// x-indexed accumulator does); the buffer folds once per tap in a fixed
/// lane order.
#[inline(never)]
fn tap_dots3<T: Scalar>(
    gplane: &[T],
    padded: &[T],
    wp: usize,
    h: usize,
    w: usize,
    acc: &mut [T],
) {
    const ROWS: usize = 4;
    let mut buf = vec![T::ZERO; w];
    for ky in 0..3 {
        for kx in 0..3 {
            buf.iter_mut().for_each(|v| *v = T::ZERO);
            let mut y = 0;
            while y + ROWS <= h {
                let g0 = &gplane[y * w..(y + 1) * w];
                let g1 = &gplane[(y + 1) * w..(y + 2) * w];
                let g2 = &gplane[(y + 2) * w..(y + 3) * w];
                let g3 = &gplane[(y + 3) * w..(y + 4) * w];
                let r0 = &padded[(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                let r1 = &padded[(y + 1 + ky) * wp + kx..(y + 1 + ky) * wp + kx + w];
                let r2 = &padded[(y + 2 + ky) * wp + kx..(y + 2 + ky) * wp + kx + w];
                let r3 = &padded[(y + 3 + ky) * wp + kx..(y + 3 + ky) * wp + kx + w];
                for x in 0..w {
                    let mut b = buf[x];
                    b = g0[x].madd(r0[x], b);
                    b = g1[x].madd(r1[x], b);
                    b = g2[x].madd(r2[x], b);
                    b = g3[x].madd(r3[x], b);
                    buf[x] = b;
                }
                y += ROWS;
            }
            while y < h {
                let g = &gplane[y * w..(y + 1) * w];
                let r = &padded[(y + ky) * wp + kx..(y + ky) * wp + kx + w];
                for x in 0..w {
                    buf[x] = g[x].madd(r[x], buf[x]);
                }
                y += 1;
            }
            acc[ky * 3 + kx] = acc[ky * 3 + kx].add(lane_sum(&buf));
        }
    }
}

/// Dot product with lane-split accumulation.
#[allow(clippy::needless_range_loop)]
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::ZERO; LANES];
    let mut ac = a.chunks_exact(LANES);
    let mut bc = b.chunks_exact(LANES);
    for (ca, cb) in (&mut ac).zip(&mut bc) {
        for l in 0..LANES {
            lanes[l] = ca[l].madd(cb[l], lanes[l]);
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ac.remainder().iter().zip(bc.remainder()) {
        tail = x.madd(y, tail);
    }
    let mut total = T::ZERO;
    for l in 0..LANES {
        total = total.add(lanes[l]);
    }
    total.add(tail)
}

/// Conv parameters for one call. `k` is the square kernel side.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn same_size(&self, h: usize, w: usize) -> bool {
        self.stride == 1 && self.out_hw(h, w) == (h, w)
    }
}

/// Zero-pad every (n, c) plane of `x` into one contiguous buffer of
/// (h + 2 pad) x (w + 2 pad) planes.
fn pad_planes<T: Scalar>(x: &[T], s: Shape, pad: usize) -> Vec<T> {
    let (hp, wp) = (s.h + 2 * pad, s.w + 2 * pad);
    let mut out = vec![T::ZERO; s.n * s.c * hp * wp];
    out.par_chunks_mut(hp * wp).enumerate().for_each(|(p, dst)| {
        let src = &x[p * s.h * s.w..(p + 1) * s.h * s.w];
        for y in 0..s.h {
            dst[(y + pad) * wp + pad..(y + pad) * wp + pad + s.w]
                .copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
        }
    });
    out
}

/// Weight tile for one (output-channel, input-channel) pair.
type Tile<T, const K: usize> = [[T; K]; K];

fn load_tile<T: Scalar, const K: usize>(w: &[T], co: usize, ci: usize, cin: usize) -> Tile<T, K> {
    let base = (co * cin + ci) * K * K;
    let mut t = [[T::ZERO; K]; K];
    for ky in 0..K {
        for kx in 0..K {
            t[ky][kx] = w[base + ky * K + kx];
        }
    }
    t
}

/// Accumulate the K x K correlation of one padded plane into four output
/// planes at once, sharing the input loads across the four weight tiles.
/// `padded` is one (h + K - 1) x (w + K - 1) plane.
#[inline(never)]
#[allow(clippy::too_many_arguments, clippy::manual_memcpy, clippy::needless_range_loop)]
fn accumulate_plane4<T: Scalar, const K: usize>(
    padded: &[T],
    wp: usize,
    wts: &[Tile<T, K>; 4],
    o0: &mut [T],
    o1: &mut [T],
    o2: &mut [T],
    o3: &mut [T],
    h: usize,
    w: usize,
) {
    for y in 0..h {
        let mut rows: [&[T]; K] = [&[]; K];
        for (ky, row) in rows.iter_mut().enumerate() {
            *row = &padded[(y + ky) * wp..(y + ky) * wp + w + K - 1];
        }
        let r0 = &mut o0[y * w..(y + 1) * w];
        let r1 = &mut o1[y * w..(y + 1) * w];
        let r2 = &mut o2[y * w..(y + 1) * w];
        let r3 = &mut o3[y * w..(y + 1) * w];
        for x in 0..w {
            let mut inp = [[T::ZERO; K]; K];
            for ky in 0..K {
                let r = rows[ky];
                for kx in 0..K {
                    inp[ky][kx] = r[x + kx];
                }
            }
            let mut a0 = r0[x];
            let mut a1 = r1[x];
            let mut a2 = r2[x];
            let mut a3 = r3[x];
            for ky in 0..K {
                for kx in 0..K {
                    let v = inp[ky][kx];
                    a0 = wts[0][ky][kx].madd(v, a0);
                    a1 = wts[1][ky][kx].madd(v, a1);
                    a2 = wts[2][ky][kx].madd(v, a2);
                    a3 = wts[3][ky][kx].madd(v, a3);
                }
            }
            r0[x] = a0;
            r1[x] = a1;
            r2[x] = a2;
            r3[x] = a3;
        }
    }
}

/// Single-plane variant for the channel-count remainder.
#[inline(never)]
#[allow(clippy::needless_range_loop)]
fn accumulate_plane1<T: Scalar, const K: usize>(
    padded: &[T],
    wp: usize,
    wt: &Tile<T, K>,
    out: &mut [T],
    h: usize,
    w: usize,
) {
    for y in 0..h {
        let mut rows: [&[T]; K] = [&[]; K];
        for (ky, row) in rows.iter_mut().enumerate() {
            *row = &padded[(y + ky) * wp..(y + ky) * wp + w + K - 1];
        }
        let orow = &mut out[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = orow[x];
            for ky in 0..K {
                let r = rows[ky];
                for kx in 0..K {
                    acc = wt[ky][kx].madd(r[x + kx], acc);
                }
            }
            orow[x] = acc;
        }
    }
}

/// Same-size correlation driver shared by the forward pass and the
/// backward-by-input pass. Computes, for every batch element,
/// `out[co] = bias[co] + sum_ci corr(x[ci], w[co][ci])`.
fn conv_same<T: Scalar, const K: usize>(
    x: &[T],
    xs: Shape,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (h, wd) = (xs.h, xs.w);
    let cin = xs.c;
    let pad = (K - 1) / 2;
    let plane = h * wd;
    let wp = wd + K - 1;
    let padded = if K == 1 { Vec::new() } else { pad_planes(x, xs, pad) };
    let padded_plane = (h + K - 1) * wp;

    out.par_chunks_mut(cout * plane).enumerate().for_each(|(n, out_n)| {
        out_n.par_chunks_mut(4 * plane).enumerate().for_each(|(blk, out_blk)| {
            let co0 = blk * 4;
            let bsize = out_blk.len() / plane;
            for (b, o) in out_blk.chunks_mut(plane).enumerate() {
                let init = bias.map_or(T::ZERO, |bs| bs[co0 + b]);
                o.iter_mut().for_each(|v| *v = init);
            }
            for ci in 0..cin {
                let src = if K == 1 {
                    &x[(n * cin + ci) * plane..(n * cin + ci + 1) * plane]
                } else {
                    &padded[(n * cin + ci) * padded_plane..(n * cin + ci + 1) * padded_plane]
                };
                if bsize == 4 {
                    let wts = [
                        load_tile::<T, K>(w, co0, ci, cin),
                        load_tile::<T, K>(w, co0 + 1, ci, cin),
                        load_tile::<T, K>(w, co0 + 2, ci, cin),
                        load_tile::<T, K>(w, co0 + 3, ci, cin),
                    ];
                    let (o0, rest) = out_blk.split_at_mut(plane);
                    let (o1, rest) = rest.split_at_mut(plane);
                    let (o2, o3) = rest.split_at_mut(plane);
                    accumulate_plane4::<T, K>(src, wp, &wts, o0, o1, o2, o3, h, wd);
                } else {
                    for (b, o) in out_blk.chunks_mut(plane).enumerate() {
                        let wt = load_tile::<T, K>(w, co0 + b, ci, cin);
                        accumulate_plane1::<T, K>(src, wp, &wt, o, h, wd);
                    }
                }
            }
        });
    });
}

fn conv_same_dispatch<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    spec: ConvSpec,
    bias: Option<&[T]>,
    out: &mut [T],
) -> bool {
    if !spec.same_size(xs.h, xs.w) {
        return false;
    }
    match spec.k {
        1 => conv_same::<T, 1>(x, xs, w, spec.cout, bias, out),
        3 => conv_same::<T, 3>(x, xs, w, spec.cout, bias, out),
        5 => conv_same::<T, 5>(x, xs, w, spec.cout, bias, out),
        7 => conv_same::<T, 7>(x, xs, w, spec.cout, bias, out),
        _ => return false,
    }
    true
}

/// Plain reference path for strides and kernel sizes outside the fast
/// path. Still deterministic, just slow.
fn conv_naive<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    spec: ConvSpec,
    bias: Option<&[T]>,
    out: &mut [T],
    os: Shape,
) {
    let (k, stride, pad) = (spec.k, spec.stride, spec.pad);
    for n in 0..xs.n {
        for co in 0..spec.cout {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = bias.map_or(T::ZERO, |bs| bs[co]);
                    for ci in 0..xs.c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                let xv = x[xs.offset(n, ci, iy as usize, ix as usize)];
                                let wv = w[((co * xs.c + ci) * k + ky) * k + kx];
                                acc = wv.madd(xv, acc);
                            }
                        }
                    }
                    out[os.offset(n, co, oy, ox)] = acc;
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    spec: ConvSpec,
    bias: &[T],
    out: &mut [T],
    os: Shape,
) {
    if !conv_same_dispatch(x, xs, w, spec, Some(bias), out) {
        conv_naive(x, xs, w, spec, Some(bias), out, os);
    }
}

/// Gradient w.r.t. the convolution input. For the same-size path this is
/// the correlation of the output gradient with channel-transposed,
/// spatially flipped weights, so it reuses the forward driver.
pub fn conv2d_backward_input<T: Scalar>(
    gout: &[T],
    os: Shape,
    w: &[T],
    spec: ConvSpec,
    gin: &mut [T],
    xs: Shape,
) {
    if spec.same_size(xs.h, xs.w) {
        let k = spec.k;
        let mut wt = vec![T::ZERO; spec.cin * spec.cout * k * k];
        for co in 0..spec.cout {
            for ci in 0..spec.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        wt[((ci * spec.cout + co) * k + ky) * k + kx] =
                            w[((co * spec.cin + ci) * k + k - 1 - ky) * k + k - 1 - kx];
                    }
                }
            }
        }
        let flipped = ConvSpec { cout: spec.cin, cin: spec.cout, ..spec };
        if conv_same_dispatch(gout, os, &wt, flipped, None, gin) {
            return;
        }
    }
    // scatter form: every output grad cell pushes into the input cells
    // its window covered
    let (k, stride, pad) = (spec.k, spec.stride, spec.pad);
    gin.iter_mut().for_each(|v| *v = T::ZERO);
    for n in 0..xs.n {
        for co in 0..spec.cout {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = gout[os.offset(n, co, oy, ox)];
                    for ci in 0..xs.c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                let wv = w[((co * xs.c + ci) * k + ky) * k + kx];
                                gin[xs.offset(n, ci, iy as usize, ix as usize)] =
                                    wv.madd(g, gin[xs.offset(n, ci, iy as usize, ix as usize)]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients w.r.t. weights and bias. Parallel over output channels; the
/// per-channel accumulation order (batch, input channel, row, tap, column
/// lanes) is fixed.
pub fn conv2d_backward_weights<T: Scalar>(
    x: &[T],
    xs: Shape,
    gout: &[T],
    os: Shape,
    spec: ConvSpec,
    gw: &mut [T],
    gb: &mut [T],
) {
    let (k, stride, pad) = (spec.k, spec.stride, spec.pad);
    let fast = spec.same_size(xs.h, xs.w);
    let padded = if fast { pad_planes(x, xs, pad) } else { Vec::new() };
    let wp = xs.w + 2 * pad;
    let padded_plane = (xs.h + 2 * pad) * wp;
    let oplane = os.h * os.w;
    let taps = k * k;

    gw.par_chunks_mut(spec.cin * taps)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(co, (gw_co, gb_co))| {
            let mut bias_acc = T::ZERO;
            for n in 0..xs.n {
                let gplane = &gout[(n * spec.cout + co) * oplane..][..oplane];
                bias_acc = bias_acc.add(lane_sum(gplane));
                for ci in 0..spec.cin {
                    if fast {
                        let src = &padded[(n * xs.c + ci) * padded_plane..][..padded_plane];
                        if k == 3 {
                            tap_dots3(gplane, src, wp, os.h, os.w, &mut gw_co[ci * 9..(ci + 1) * 9]);
                        } else {
                            for y in 0..os.h {
                                let grow = &gplane[y * os.w..(y + 1) * os.w];
                                for ky in 0..k {
                                    let irow = &src[(y + ky) * wp..(y + ky) * wp + os.w + k - 1];
                                    for kx in 0..k {
                                        gw_co[(ci * k + ky) * k + kx] = gw_co
                                            [(ci * k + ky) * k + kx]
                                            .add(lane_dot(grow, &irow[kx..kx + os.w]));
                                    }
                                }
                            }
                        }
                    } else {
                        for oy in 0..os.h {
                            for ox in 0..os.w {
                                let g = gout[os.offset(n, co, oy, ox)];
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= xs.h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= xs.w as isize {
                                            continue;
                                        }
                                        let xi = x[xs.offset(n, ci, iy as usize, ix as usize)];
                                        let idx = (ci * k + ky) * k + kx;
                                        gw_co[idx] = xi.madd(g, gw_co[idx]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            *gb_co = bias_acc;
        });
}

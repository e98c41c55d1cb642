//! Raw convolution, pooling and upconvolution loops.
//!
//! Every kernel is written so the innermost loop runs over the contiguous
//! fastest-moving axis (`W`), which lets the compiler vectorize it. The
//! k=3/pad=1 and k=1/pad=0 stride-1 cases (the only ones the networks use)
//! have fused row kernels that keep accumulators in registers; a generic
//! per-tap path covers everything else. Rayon splits work across output
//! channels (forward), input channels (input gradients) or filters (weight
//! gradients); each chunk is written by exactly one thread and computed by
//! a fixed-order sequential reduction, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

/// `out[i] += w * x[i]`.
#[inline]
fn row1_acc(out: &mut [f32], x: &[f32], w: f32) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = w.mul_add(v, *o);
    }
}

/// 8-lane partial dot product; lane sums stay in registers across rows and
/// are reduced once, in a fixed order, by [`lanes_sum`].
#[inline]
fn lane_dot(a: &[f32], b: &[f32], lanes: &mut [f32; 8]) {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (a8, b8) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for j in 0..8 {
            lanes[j] = a8[j].mul_add(b8[j], lanes[j]);
        }
    }
    for (t, (&av, &bv)) in a[chunks * 8..].iter().zip(&b[chunks * 8..]).enumerate() {
        lanes[t] = av.mul_add(bv, lanes[t]);
    }
}

#[inline]
fn lanes_sum(lanes: &[f32; 8]) -> f32 {
    let mut s = 0.0f32;
    for &v in lanes {
        s += v;
    }
    s
}

/// Generic per-tap row accumulation:
/// `orow[o] += wv * xrow[o*sw + kj - pw]` over the valid range of `o`.
#[inline]
fn accumulate_row(orow: &mut [f32], xrow: &[f32], wv: f32, ow: usize, wd: usize, sw: usize, kj: usize, pw: usize) {
    if sw == 1 {
        let lo = pw.saturating_sub(kj);
        let hi = (wd + pw).saturating_sub(kj).min(ow);
        if lo >= hi {
            return;
        }
        let off = lo + kj - pw;
        let dst = &mut orow[lo..hi];
        let src = &xrow[off..off + (hi - lo)];
        for i in 0..dst.len() {
            dst[i] = wv.mul_add(src[i], dst[i]);
        }
    } else {
        for (o, dst) in orow.iter_mut().enumerate().take(ow) {
            let iw = (o * sw + kj) as isize - pw as isize;
            if iw >= 0 && iw < wd as isize {
                *dst = wv.mul_add(xrow[iw as usize], *dst);
            }
        }
    }
}

/// `drow[i] += wv * grow[i + pw - kj]` over the valid range of `i`
/// (stride-1 input-gradient counterpart of [`accumulate_row`]).
#[inline]
fn accumulate_row_back(drow: &mut [f32], grow: &[f32], wv: f32, wd: usize, ow: usize, kj: usize, pw: usize) {
    let lo = kj.saturating_sub(pw);
    let hi = (ow + kj).saturating_sub(pw).min(wd);
    if lo >= hi {
        return;
    }
    let off = lo + pw - kj;
    let dst = &mut drow[lo..hi];
    let src = &grow[off..off + (hi - lo)];
    for i in 0..dst.len() {
        dst[i] = wv.mul_add(src[i], dst[i]);
    }
}

/// `dst[i] += w0*src[i] + w1*src[i+1] + w2*src[i+2]` over a zero-padded
/// source (`src.len() == dst.len() + 2`); one long flat loop, no edges.
#[inline]
fn flat3_acc(dst: &mut [f32], src: &[f32], w0: f32, w1: f32, w2: f32) {
    debug_assert_eq!(src.len(), dst.len() + 2);
    for i in 0..dst.len() {
        dst[i] = w0.mul_add(src[i], w1.mul_add(src[i + 1], w2.mul_add(src[i + 2], dst[i])));
    }
}

/// Three shifted lane dots sharing the `g` loads:
/// `lanes[t] += sum_i g[i] * src[i + t]` for taps t = 0, 1, 2.
#[inline]
fn flat3_dot(g: &[f32], src: &[f32], lanes: &mut [[f32; 8]; 3]) {
    debug_assert_eq!(src.len(), g.len() + 2);
    let chunks = g.len() / 8;
    for k in 0..chunks {
        let g8 = &g[k * 8..k * 8 + 8];
        let s = &src[k * 8..k * 8 + 10];
        for j in 0..8 {
            lanes[0][j] = g8[j].mul_add(s[j], lanes[0][j]);
        }
        for j in 0..8 {
            lanes[1][j] = g8[j].mul_add(s[j + 1], lanes[1][j]);
        }
        for j in 0..8 {
            lanes[2][j] = g8[j].mul_add(s[j + 2], lanes[2][j]);
        }
    }
    for (t, &gv) in g[chunks * 8..].iter().enumerate() {
        let base = chunks * 8 + t;
        lanes[0][t] = gv.mul_add(src[base], lanes[0][t]);
        lanes[1][t] = gv.mul_add(src[base + 1], lanes[1][t]);
        lanes[2][t] = gv.mul_add(src[base + 2], lanes[2][t]);
    }
}

/// Copy a dense `[C, D, H, W]` block into per-channel zero-padded
/// `[C, D+2, H+2, W+2]` storage.
fn pad_channels_3d(x: &[f32], c_in: usize, d: usize, h: usize, wd: usize) -> Vec<f32> {
    let (ph2, pw2) = (h + 2, wd + 2);
    let chan = (d + 2) * ph2 * pw2;
    let mut xp = vec![0.0f32; c_in * chan];
    for c in 0..c_in {
        for z in 0..d {
            for y in 0..h {
                let src = &x[((c * d + z) * h + y) * wd..][..wd];
                let dst = &mut xp[c * chan + ((z + 1) * ph2 + y + 1) * pw2 + 1..][..wd];
                dst.copy_from_slice(src);
            }
        }
    }
    xp
}

/// Same for `[C, H, W]` planes into `[C, H+2, W+2]`.
fn pad_channels_2d(x: &[f32], c_in: usize, h: usize, wd: usize) -> Vec<f32> {
    let pw2 = wd + 2;
    let chan = (h + 2) * pw2;
    let mut xp = vec![0.0f32; c_in * chan];
    for c in 0..c_in {
        for y in 0..h {
            let src = &x[(c * h + y) * wd..][..wd];
            let dst = &mut xp[c * chan + (y + 1) * pw2 + 1..][..wd];
            dst.copy_from_slice(src);
        }
    }
    xp
}

// ---------------------------------------------------------------------------
// 2D convolution, input [N,C,H,W], weight [F,C,KH,KW]
// ---------------------------------------------------------------------------

pub fn conv2d_out_shape(xs: [usize; 4], ws: [usize; 4], stride: [usize; 2], pad: [usize; 2]) -> [usize; 4] {
    let oh = (xs[2] + 2 * pad[0] - ws[2]) / stride[0] + 1;
    let ow = (xs[3] + 2 * pad[1] - ws[3]) / stride[1] + 1;
    [xs[0], ws[0], oh, ow]
}

fn is_same3_2d(ws: [usize; 4], stride: [usize; 2], pad: [usize; 2]) -> bool {
    ws[2] == 3 && ws[3] == 3 && stride == [1, 1] && pad == [1, 1]
}

fn is_pointwise_2d(ws: [usize; 4], stride: [usize; 2], pad: [usize; 2]) -> bool {
    ws[2] == 1 && ws[3] == 1 && stride == [1, 1] && pad == [0, 0]
}

pub fn conv2d_forward(
    x: &[f32],
    xs: [usize; 4],
    w: &[f32],
    ws: [usize; 4],
    bias: Option<&[f32]>,
    stride: [usize; 2],
    pad: [usize; 2],
    out: &mut [f32],
) {
    let [n_batch, c_in, h, wd] = xs;
    let [_, _, kh, kw] = ws;
    let os = conv2d_out_shape(xs, ws, stride, pad);
    let (f_out, oh, ow) = (os[1], os[2], os[3]);
    let [sh, sw] = stride;
    let [ph, pw] = pad;

    if is_pointwise_2d(ws, stride, pad) {
        // per-channel AXPY over the whole plane
        let plane = h * wd;
        for n in 0..n_batch {
            let x_n = &x[n * c_in * plane..][..c_in * plane];
            let out_n = &mut out[n * f_out * plane..][..f_out * plane];
            out_n.par_chunks_mut(plane).enumerate().for_each(|(f, of)| {
                of.fill(bias.map_or(0.0, |b| b[f]));
                for c in 0..c_in {
                    row1_acc(of, &x_n[c * plane..][..plane], w[f * c_in + c]);
                }
            });
        }
        return;
    }

    if is_same3_2d(ws, stride, pad) {
        let pw2 = wd + 2;
        let chan = (h + 2) * pw2;
        let q_min = pw2 + 1; // padded index of (0, 0)
        let span = (h - 1) * pw2 + wd; // through padded index of (H-1, W-1)
        for n in 0..n_batch {
            let xp = pad_channels_2d(&x[n * c_in * h * wd..][..c_in * h * wd], c_in, h, wd);
            let out_n = &mut out[n * f_out * oh * ow..][..f_out * oh * ow];
            out_n.par_chunks_mut(oh * ow).enumerate().for_each(|(f, of)| {
                let mut scratch = vec![0.0f32; chan];
                for c in 0..c_in {
                    let xpc = &xp[c * chan..][..chan];
                    let wfc = &w[(f * c_in + c) * 9..][..9];
                    for ki in 0..3 {
                        let base = (q_min as isize + (ki as isize - 1) * pw2 as isize) as usize;
                        flat3_acc(
                            &mut scratch[q_min..q_min + span],
                            &xpc[base - 1..base - 1 + span + 2],
                            wfc[ki * 3],
                            wfc[ki * 3 + 1],
                            wfc[ki * 3 + 2],
                        );
                    }
                }
                let bv = bias.map_or(0.0, |b| b[f]);
                for y in 0..h {
                    let src = &scratch[(y + 1) * pw2 + 1..][..wd];
                    let dst = &mut of[y * wd..][..wd];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + bv;
                    }
                }
            });
        }
        return;
    }

    // generic path
    for n in 0..n_batch {
        let x_n = &x[n * c_in * h * wd..][..c_in * h * wd];
        let out_n = &mut out[n * f_out * oh * ow..][..f_out * oh * ow];
        out_n.par_chunks_mut(oh * ow).enumerate().for_each(|(f, of)| {
            of.fill(bias.map_or(0.0, |b| b[f]));
            for c in 0..c_in {
                let xc = &x_n[c * h * wd..][..h * wd];
                let wfc = &w[(f * c_in + c) * kh * kw..][..kh * kw];
                for orow_i in 0..oh {
                    let orow = &mut of[orow_i * ow..][..ow];
                    for ki in 0..kh {
                        let ih = (orow_i * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &xc[ih as usize * wd..][..wd];
                        for kj in 0..kw {
                            accumulate_row(orow, xrow, wfc[ki * kw + kj], ow, wd, sw, kj, pw);
                        }
                    }
                }
            }
        });
    }
}

pub fn conv2d_backward_input(
    g: &[f32],
    dx: &mut [f32],
    xs: [usize; 4],
    w: &[f32],
    ws: [usize; 4],
    stride: [usize; 2],
    pad: [usize; 2],
) {
    let [n_batch, c_in, h, wd] = xs;
    let [f_out, _, kh, kw] = ws;
    let os = conv2d_out_shape(xs, ws, stride, pad);
    let (oh, ow) = (os[2], os[3]);
    let [sh, sw] = stride;
    let [ph, pw] = pad;

    if is_pointwise_2d(ws, stride, pad) {
        let plane = h * wd;
        for n in 0..n_batch {
            let g_n = &g[n * f_out * plane..][..f_out * plane];
            let dx_n = &mut dx[n * c_in * plane..][..c_in * plane];
            dx_n.par_chunks_mut(plane).enumerate().for_each(|(c, dc)| {
                for f in 0..f_out {
                    row1_acc(dc, &g_n[f * plane..][..plane], w[f * c_in + c]);
                }
            });
        }
        return;
    }

    if is_same3_2d(ws, stride, pad) {
        // adjoint of same-padding 3x3 is a 3x3 correlation with the
        // fully flipped kernel over the zero-padded gradient
        let pw2 = wd + 2;
        let chan = (h + 2) * pw2;
        let q_min = pw2 + 1;
        let span = (h - 1) * pw2 + wd;
        for n in 0..n_batch {
            let gp = pad_channels_2d(&g[n * f_out * oh * ow..][..f_out * oh * ow], f_out, oh, ow);
            let dx_n = &mut dx[n * c_in * h * wd..][..c_in * h * wd];
            dx_n.par_chunks_mut(h * wd).enumerate().for_each(|(c, dc)| {
                let mut scratch = vec![0.0f32; chan];
                for f in 0..f_out {
                    let gpf = &gp[f * chan..][..chan];
                    let wfc = &w[(f * c_in + c) * 9..][..9];
                    for ki in 0..3 {
                        let base = (q_min as isize + (ki as isize - 1) * pw2 as isize) as usize;
                        // flipped taps: weight row (2 - ki), columns reversed
                        let wrow = &wfc[(2 - ki) * 3..][..3];
                        flat3_acc(
                            &mut scratch[q_min..q_min + span],
                            &gpf[base - 1..base - 1 + span + 2],
                            wrow[2],
                            wrow[1],
                            wrow[0],
                        );
                    }
                }
                for y in 0..h {
                    let src = &scratch[(y + 1) * pw2 + 1..][..wd];
                    let dst = &mut dc[y * wd..][..wd];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
        }
        return;
    }

    for n in 0..n_batch {
        let g_n = &g[n * f_out * oh * ow..][..f_out * oh * ow];
        let dx_n = &mut dx[n * c_in * h * wd..][..c_in * h * wd];
        dx_n.par_chunks_mut(h * wd).enumerate().for_each(|(c, dc)| {
            if stride == [1, 1] {
                for f in 0..f_out {
                    let gf = &g_n[f * oh * ow..][..oh * ow];
                    let wfc = &w[(f * c_in + c) * kh * kw..][..kh * kw];
                    for ih in 0..h {
                        let drow = &mut dc[ih * wd..][..wd];
                        for ki in 0..kh {
                            let orow_i = ih as isize + ph as isize - ki as isize;
                            if orow_i < 0 || orow_i >= oh as isize {
                                continue;
                            }
                            let grow = &gf[orow_i as usize * ow..][..ow];
                            for kj in 0..kw {
                                accumulate_row_back(drow, grow, wfc[ki * kw + kj], wd, ow, kj, pw);
                            }
                        }
                    }
                }
            } else {
                // general stride: gather per input element
                for ih in 0..h {
                    for iw in 0..wd {
                        let mut acc = dc[ih * wd + iw];
                        for f in 0..f_out {
                            let gf = &g_n[f * oh * ow..][..oh * ow];
                            let wfc = &w[(f * c_in + c) * kh * kw..][..kh * kw];
                            for ki in 0..kh {
                                let num = ih as isize + ph as isize - ki as isize;
                                if num < 0 || num % sh as isize != 0 {
                                    continue;
                                }
                                let o_i = (num / sh as isize) as usize;
                                if o_i >= oh {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let num_w = iw as isize + pw as isize - kj as isize;
                                    if num_w < 0 || num_w % sw as isize != 0 {
                                        continue;
                                    }
                                    let o_j = (num_w / sw as isize) as usize;
                                    if o_j >= ow {
                                        continue;
                                    }
                                    acc += gf[o_i * ow + o_j] * wfc[ki * kw + kj];
                                }
                            }
                        }
                        dc[ih * wd + iw] = acc;
                    }
                }
            }
        });
    }
}

pub fn conv2d_backward_weight(
    g: &[f32],
    x: &[f32],
    xs: [usize; 4],
    dw: &mut [f32],
    ws: [usize; 4],
    stride: [usize; 2],
    pad: [usize; 2],
) {
    let [n_batch, c_in, h, wd] = xs;
    let [f_out, _, kh, kw] = ws;
    let os = conv2d_out_shape(xs, ws, stride, pad);
    let (oh, ow) = (os[2], os[3]);
    let [sh, sw] = stride;
    let [ph, pw] = pad;

    if is_pointwise_2d(ws, stride, pad) {
        let plane = h * wd;
        dw.par_chunks_mut(c_in).enumerate().for_each(|(f, dwf)| {
            for c in 0..c_in {
                let mut lanes = [0.0f32; 8];
                for n in 0..n_batch {
                    lane_dot(
                        &g[(n * f_out + f) * plane..][..plane],
                        &x[(n * c_in + c) * plane..][..plane],
                        &mut lanes,
                    );
                }
                dwf[c] += lanes_sum(&lanes);
            }
        });
        return;
    }

    if is_same3_2d(ws, stride, pad) {
        // dw[ki][kj] = sum over out positions of g * xp shifted by the tap;
        // the zero padding of g keeps invalid positions out of the sums
        let pw2 = wd + 2;
        let chan = (h + 2) * pw2;
        let q_min = pw2 + 1;
        let span = (h - 1) * pw2 + wd;
        let mut pads: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(n_batch);
        for n in 0..n_batch {
            pads.push((
                pad_channels_2d(&g[n * f_out * oh * ow..][..f_out * oh * ow], f_out, oh, ow),
                pad_channels_2d(&x[n * c_in * h * wd..][..c_in * h * wd], c_in, h, wd),
            ));
        }
        dw.par_chunks_mut(c_in * 9).enumerate().for_each(|(f, dwf)| {
            for c in 0..c_in {
                for ki in 0..3 {
                    let mut lanes = [[0.0f32; 8]; 3];
                    for (gp, xp) in &pads {
                        let gpf = &gp[f * chan + q_min..][..span];
                        let base = (q_min as isize + (ki as isize - 1) * pw2 as isize) as usize;
                        let xpc = &xp[c * chan + base - 1..][..span + 2];
                        flat3_dot(gpf, xpc, &mut lanes);
                    }
                    for kj in 0..3 {
                        dwf[(c * 3 + ki) * 3 + kj] += lanes_sum(&lanes[kj]);
                    }
                }
            }
        });
        return;
    }

    dw.par_chunks_mut(c_in * kh * kw).enumerate().for_each(|(f, dwf)| {
        for c in 0..c_in {
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut lanes = [0.0f32; 8];
                    for n in 0..n_batch {
                        let gf = &g[(n * f_out + f) * oh * ow..][..oh * ow];
                        let xc = &x[(n * c_in + c) * h * wd..][..h * wd];
                        for orow_i in 0..oh {
                            let ih = (orow_i * sh + ki) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let grow = &gf[orow_i * ow..][..ow];
                            let xrow = &xc[ih as usize * wd..][..wd];
                            if sw == 1 {
                                let lo = pw.saturating_sub(kj);
                                let hi = (wd + pw).saturating_sub(kj).min(ow);
                                if lo < hi {
                                    let off = lo + kj - pw;
                                    lane_dot(&grow[lo..hi], &xrow[off..off + (hi - lo)], &mut lanes);
                                }
                            } else {
                                for o in 0..ow {
                                    let iw = (o * sw + kj) as isize - pw as isize;
                                    if iw >= 0 && iw < wd as isize {
                                        lanes[o % 8] = grow[o].mul_add(xrow[iw as usize], lanes[o % 8]);
                                    }
                                }
                            }
                        }
                    }
                    dwf[(c * kh + ki) * kw + kj] += lanes_sum(&lanes);
                }
            }
        }
    });
}

pub fn conv_backward_bias(g: &[f32], n_batch: usize, f_out: usize, spatial: usize, db: &mut [f32]) {
    for n in 0..n_batch {
        for (f, dbf) in db.iter_mut().enumerate().take(f_out) {
            let gf = &g[(n * f_out + f) * spatial..][..spatial];
            let mut acc = 0.0f32;
            for &v in gf {
                acc += v;
            }
            *dbf += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// 3D convolution, input [N,C,D,H,W], weight [F,C,KD,KH,KW]
// ---------------------------------------------------------------------------

pub fn conv3d_out_shape(xs: [usize; 5], ws: [usize; 5], stride: [usize; 3], pad: [usize; 3]) -> [usize; 5] {
    let od = (xs[2] + 2 * pad[0] - ws[2]) / stride[0] + 1;
    let oh = (xs[3] + 2 * pad[1] - ws[3]) / stride[1] + 1;
    let ow = (xs[4] + 2 * pad[2] - ws[4]) / stride[2] + 1;
    [xs[0], ws[0], od, oh, ow]
}

fn is_same3_3d(ws: [usize; 5], stride: [usize; 3], pad: [usize; 3]) -> bool {
    ws[2] == 3 && ws[3] == 3 && ws[4] == 3 && stride == [1, 1, 1] && pad == [1, 1, 1]
}

fn is_pointwise_3d(ws: [usize; 5], stride: [usize; 3], pad: [usize; 3]) -> bool {
    ws[2] == 1 && ws[3] == 1 && ws[4] == 1 && stride == [1, 1, 1] && pad == [0, 0, 0]
}

/// Padded-volume geometry for the fused 3x3x3 path: flat tap offset and
/// the contiguous accumulation span (which crosses pad rows; those extra
/// entries are scratch and never copied out).
struct Padded3 {
    ph2: usize,
    pw2: usize,
    chan: usize,
    q_min: usize,
    span: usize,
}

fn padded3(d: usize, h: usize, wd: usize) -> Padded3 {
    let (ph2, pw2) = (h + 2, wd + 2);
    let plane = ph2 * pw2;
    let q_min = (ph2 + 1) * pw2 + 1; // padded index of voxel (0, 0, 0)
    let q_max = (d * ph2 + h) * pw2 + wd; // padded index of voxel (D-1, H-1, W-1)
    Padded3 { ph2, pw2, chan: (d + 2) * plane, q_min, span: q_max - q_min + 1 }
}

pub fn conv3d_forward(
    x: &[f32],
    xs: [usize; 5],
    w: &[f32],
    ws: [usize; 5],
    bias: Option<&[f32]>,
    stride: [usize; 3],
    pad: [usize; 3],
    out: &mut [f32],
) {
    let [n_batch, c_in, d, h, wd] = xs;
    let [_, _, kd, kh, kw] = ws;
    let os = conv3d_out_shape(xs, ws, stride, pad);
    let (f_out, od, oh, ow) = (os[1], os[2], os[3], os[4]);
    let [sd, sh, sw] = stride;
    let [pd, ph, pw] = pad;

    if is_pointwise_3d(ws, stride, pad) {
        let plane = d * h * wd;
        for n in 0..n_batch {
            let x_n = &x[n * c_in * plane..][..c_in * plane];
            let out_n = &mut out[n * f_out * plane..][..f_out * plane];
            out_n.par_chunks_mut(plane).enumerate().for_each(|(f, of)| {
                of.fill(bias.map_or(0.0, |b| b[f]));
                for c in 0..c_in {
                    row1_acc(of, &x_n[c * plane..][..plane], w[f * c_in + c]);
                }
            });
        }
        return;
    }

    if is_same3_3d(ws, stride, pad) {
        let geo = padded3(d, h, wd);
        for n in 0..n_batch {
            let xp = pad_channels_3d(&x[n * c_in * d * h * wd..][..c_in * d * h * wd], c_in, d, h, wd);
            let out_n = &mut out[n * f_out * od * oh * ow..][..f_out * od * oh * ow];
            out_n.par_chunks_mut(od * oh * ow).enumerate().for_each(|(f, of)| {
                let mut scratch = vec![0.0f32; geo.chan];
                for c in 0..c_in {
                    let xpc = &xp[c * geo.chan..][..geo.chan];
                    let wfc = &w[(f * c_in + c) * 27..][..27];
                    for kz in 0..3 {
                        for ki in 0..3 {
                            let off = ((kz as isize - 1) * geo.ph2 as isize + (ki as isize - 1)) * geo.pw2 as isize;
                            let base = (geo.q_min as isize + off) as usize;
                            let wt = &wfc[(kz * 3 + ki) * 3..][..3];
                            flat3_acc(
                                &mut scratch[geo.q_min..geo.q_min + geo.span],
                                &xpc[base - 1..base - 1 + geo.span + 2],
                                wt[0],
                                wt[1],
                                wt[2],
                            );
                        }
                    }
                }
                let bv = bias.map_or(0.0, |b| b[f]);
                for z in 0..d {
                    for y in 0..h {
                        let src = &scratch[((z + 1) * geo.ph2 + y + 1) * geo.pw2 + 1..][..wd];
                        let dst = &mut of[(z * h + y) * wd..][..wd];
                        for (dv, s) in dst.iter_mut().zip(src) {
                            *dv = s + bv;
                        }
                    }
                }
            });
        }
        return;
    }

    // generic path
    for n in 0..n_batch {
        let x_n = &x[n * c_in * d * h * wd..][..c_in * d * h * wd];
        let out_n = &mut out[n * f_out * od * oh * ow..][..f_out * od * oh * ow];
        out_n.par_chunks_mut(od * oh * ow).enumerate().for_each(|(f, of)| {
            of.fill(bias.map_or(0.0, |b| b[f]));
            for c in 0..c_in {
                let xc = &x_n[c * d * h * wd..][..d * h * wd];
                let wfc = &w[(f * c_in + c) * kd * kh * kw..][..kd * kh * kw];
                for o_d in 0..od {
                    for o_h in 0..oh {
                        let orow = &mut of[(o_d * oh + o_h) * ow..][..ow];
                        for kz in 0..kd {
                            let id = (o_d * sd + kz) as isize - pd as isize;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for ki in 0..kh {
                                let ih = (o_h * sh + ki) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xrow = &xc[(id as usize * h + ih as usize) * wd..][..wd];
                                let wt = &wfc[(kz * kh + ki) * kw..][..kw];
                                for kj in 0..kw {
                                    accumulate_row(orow, xrow, wt[kj], ow, wd, sw, kj, pw);
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

pub fn conv3d_backward_input(
    g: &[f32],
    dx: &mut [f32],
    xs: [usize; 5],
    w: &[f32],
    ws: [usize; 5],
    stride: [usize; 3],
    pad: [usize; 3],
) {
    let [n_batch, c_in, d, h, wd] = xs;
    let [f_out, _, kd, kh, kw] = ws;
    let os = conv3d_out_shape(xs, ws, stride, pad);
    let (od, oh, ow) = (os[2], os[3], os[4]);
    let [pd, ph, pw] = pad;
    assert_eq!(stride, [1, 1, 1], "3d input gradient only implemented for stride 1");

    if is_pointwise_3d(ws, stride, pad) {
        let plane = d * h * wd;
        for n in 0..n_batch {
            let g_n = &g[n * f_out * plane..][..f_out * plane];
            let dx_n = &mut dx[n * c_in * plane..][..c_in * plane];
            dx_n.par_chunks_mut(plane).enumerate().for_each(|(c, dc)| {
                for f in 0..f_out {
                    row1_acc(dc, &g_n[f * plane..][..plane], w[f * c_in + c]);
                }
            });
        }
        return;
    }

    if is_same3_3d(ws, stride, pad) {
        let geo = padded3(d, h, wd);
        for n in 0..n_batch {
            let gp = pad_channels_3d(&g[n * f_out * od * oh * ow..][..f_out * od * oh * ow], f_out, od, oh, ow);
            let dx_n = &mut dx[n * c_in * d * h * wd..][..c_in * d * h * wd];
            dx_n.par_chunks_mut(d * h * wd).enumerate().for_each(|(c, dc)| {
                let mut scratch = vec![0.0f32; geo.chan];
                for f in 0..f_out {
                    let gpf = &gp[f * geo.chan..][..geo.chan];
                    let wfc = &w[(f * c_in + c) * 27..][..27];
                    for kz in 0..3 {
                        for ki in 0..3 {
                            let off = ((kz as isize - 1) * geo.ph2 as isize + (ki as isize - 1)) * geo.pw2 as isize;
                            let base = (geo.q_min as isize + off) as usize;
                            // fully flipped kernel
                            let wt = &wfc[((2 - kz) * 3 + (2 - ki)) * 3..][..3];
                            flat3_acc(
                                &mut scratch[geo.q_min..geo.q_min + geo.span],
                                &gpf[base - 1..base - 1 + geo.span + 2],
                                wt[2],
                                wt[1],
                                wt[0],
                            );
                        }
                    }
                }
                for z in 0..d {
                    for y in 0..h {
                        let src = &scratch[((z + 1) * geo.ph2 + y + 1) * geo.pw2 + 1..][..wd];
                        let dst = &mut dc[(z * h + y) * wd..][..wd];
                        for (dv, s) in dst.iter_mut().zip(src) {
                            *dv += s;
                        }
                    }
                }
            });
        }
        return;
    }

    for n in 0..n_batch {
        let g_n = &g[n * f_out * od * oh * ow..][..f_out * od * oh * ow];
        let dx_n = &mut dx[n * c_in * d * h * wd..][..c_in * d * h * wd];
        dx_n.par_chunks_mut(d * h * wd).enumerate().for_each(|(c, dc)| {
            for f in 0..f_out {
                let gf = &g_n[f * od * oh * ow..][..od * oh * ow];
                let wfc = &w[(f * c_in + c) * kd * kh * kw..][..kd * kh * kw];
                for id in 0..d {
                    for ih in 0..h {
                        let drow = &mut dc[(id * h + ih) * wd..][..wd];
                        for kz in 0..kd {
                            let o_d = id as isize + pd as isize - kz as isize;
                            if o_d < 0 || o_d >= od as isize {
                                continue;
                            }
                            for ki in 0..kh {
                                let o_h = ih as isize + ph as isize - ki as isize;
                                if o_h < 0 || o_h >= oh as isize {
                                    continue;
                                }
                                let grow = &gf[(o_d as usize * oh + o_h as usize) * ow..][..ow];
                                let wt = &wfc[(kz * kh + ki) * kw..][..kw];
                                for kj in 0..kw {
                                    accumulate_row_back(drow, grow, wt[kj], wd, ow, kj, pw);
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

pub fn conv3d_backward_weight(
    g: &[f32],
    x: &[f32],
    xs: [usize; 5],
    dw: &mut [f32],
    ws: [usize; 5],
    stride: [usize; 3],
    pad: [usize; 3],
) {
    let [n_batch, c_in, d, h, wd] = xs;
    let [f_out, _, kd, kh, kw] = ws;
    let os = conv3d_out_shape(xs, ws, stride, pad);
    let (od, oh, ow) = (os[2], os[3], os[4]);
    let [pd, ph, pw] = pad;
    assert_eq!(stride, [1, 1, 1], "3d weight gradient only implemented for stride 1");

    if is_pointwise_3d(ws, stride, pad) {
        let plane = d * h * wd;
        dw.par_chunks_mut(c_in).enumerate().for_each(|(f, dwf)| {
            for c in 0..c_in {
                let mut lanes = [0.0f32; 8];
                for n in 0..n_batch {
                    lane_dot(
                        &g[(n * f_out + f) * plane..][..plane],
                        &x[(n * c_in + c) * plane..][..plane],
                        &mut lanes,
                    );
                }
                dwf[c] += lanes_sum(&lanes);
            }
        });
        return;
    }

    if is_same3_3d(ws, stride, pad) {
        let geo = padded3(d, h, wd);
        let mut pads: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(n_batch);
        for n in 0..n_batch {
            pads.push((
                pad_channels_3d(&g[n * f_out * od * oh * ow..][..f_out * od * oh * ow], f_out, od, oh, ow),
                pad_channels_3d(&x[n * c_in * d * h * wd..][..c_in * d * h * wd], c_in, d, h, wd),
            ));
        }
        dw.par_chunks_mut(c_in * 27).enumerate().for_each(|(f, dwf)| {
            for c in 0..c_in {
                for kz in 0..3 {
                    for ki in 0..3 {
                        let mut lanes = [[0.0f32; 8]; 3];
                        for (gp, xp) in &pads {
                            let gpf = &gp[f * geo.chan + geo.q_min..][..geo.span];
                            let off = ((kz as isize - 1) * geo.ph2 as isize + (ki as isize - 1)) * geo.pw2 as isize;
                            let base = (geo.q_min as isize + off) as usize;
                            let xpc = &xp[c * geo.chan + base - 1..][..geo.span + 2];
                            flat3_dot(gpf, xpc, &mut lanes);
                        }
                        for kj in 0..3 {
                            dwf[((c * 3 + kz) * 3 + ki) * 3 + kj] += lanes_sum(&lanes[kj]);
                        }
                    }
                }
            }
        });
        return;
    }

    dw.par_chunks_mut(c_in * kd * kh * kw).enumerate().for_each(|(f, dwf)| {
        for c in 0..c_in {
            for kz in 0..kd {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let mut lanes = [0.0f32; 8];
                        let lo = pw.saturating_sub(kj);
                        let hi = (wd + pw).saturating_sub(kj).min(ow);
                        for n in 0..n_batch {
                            let gf = &g[(n * f_out + f) * od * oh * ow..][..od * oh * ow];
                            let xc = &x[(n * c_in + c) * d * h * wd..][..d * h * wd];
                            for o_d in 0..od {
                                let id = (o_d + kz) as isize - pd as isize;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                for o_h in 0..oh {
                                    let ih = (o_h + ki) as isize - ph as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let grow = &gf[(o_d * oh + o_h) * ow..][..ow];
                                    let xrow = &xc[(id as usize * h + ih as usize) * wd..][..wd];
                                    if lo < hi {
                                        let off = lo + kj - pw;
                                        lane_dot(&grow[lo..hi], &xrow[off..off + (hi - lo)], &mut lanes);
                                    }
                                }
                            }
                        }
                        dwf[((c * kd + kz) * kh + ki) * kw + kj] += lanes_sum(&lanes);
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Transposed 3D convolution with stride == kernel size (disjoint scatter).
// input [N,C,D,H,W], weight [C,F,KD,KH,KW], output [N,F,D*KD,H*KH,W*KW].
// ---------------------------------------------------------------------------

pub fn tconv3d_forward(x: &[f32], xs: [usize; 5], w: &[f32], ws: [usize; 5], out: &mut [f32]) {
    let [n_batch, c_in, d, h, wd] = xs;
    let [_, f_out, kd, kh, kw] = ws;
    let (od, oh, ow) = (d * kd, h * kh, wd * kw);

    for n in 0..n_batch {
        let x_n = &x[n * c_in * d * h * wd..][..c_in * d * h * wd];
        let out_n = &mut out[n * f_out * od * oh * ow..][..f_out * od * oh * ow];
        out_n.par_chunks_mut(od * oh * ow).enumerate().for_each(|(f, of)| {
            of.fill(0.0);
            for c in 0..c_in {
                let xc = &x_n[c * d * h * wd..][..d * h * wd];
                let wcf = &w[(c * f_out + f) * kd * kh * kw..][..kd * kh * kw];
                for id in 0..d {
                    for ih in 0..h {
                        let xrow = &xc[(id * h + ih) * wd..][..wd];
                        for rd in 0..kd {
                            for rh in 0..kh {
                                let orow = &mut of[((id * kd + rd) * oh + ih * kh + rh) * ow..][..ow];
                                for rw in 0..kw {
                                    let wv = wcf[(rd * kh + rh) * kw + rw];
                                    // strided scatter: orow[iw*kw + rw] += wv * x[iw]
                                    for (iw, &xv) in xrow.iter().enumerate() {
                                        orow[iw * kw + rw] = wv.mul_add(xv, orow[iw * kw + rw]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

pub fn tconv3d_backward_input(g: &[f32], dx: &mut [f32], xs: [usize; 5], w: &[f32], ws: [usize; 5]) {
    let [n_batch, c_in, d, h, wd] = xs;
    let [_, f_out, kd, kh, kw] = ws;
    let (od, oh, ow) = (d * kd, h * kh, wd * kw);

    for n in 0..n_batch {
        let g_n = &g[n * f_out * od * oh * ow..][..f_out * od * oh * ow];
        let dx_n = &mut dx[n * c_in * d * h * wd..][..c_in * d * h * wd];
        dx_n.par_chunks_mut(d * h * wd).enumerate().for_each(|(c, dc)| {
            for f in 0..f_out {
                let gf = &g_n[f * od * oh * ow..][..od * oh * ow];
                let wcf = &w[(c * f_out + f) * kd * kh * kw..][..kd * kh * kw];
                for id in 0..d {
                    for ih in 0..h {
                        let drow = &mut dc[(id * h + ih) * wd..][..wd];
                        for rd in 0..kd {
                            for rh in 0..kh {
                                let grow = &gf[((id * kd + rd) * oh + ih * kh + rh) * ow..][..ow];
                                for rw in 0..kw {
                                    let wv = wcf[(rd * kh + rh) * kw + rw];
                                    for (iw, dv) in drow.iter_mut().enumerate() {
                                        *dv = wv.mul_add(grow[iw * kw + rw], *dv);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

pub fn tconv3d_backward_weight(g: &[f32], x: &[f32], xs: [usize; 5], dw: &mut [f32], ws: [usize; 5]) {
    let [n_batch, c_in, d, h, wd] = xs;
    let [_, f_out, kd, kh, kw] = ws;
    let (od, oh, ow) = (d * kd, h * kh, wd * kw);

    dw.par_chunks_mut(f_out * kd * kh * kw).enumerate().for_each(|(c, dwc)| {
        for f in 0..f_out {
            for rd in 0..kd {
                for rh in 0..kh {
                    for rw in 0..kw {
                        let mut lanes = [0.0f32; 8];
                        for n in 0..n_batch {
                            let xc = &x[(n * c_in + c) * d * h * wd..][..d * h * wd];
                            let gf = &g[(n * f_out + f) * od * oh * ow..][..od * oh * ow];
                            for id in 0..d {
                                for ih in 0..h {
                                    let xrow = &xc[(id * h + ih) * wd..][..wd];
                                    let grow = &gf[((id * kd + rd) * oh + ih * kh + rh) * ow..][..ow];
                                    for (iw, &xv) in xrow.iter().enumerate() {
                                        lanes[iw % 8] = xv.mul_add(grow[iw * kw + rw], lanes[iw % 8]);
                                    }
                                }
                            }
                        }
                        dwc[((f * kd + rd) * kh + rh) * kw + rw] += lanes_sum(&lanes);
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Max pooling with recorded argmax. Ties go to the first element in
// (d, h, w) scan order.
// ---------------------------------------------------------------------------

pub fn maxpool2d_forward(
    x: &[f32],
    xs: [usize; 4],
    window: [usize; 2],
    stride: [usize; 2],
    out: &mut [f32],
    argmax: &mut [usize],
) {
    let [n_batch, c_in, h, wd] = xs;
    let [wh, ww] = window;
    let [sh, sw] = stride;
    let (oh, ow) = ((h - wh) / sh + 1, (wd - ww) / sw + 1);

    let mut o = 0;
    for n in 0..n_batch {
        for c in 0..c_in {
            let base = (n * c_in + c) * h * wd;
            for o_h in 0..oh {
                for o_w in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ki in 0..wh {
                        for kj in 0..ww {
                            let idx = base + (o_h * sh + ki) * wd + o_w * sw + kj;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
}

pub fn maxpool3d_forward(
    x: &[f32],
    xs: [usize; 5],
    window: [usize; 3],
    stride: [usize; 3],
    out: &mut [f32],
    argmax: &mut [usize],
) {
    let [n_batch, c_in, d, h, wd] = xs;
    let [wz, wh, ww] = window;
    let [sz, sh, sw] = stride;
    let (od, oh, ow) = ((d - wz) / sz + 1, (h - wh) / sh + 1, (wd - ww) / sw + 1);

    let mut o = 0;
    for n in 0..n_batch {
        for c in 0..c_in {
            let base = (n * c_in + c) * d * h * wd;
            for o_d in 0..od {
                for o_h in 0..oh {
                    for o_w in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for kz in 0..wz {
                            for ki in 0..wh {
                                for kj in 0..ww {
                                    let idx = base
                                        + ((o_d * sz + kz) * h + o_h * sh + ki) * wd
                                        + o_w * sw
                                        + kj;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx;
                        o += 1;
                    }
                }
            }
        }
    }
}

pub fn maxpool_backward(g: &[f32], argmax: &[usize], dx: &mut [f32]) {
    for (gv, &idx) in g.iter().zip(argmax.iter()) {
        dx[idx] += gv;
    }
}

//! Direct 2-D convolution kernels over NCHW buffers.
//!
//! Inputs are zero-padded once per call; the per-row loops below touch only
//! preallocated slices. Work is split across rayon tasks by output chunk,
//! each chunk accumulated in a fixed order, so results do not depend on the
//! thread count.

use std::borrow::Cow;

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }

    pub fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }
}

#[inline]
fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `dst[i] += w0·row[i] + w1·row[i+1] + w2·row[i+2]`
#[inline]
fn row3(dst: &mut [f64], w: &[f64], row: &[f64]) {
    let (w0, w1, w2) = (w[0], w[1], w[2]);
    let n = dst.len();
    let (r0, r1, r2) = (&row[..n], &row[1..n + 1], &row[2..n + 2]);
    for i in 0..n {
        dst[i] += w0 * r0[i] + w1 * r1[i] + w2 * r2[i];
    }
}

pub(crate) fn pad_input<'a>(x: &'a [f64], g: &ConvGeom) -> Cow<'a, [f64]> {
    if g.pad == 0 {
        return Cow::Borrowed(x);
    }
    let (hp, wp) = (g.hp(), g.wp());
    let mut out = vec![0.0; g.batch * g.c_in * hp * wp];
    for plane in 0..g.batch * g.c_in {
        let src = &x[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        let dst = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for y in 0..g.h {
            let row = (y + g.pad) * wp + g.pad;
            dst[row..row + g.w].copy_from_slice(&src[y * g.w..(y + 1) * g.w]);
        }
    }
    Cow::Owned(out)
}

pub(crate) fn forward(xp: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    if use_columns(g) {
        return forward_columns(xp, weight, bias, g);
    }
    let (hp, wp) = (g.hp(), g.wp());
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.batch * g.c_out * plane_out];
    out.par_chunks_mut(plane_out).enumerate().for_each(|(bo, out_plane)| {
        let (b, co) = (bo / g.c_out, bo % g.c_out);
        {
            if let Some(bias) = bias {
                out_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..g.c_in {
                let x0 = (b * g.c_in + ci) * hp * wp;
                let x_plane = &xp[x0..x0 + hp * wp];
                if g.stride == 1 && g.kw == 3 {
                    let taps = &weight[(co * g.c_in + ci) * g.kh * 3..][..g.kh * 3];
                    for oy in 0..g.ho {
                        let dst = &mut out_plane[oy * g.wo..][..g.wo];
                        for ky in 0..g.kh {
                            let row = &x_plane[(oy + ky) * wp..][..g.wo + 2];
                            row3(dst, &taps[ky * 3..ky * 3 + 3], row);
                        }
                    }
                    continue;
                }
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if g.stride == 1 {
                            for oy in 0..g.ho {
                                let src = &x_plane[(oy + ky) * wp + kx..][..g.wo];
                                axpy(&mut out_plane[oy * g.wo..][..g.wo], wv, src);
                            }
                        } else {
                            for oy in 0..g.ho {
                                let row = &x_plane[(oy * g.stride + ky) * wp..][..wp];
                                let dst = &mut out_plane[oy * g.wo..][..g.wo];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += wv * row[ox * g.stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the (unpadded) input.
pub(crate) fn backward_input(grad_out: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    if use_columns(g) {
        return backward_input_columns(grad_out, weight, g);
    }
    if g.stride == 1 && g.kh == g.kw && g.pad < g.kh {
        // Stride-1 input gradient is a forward convolution of the output
        // gradient with the flipped, channel-transposed kernel.
        let t = ConvGeom {
            batch: g.batch,
            c_in: g.c_out,
            h: g.ho,
            w: g.wo,
            c_out: g.c_in,
            kh: g.kh,
            kw: g.kw,
            stride: 1,
            pad: g.kh - 1 - g.pad,
            ho: g.h,
            wo: g.w,
        };
        let k = g.kh;
        let mut flipped = vec![0.0; weight.len()];
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        flipped[((ci * g.c_out + co) * k + ky) * k + kx] =
                            weight[((co * g.c_in + ci) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                    }
                }
            }
        }
        let gp = pad_input(grad_out, &t);
        return forward(&gp, &flipped, None, &t);
    }
    let (hp, wp) = (g.hp(), g.wp());
    let plane_out = g.ho * g.wo;
    let mut gxp = vec![0.0; g.batch * g.c_in * hp * wp];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o0 = (b * g.c_out + co) * plane_out;
            let g_plane = &grad_out[o0..o0 + plane_out];
            for ci in 0..g.c_in {
                let x0 = (b * g.c_in + ci) * hp * wp;
                let gx_plane = &mut gxp[x0..x0 + hp * wp];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if g.stride == 1 {
                            for oy in 0..g.ho {
                                let dst = &mut gx_plane[(oy + ky) * wp + kx..][..g.wo];
                                axpy(dst, wv, &g_plane[oy * g.wo..][..g.wo]);
                            }
                        } else {
                            for oy in 0..g.ho {
                                let row = (oy * g.stride + ky) * wp;
                                for ox in 0..g.wo {
                                    gx_plane[row + ox * g.stride + kx] += wv * g_plane[oy * g.wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    crop(gxp, g)
}

/// Inverse of [`pad_input`] for gradients: drops the padded border.
fn crop(gxp: Vec<f64>, g: &ConvGeom) -> Vec<f64> {
    if g.pad == 0 {
        return gxp;
    }
    let (hp, wp) = (g.hp(), g.wp());
    let mut gx = vec![0.0; g.batch * g.c_in * g.h * g.w];
    for plane in 0..g.batch * g.c_in {
        let src = &gxp[plane * hp * wp..(plane + 1) * hp * wp];
        let dst = &mut gx[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        for y in 0..g.h {
            let row = (y + g.pad) * wp + g.pad;
            dst[y * g.w..(y + 1) * g.w].copy_from_slice(&src[row..row + g.w]);
        }
    }
    gx
}

pub(crate) fn backward_weight(grad_out: &[f64], xp: &[f64], g: &ConvGeom) -> Vec<f64> {
    if use_columns(g) {
        return backward_weight_columns(grad_out, xp, g);
    }
    let (hp, wp) = (g.hp(), g.wp());
    let plane_out = g.ho * g.wo;
    let taps = g.kh * g.kw;
    let mut gw = vec![0.0; g.c_out * g.c_in * taps];
    if g.stride == 1 {
        // Per-tap lane accumulators keep the inner loop elementwise; lanes
        // are summed once per (c_out, c_in) pair.
        gw.par_chunks_mut(taps).enumerate().for_each(|(pair, dst)| {
            let (co, ci) = (pair / g.c_in, pair % g.c_in);
            let mut lanes = vec![0.0; taps * g.wo];
            {
                for b in 0..g.batch {
                    let o0 = (b * g.c_out + co) * plane_out;
                    let g_plane = &grad_out[o0..o0 + plane_out];
                    let x0 = (b * g.c_in + ci) * hp * wp;
                    let x_plane = &xp[x0..x0 + hp * wp];
                    for oy in 0..g.ho {
                        let g_row = &g_plane[oy * g.wo..][..g.wo];
                        for ky in 0..g.kh {
                            let row = &x_plane[(oy + ky) * wp..][..g.wo + g.kw - 1];
                            for kx in 0..g.kw {
                                let lane = &mut lanes[(ky * g.kw + kx) * g.wo..][..g.wo];
                                for ((l, gv), xv) in lane.iter_mut().zip(g_row).zip(&row[kx..]) {
                                    *l += gv * xv;
                                }
                            }
                        }
                    }
                }
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = lanes[t * g.wo..(t + 1) * g.wo].iter().sum();
                }
            }
        });
        return gw;
    }
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o0 = (b * g.c_out + co) * plane_out;
            let g_plane = &grad_out[o0..o0 + plane_out];
            for ci in 0..g.c_in {
                let x0 = (b * g.c_in + ci) * hp * wp;
                let x_plane = &xp[x0..x0 + hp * wp];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let row = (oy * g.stride + ky) * wp;
                            for ox in 0..g.wo {
                                acc += g_plane[oy * g.wo + ox] * x_plane[row + ox * g.stride + kx];
                            }
                        }
                        gw[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

pub(crate) fn backward_bias(grad_out: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let mut gb = vec![0.0; g.c_out];
    for b in 0..g.batch {
        for (co, acc) in gb.iter_mut().enumerate() {
            let o0 = (b * g.c_out + co) * plane_out;
            *acc += grad_out[o0..o0 + plane_out].iter().sum::<f64>();
        }
    }
    gb
}

/// Output rows narrower than this go through the column (im2col) path,
/// which batches all images and positions into one long row per tap.
const COLUMN_WIDTH_LIMIT: usize = 24;

fn use_columns(g: &ConvGeom) -> bool {
    g.stride != 1 || g.wo < COLUMN_WIDTH_LIMIT
}

/// `cols[k·n + b·P + p]` with `k = (ci·kh + ky)·kw + kx`, `P = ho·wo`,
/// `n = batch·P`.
fn im2col(xp: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hp, wp) = (g.hp(), g.wp());
    let plane_out = g.ho * g.wo;
    let n = g.batch * plane_out;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * n];
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let k = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut cols[k * n..(k + 1) * n];
                for b in 0..g.batch {
                    let plane = &xp[(b * g.c_in + ci) * hp * wp..][..hp * wp];
                    for oy in 0..g.ho {
                        let src = (oy * g.stride + ky) * wp + kx;
                        let dst = &mut row[b * plane_out + oy * g.wo..][..g.wo];
                        if g.stride == 1 {
                            dst.copy_from_slice(&plane[src..src + g.wo]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = plane[src + ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// NCHW gradient to channel-major `[c_out][batch·P]`.
fn to_channel_major(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let n = g.batch * plane_out;
    let mut cm = vec![0.0; g.c_out * n];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            cm[co * n + b * plane_out..][..plane_out]
                .copy_from_slice(&x[(b * g.c_out + co) * plane_out..][..plane_out]);
        }
    }
    cm
}

/// `dst += Σ_j w[j]·rows[j]` over a group of up to four rows.
#[inline]
fn axpy_group(dst: &mut [f64], w: &[f64], rows: &[&[f64]]) {
    match rows.len() {
        4 => {
            let (r0, r1, r2, r3) = (rows[0], rows[1], rows[2], rows[3]);
            for i in 0..dst.len() {
                dst[i] += w[0] * r0[i] + w[1] * r1[i] + w[2] * r2[i] + w[3] * r3[i];
            }
        }
        _ => {
            for (wj, r) in w.iter().zip(rows) {
                axpy(dst, *wj, r);
            }
        }
    }
}

fn forward_columns(xp: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(xp, g);
    let plane_out = g.ho * g.wo;
    let n = g.batch * plane_out;
    let kk = g.c_in * g.kh * g.kw;
    let mut cm = vec![0.0; g.c_out * n];
    cm.par_chunks_mut(n).enumerate().for_each(|(co, dst)| {
        if let Some(bias) = bias {
            dst.iter_mut().for_each(|v| *v = bias[co]);
        }
        let w = &weight[co * kk..(co + 1) * kk];
        for k0 in (0..kk).step_by(4) {
            let k1 = (k0 + 4).min(kk);
            let rows: Vec<&[f64]> = (k0..k1).map(|k| &cols[k * n..(k + 1) * n]).collect();
            axpy_group(dst, &w[k0..k1], &rows);
        }
    });
    let mut out = vec![0.0; g.batch * g.c_out * plane_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            out[(b * g.c_out + co) * plane_out..][..plane_out]
                .copy_from_slice(&cm[co * n + b * plane_out..][..plane_out]);
        }
    }
    out
}

fn backward_weight_columns(grad_out: &[f64], xp: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(xp, g);
    let gcm = to_channel_major(grad_out, g);
    let n = g.batch * g.ho * g.wo;
    let kk = g.c_in * g.kh * g.kw;
    let mut gw = vec![0.0; g.c_out * kk];
    gw.par_chunks_mut(kk).enumerate().for_each(|(co, dst)| {
        let grow = &gcm[co * n..(co + 1) * n];
        for (k, d) in dst.iter_mut().enumerate() {
            *d = dot(grow, &cols[k * n..(k + 1) * n]);
        }
    });
    gw
}

fn backward_input_columns(grad_out: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let gcm = to_channel_major(grad_out, g);
    let plane_out = g.ho * g.wo;
    let n = g.batch * plane_out;
    let kk = g.c_in * g.kh * g.kw;
    let mut gcols = vec![0.0; kk * n];
    gcols.par_chunks_mut(n).enumerate().for_each(|(k, dst)| {
        for c0 in (0..g.c_out).step_by(4) {
            let c1 = (c0 + 4).min(g.c_out);
            let w: Vec<f64> = (c0..c1).map(|co| weight[co * kk + k]).collect();
            let rows: Vec<&[f64]> = (c0..c1).map(|co| &gcm[co * n..(co + 1) * n]).collect();
            axpy_group(dst, &w, &rows);
        }
    });
    let (hp, wp) = (g.hp(), g.wp());
    let mut gxp = vec![0.0; g.batch * g.c_in * hp * wp];
    gxp.par_chunks_mut(hp * wp).enumerate().for_each(|(bc, plane)| {
        let (b, ci) = (bc / g.c_in, bc % g.c_in);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let k = (ci * g.kh + ky) * g.kw + kx;
                let row = &gcols[k * n..(k + 1) * n];
                for oy in 0..g.ho {
                    let dst = (oy * g.stride + ky) * wp + kx;
                    let src = &row[b * plane_out + oy * g.wo..][..g.wo];
                    if g.stride == 1 {
                        for (d, s) in plane[dst..dst + g.wo].iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            plane[dst + ox * g.stride] += s;
                        }
                    }
                }
            }
        }
    });
    crop(gxp, g)
}

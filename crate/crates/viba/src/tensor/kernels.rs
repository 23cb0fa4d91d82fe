//! Raw forward/backward kernels on row-major buffers.
//!
//! Parallel loops split work into disjoint output planes, so results are
//! bit-identical for any thread count. Weight-gradient reductions run over
//! N×OH×OW terms, which can exceed 4096, so those accumulate per-row in f32
//! and across rows in f64; all other dot products stay short and use f32.

use rayon::prelude::*;

/// Geometry of a 2-D convolution (or pooling) call.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }
}

/// `out[m,:] += a[m,k]·b[k,:]`, rows of `b` streamed once per 4-row block of
/// `a`. Long contiguous rows keep the inner loop vectorizable.
fn matmul_acc(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut row = 0;
    while row + 4 <= m {
        let (r0, rest) = out[row * n..].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, rest) = rest.split_at_mut(n);
        let r3 = &mut rest[..n];
        for kk in 0..k {
            let brow = &b[kk * n..][..n];
            let w0 = a[row * k + kk];
            let w1 = a[(row + 1) * k + kk];
            let w2 = a[(row + 2) * k + kk];
            let w3 = a[(row + 3) * k + kk];
            for ((((dst0, dst1), dst2), dst3), &s) in r0
                .iter_mut()
                .zip(r1.iter_mut())
                .zip(r2.iter_mut())
                .zip(r3.iter_mut())
                .zip(brow)
            {
                *dst0 += w0 * s;
                *dst1 += w1 * s;
                *dst2 += w2 * s;
                *dst3 += w3 * s;
            }
        }
        row += 4;
    }
    for row in row..m {
        let orow = &mut out[row * n..][..n];
        for kk in 0..k {
            let w0 = a[row * k + kk];
            let brow = &b[kk * n..][..n];
            for (dst, &s) in orow.iter_mut().zip(brow) {
                *dst += w0 * s;
            }
        }
    }
}

/// Unfolds one sample's `C×H×W` planes into a `(C·KH·KW) × (OH·OW)` matrix;
/// out-of-bounds (padding) cells are zero.
fn im2col(xs: &[f32], d: &ConvDims, col: &mut [f32]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    debug_assert_eq!(col.len(), d.c_in * d.kh * d.kw * oh * ow);
    col.fill(0.0);
    for i in 0..d.c_in {
        let plane = &xs[i * d.h * d.w..][..d.h * d.w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let crow = &mut col[((i * d.kh + kh) * d.kw + kw) * oh * ow..][..oh * ow];
                for ohh in 0..oh {
                    let ih = (ohh * d.sh + kh) as i64 - d.ph as i64;
                    if ih < 0 || ih >= d.h as i64 {
                        continue;
                    }
                    let xrow = &plane[ih as usize * d.w..][..d.w];
                    let dst = &mut crow[ohh * ow..][..ow];
                    if d.sw == 1 {
                        // Contiguous segment; clip against the plane edges.
                        let shift = kw as i64 - d.pw as i64;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((d.w as i64 - shift).min(ow as i64)).max(0) as usize;
                        if lo < hi {
                            dst[lo..hi]
                                .copy_from_slice(&xrow[(lo as i64 + shift) as usize..][..hi - lo]);
                        }
                    } else {
                        for (oww, dv) in dst.iter_mut().enumerate() {
                            let iw = (oww * d.sw + kw) as i64 - d.pw as i64;
                            if iw >= 0 && iw < d.w as i64 {
                                *dv = xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds a `(C·KH·KW) × (OH·OW)` gradient matrix back onto input planes.
fn col2im_acc(col: &[f32], d: &ConvDims, dxs: &mut [f32]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    for i in 0..d.c_in {
        let plane = &mut dxs[i * d.h * d.w..][..d.h * d.w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let crow = &col[((i * d.kh + kh) * d.kw + kw) * oh * ow..][..oh * ow];
                for ohh in 0..oh {
                    let ih = (ohh * d.sh + kh) as i64 - d.ph as i64;
                    if ih < 0 || ih >= d.h as i64 {
                        continue;
                    }
                    let xrow = &mut plane[ih as usize * d.w..][..d.w];
                    let src = &crow[ohh * ow..][..ow];
                    if d.sw == 1 {
                        let shift = kw as i64 - d.pw as i64;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((d.w as i64 - shift).min(ow as i64)).max(0) as usize;
                        for (dv, &s) in xrow[(lo as i64 + shift) as usize..][..hi.saturating_sub(lo)]
                            .iter_mut()
                            .zip(&src[lo..hi])
                        {
                            *dv += s;
                        }
                    } else {
                        for (oww, &s) in src.iter().enumerate() {
                            let iw = (oww * d.sw + kw) as i64 - d.pw as i64;
                            if iw >= 0 && iw < d.w as i64 {
                                xrow[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 1×1 stride-1 unpadded convolutions skip the im2col copy.
fn is_pointwise(d: &ConvDims) -> bool {
    d.kh == 1 && d.kw == 1 && d.sh == 1 && d.sw == 1 && d.ph == 0 && d.pw == 0
}

pub fn conv2d_forward(x: &[f32], wgt: &[f32], d: &ConvDims) -> Vec<f32> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let ckk = d.c_in * d.kh * d.kw;
    let mut out = vec![0.0f32; d.n * d.c_out * oh * ow];
    out.par_chunks_mut(d.c_out * oh * ow)
        .enumerate()
        .for_each(|(n, sample_out)| {
            let xs = &x[n * d.c_in * d.h * d.w..][..d.c_in * d.h * d.w];
            if is_pointwise(d) {
                matmul_acc(wgt, d.c_out, ckk, xs, oh * ow, sample_out);
            } else {
                let mut col = vec![0.0f32; ckk * oh * ow];
                im2col(xs, d, &mut col);
                matmul_acc(wgt, d.c_out, ckk, &col, oh * ow, sample_out);
            }
        });
    out
}

pub fn conv2d_backward_input(dout: &[f32], wgt: &[f32], d: &ConvDims) -> Vec<f32> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let ckk = d.c_in * d.kh * d.kw;
    // W transposed once: (C·KH·KW) × C_out.
    let mut wt = vec![0.0f32; ckk * d.c_out];
    for o in 0..d.c_out {
        for r in 0..ckk {
            wt[r * d.c_out + o] = wgt[o * ckk + r];
        }
    }
    let mut dx = vec![0.0f32; d.n * d.c_in * d.h * d.w];
    dx.par_chunks_mut(d.c_in * d.h * d.w)
        .enumerate()
        .for_each(|(n, sample_dx)| {
            let ds = &dout[n * d.c_out * oh * ow..][..d.c_out * oh * ow];
            if is_pointwise(d) {
                matmul_acc(&wt, ckk, d.c_out, ds, oh * ow, sample_dx);
            } else {
                let mut dcol = vec![0.0f32; ckk * oh * ow];
                matmul_acc(&wt, ckk, d.c_out, ds, oh * ow, &mut dcol);
                col2im_acc(&dcol, d, sample_dx);
            }
        });
    dx
}

pub fn conv2d_backward_weight(x: &[f32], dout: &[f32], d: &ConvDims) -> Vec<f32> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let ohw = oh * ow;
    let ckk = d.c_in * d.kh * d.kw;
    // Row dots stay in f32 (≤ 4096 terms); sums across rows and samples
    // accumulate in f64.
    let mut acc = vec![0.0f64; d.c_out * ckk];
    let mut col = vec![0.0f32; ckk * ohw];
    for n in 0..d.n {
        let xs = &x[n * d.c_in * d.h * d.w..][..d.c_in * d.h * d.w];
        let ds = &dout[n * d.c_out * ohw..][..d.c_out * ohw];
        let b: &[f32] = if is_pointwise(d) {
            xs
        } else {
            im2col(xs, d, &mut col);
            &col
        };
        acc.par_chunks_mut(ckk).enumerate().for_each(|(o, arow)| {
            let drow = &ds[o * ohw..][..ohw];
            for (r, av) in arow.iter_mut().enumerate() {
                let brow = &b[r * ohw..][..ohw];
                let mut dot = 0.0f32;
                for (&g, &s) in drow.iter().zip(brow) {
                    dot += g * s;
                }
                *av += dot as f64;
            }
        });
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Depthwise convolution: weight has one `kh×kw` filter per input channel
/// (shape `C×1×kh×kw`), output channel c reads only input channel c.
pub fn depthwise_forward(x: &[f32], wgt: &[f32], d: &ConvDims) -> Vec<f32> {
    // Reuse the dense kernel per channel by viewing each channel as its own
    // single-channel image batch.
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0f32; d.n * d.c_in * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, plane)| {
        let one = ConvDims {
            n: 1,
            c_in: 1,
            c_out: 1,
            ..*d
        };
        let (n, c) = (p / d.c_in, p % d.c_in);
        let xplane = &x[(n * d.c_in + c) * d.h * d.w..][..d.h * d.w];
        let wblock = &wgt[c * d.kh * d.kw..][..d.kh * d.kw];
        plane.copy_from_slice(&conv2d_forward(xplane, wblock, &one));
    });
    out
}

pub fn depthwise_backward_input(dout: &[f32], wgt: &[f32], d: &ConvDims) -> Vec<f32> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dx = vec![0.0f32; d.n * d.c_in * d.h * d.w];
    dx.par_chunks_mut(d.h * d.w).enumerate().for_each(|(p, plane)| {
        let one = ConvDims {
            n: 1,
            c_in: 1,
            c_out: 1,
            ..*d
        };
        let (n, c) = (p / d.c_in, p % d.c_in);
        let dplane = &dout[(n * d.c_in + c) * oh * ow..][..oh * ow];
        let wblock = &wgt[c * d.kh * d.kw..][..d.kh * d.kw];
        plane.copy_from_slice(&conv2d_backward_input(dplane, wblock, &one));
    });
    dx
}

pub fn depthwise_backward_weight(x: &[f32], dout: &[f32], d: &ConvDims) -> Vec<f32> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dw = vec![0.0f32; d.c_in * d.kh * d.kw];
    dw.par_chunks_mut(d.kh * d.kw).enumerate().for_each(|(c, block)| {
        let one = ConvDims {
            n: 1,
            c_in: 1,
            c_out: 1,
            ..*d
        };
        let mut acc = vec![0.0f64; d.kh * d.kw];
        for n in 0..d.n {
            let xplane = &x[(n * d.c_in + c) * d.h * d.w..][..d.h * d.w];
            let dplane = &dout[(n * d.c_in + c) * oh * ow..][..oh * ow];
            for (a, g) in acc
                .iter_mut()
                .zip(conv2d_backward_weight(xplane, dplane, &one))
            {
                *a += g as f64;
            }
        }
        for (b, a) in block.iter_mut().zip(acc) {
            *b = a as f32;
        }
    });
    dw
}

/// Pooling geometry; padding cells act as negative infinity.
#[derive(Debug, Clone, Copy)]
pub struct PoolDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PoolDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }
}

/// Returns `(values, argmax)`; argmax holds the flat in-plane input index of
/// the first (row-major) maximal element per window.
pub fn max_pool_forward(x: &[f32], d: &PoolDims) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let planes = d.n * d.c;
    let mut out = vec![f32::NEG_INFINITY; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(p, (plane, aplane))| {
            let xplane = &x[p * d.h * d.w..][..d.h * d.w];
            for ohh in 0..oh {
                for oww in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for kh in 0..d.kh {
                        let ih = (ohh * d.sh + kh) as i64 - d.ph as i64;
                        if ih < 0 || ih >= d.h as i64 {
                            continue;
                        }
                        for kw in 0..d.kw {
                            let iw = (oww * d.sw + kw) as i64 - d.pw as i64;
                            if iw < 0 || iw >= d.w as i64 {
                                continue;
                            }
                            let idx = ih as usize * d.w + iw as usize;
                            let v = xplane[idx];
                            if v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                    plane[ohh * ow + oww] = best;
                    aplane[ohh * ow + oww] = best_idx;
                }
            }
        });
    (out, arg)
}

pub fn max_pool_backward(dout: &[f32], arg: &[u32], d: &PoolDims) -> Vec<f32> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dx = vec![0.0f32; d.n * d.c * d.h * d.w];
    dx.par_chunks_mut(d.h * d.w).enumerate().for_each(|(p, plane)| {
        let dplane = &dout[p * oh * ow..][..oh * ow];
        let aplane = &arg[p * oh * ow..][..oh * ow];
        for (g, &idx) in dplane.iter().zip(aplane) {
            plane[idx as usize] += *g;
        }
    });
    dx
}

/// `out[n,k] = bias[k] + Σ_d x[n,d]·w[d,k]`
pub fn linear_forward(x: &[f32], wgt: &[f32], bias: &[f32], n: usize, din: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * k];
    for row in 0..n {
        let orow = &mut out[row * k..][..k];
        orow.copy_from_slice(bias);
        let xrow = &x[row * din..][..din];
        for (xd, wrow) in xrow.iter().zip(wgt.chunks_exact(k)) {
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += *xd * *wv;
            }
        }
    }
    out
}

pub fn linear_backward(
    x: &[f32],
    wgt: &[f32],
    dout: &[f32],
    n: usize,
    din: usize,
    k: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; n * din];
    let mut dw = vec![0.0f32; din * k];
    let mut db = vec![0.0f32; k];
    for row in 0..n {
        let drow = &dout[row * k..][..k];
        let xrow = &x[row * din..][..din];
        for (dxd, wrow) in dx[row * din..][..din].iter_mut().zip(wgt.chunks_exact(k)) {
            let mut acc = 0.0f32;
            for (g, wv) in drow.iter().zip(wrow) {
                acc += *g * *wv;
            }
            *dxd = acc;
        }
        for (xd, dwrow) in xrow.iter().zip(dw.chunks_exact_mut(k)) {
            for (dwv, g) in dwrow.iter_mut().zip(drow) {
                *dwv += *xd * *g;
            }
        }
        for (dbv, g) in db.iter_mut().zip(drow) {
            *dbv += *g;
        }
    }
    (dx, dw, db)
}

/// Per-channel mean and biased variance over N×H×W, accumulated in f64.
pub fn channel_moments(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let count = (n * hw) as f64;
    for ch in 0..c {
        let mut s = 0.0f64;
        let mut s2 = 0.0f64;
        for b in 0..n {
            let plane = &x[(b * c + ch) * hw..][..hw];
            for &v in plane {
                let v = v as f64;
                s += v;
                s2 += v * v;
            }
        }
        let m = s / count;
        mean[ch] = m;
        var[ch] = (s2 / count - m * m).max(0.0);
    }
    (mean, var)
}

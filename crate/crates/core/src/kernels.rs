//! Dense numeric kernels behind the tape's heavier operations.
//!
//! Shapes are passed explicitly and buffers are raw row-major slices.
//! Backward kernels *accumulate* into their output buffers; callers hand in
//! zeroed (or partially accumulated) gradients.

use crate::scalar::Scalar;

/// Output extent of a convolution/pooling axis.
pub fn conv_out_dim(n: usize, k: usize, pad: usize, stride: usize, dil: usize) -> usize {
    let eff = dil * (k - 1) + 1;
    (n + 2 * pad - eff) / stride + 1
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (j, &av) in arow.iter().enumerate() {
            let orow = &mut out[j * n..(j + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d (dense and depthwise)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<F: Scalar>(
    x: &[F],
    (b, ci, h, w): (usize, usize, usize, usize),
    wgt: &[F],
    (co, kh, kw): (usize, usize, usize),
    g: ConvGeom,
    out: &mut [F],
) {
    let oh = conv_out_dim(h, kh, g.pad, g.stride, g.dil);
    let ow = conv_out_dim(w, kw, g.pad, g.stride, g.dil);
    debug_assert_eq!(out.len(), b * co * oh * ow);
    for ib in 0..b {
        for oc in 0..co {
            for ic in 0..ci {
                let xbase = (ib * ci + ic) * h * w;
                let obase = (ib * co + oc) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wgt[((oc * ci + ic) * kh + ky) * kw + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        accum_shifted(
                            &x[xbase..xbase + h * w],
                            (h, w),
                            &mut out[obase..obase + oh * ow],
                            (oh, ow),
                            (ky, kx),
                            g,
                            wv,
                        );
                    }
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` such that `0 <= ox*stride + off < n` for
/// every `ox` in it.
fn valid_range(n: usize, out_n: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = (n as isize - off + s - 1) / s;
    let lo = lo.clamp(0, out_n as isize) as usize;
    let hi = hi.clamp(lo as isize, out_n as isize) as usize;
    (lo, hi)
}

/// out[oy,ox] += wv * x[oy*s - p + ky*d, ox*s - p + kx*d] over valid
/// indices. Inner loops run over precomputed ranges without bounds
/// branches so they vectorize.
fn accum_shifted<F: Scalar>(
    x: &[F],
    (h, w): (usize, usize),
    out: &mut [F],
    (oh, ow): (usize, usize),
    (ky, kx): (usize, usize),
    g: ConvGeom,
    wv: F,
) {
    let off_y = (ky * g.dil) as isize - g.pad as isize;
    let off_x = (kx * g.dil) as isize - g.pad as isize;
    let (ylo, yhi) = valid_range(h, oh, g.stride, off_y);
    let (xlo, xhi) = valid_range(w, ow, g.stride, off_x);
    for oy in ylo..yhi {
        let iy = (oy as isize * g.stride as isize + off_y) as usize;
        let ix0 = (xlo as isize * g.stride as isize + off_x) as usize;
        let orow = &mut out[oy * ow + xlo..oy * ow + xhi];
        if g.stride == 1 {
            let xrow = &x[iy * w + ix0..iy * w + ix0 + (xhi - xlo)];
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o += wv * xv;
            }
        } else {
            let xrow = &x[iy * w..(iy + 1) * w];
            for (k, o) in orow.iter_mut().enumerate() {
                *o += wv * xrow[ix0 + k * g.stride];
            }
        }
    }
}

/// dx[iy,ix] += wv * grad[oy,ox] for the same index relation as `accum_shifted`.
fn scatter_shifted<F: Scalar>(
    grad: &[F],
    (oh, ow): (usize, usize),
    dx: &mut [F],
    (h, w): (usize, usize),
    (ky, kx): (usize, usize),
    g: ConvGeom,
    wv: F,
) {
    let off_y = (ky * g.dil) as isize - g.pad as isize;
    let off_x = (kx * g.dil) as isize - g.pad as isize;
    let (ylo, yhi) = valid_range(h, oh, g.stride, off_y);
    let (xlo, xhi) = valid_range(w, ow, g.stride, off_x);
    for oy in ylo..yhi {
        let iy = (oy as isize * g.stride as isize + off_y) as usize;
        let ix0 = (xlo as isize * g.stride as isize + off_x) as usize;
        let grow = &grad[oy * ow + xlo..oy * ow + xhi];
        if g.stride == 1 {
            let xrow = &mut dx[iy * w + ix0..iy * w + ix0 + (xhi - xlo)];
            for (d, &gv) in xrow.iter_mut().zip(grow) {
                *d += wv * gv;
            }
        } else {
            let xrow = &mut dx[iy * w..(iy + 1) * w];
            for (k, &gv) in grow.iter().enumerate() {
                xrow[ix0 + k * g.stride] += wv * gv;
            }
        }
    }
}

fn dot_shifted<F: Scalar>(
    grad: &[F],
    (oh, ow): (usize, usize),
    x: &[F],
    (h, w): (usize, usize),
    (ky, kx): (usize, usize),
    g: ConvGeom,
) -> F {
    let off_y = (ky * g.dil) as isize - g.pad as isize;
    let off_x = (kx * g.dil) as isize - g.pad as isize;
    let (ylo, yhi) = valid_range(h, oh, g.stride, off_y);
    let (xlo, xhi) = valid_range(w, ow, g.stride, off_x);
    let mut acc = F::zero();
    for oy in ylo..yhi {
        let iy = (oy as isize * g.stride as isize + off_y) as usize;
        let ix0 = (xlo as isize * g.stride as isize + off_x) as usize;
        let grow = &grad[oy * ow + xlo..oy * ow + xhi];
        if g.stride == 1 {
            let xrow = &x[iy * w + ix0..iy * w + ix0 + (xhi - xlo)];
            for (&gv, &xv) in grow.iter().zip(xrow) {
                acc += gv * xv;
            }
        } else {
            let xrow = &x[iy * w..(iy + 1) * w];
            for (k, &gv) in grow.iter().enumerate() {
                acc += gv * xrow[ix0 + k * g.stride];
            }
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<F: Scalar>(
    grad: &[F],
    x: &[F],
    (b, ci, h, w): (usize, usize, usize, usize),
    wgt: &[F],
    (co, kh, kw): (usize, usize, usize),
    g: ConvGeom,
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
) {
    let oh = conv_out_dim(h, kh, g.pad, g.stride, g.dil);
    let ow = conv_out_dim(w, kw, g.pad, g.stride, g.dil);
    if let Some(dx) = dx {
        for ib in 0..b {
            for oc in 0..co {
                let gbase = (ib * co + oc) * oh * ow;
                for ic in 0..ci {
                    let xbase = (ib * ci + ic) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wgt[((oc * ci + ic) * kh + ky) * kw + kx];
                            if wv == F::zero() {
                                continue;
                            }
                            scatter_shifted(
                                &grad[gbase..gbase + oh * ow],
                                (oh, ow),
                                &mut dx[xbase..xbase + h * w],
                                (h, w),
                                (ky, kx),
                                g,
                                wv,
                            );
                        }
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for ib in 0..b {
            for oc in 0..co {
                let gbase = (ib * co + oc) * oh * ow;
                for ic in 0..ci {
                    let xbase = (ib * ci + ic) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            dw[((oc * ci + ic) * kh + ky) * kw + kx] += dot_shifted(
                                &grad[gbase..gbase + oh * ow],
                                (oh, ow),
                                &x[xbase..xbase + h * w],
                                (h, w),
                                (ky, kx),
                                g,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution: weights are `[c, kh, kw]`, one filter per channel.
pub fn depthwise_fwd<F: Scalar>(
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    wgt: &[F],
    (kh, kw): (usize, usize),
    g: ConvGeom,
    out: &mut [F],
) {
    let oh = conv_out_dim(h, kh, g.pad, g.stride, g.dil);
    let ow = conv_out_dim(w, kw, g.pad, g.stride, g.dil);
    for ib in 0..b {
        for ic in 0..c {
            let xbase = (ib * c + ic) * h * w;
            let obase = (ib * c + ic) * oh * ow;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wgt[(ic * kh + ky) * kw + kx];
                    accum_shifted(
                        &x[xbase..xbase + h * w],
                        (h, w),
                        &mut out[obase..obase + oh * ow],
                        (oh, ow),
                        (ky, kx),
                        g,
                        wv,
                    );
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_bwd<F: Scalar>(
    grad: &[F],
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    wgt: &[F],
    (kh, kw): (usize, usize),
    g: ConvGeom,
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
) {
    let oh = conv_out_dim(h, kh, g.pad, g.stride, g.dil);
    let ow = conv_out_dim(w, kw, g.pad, g.stride, g.dil);
    if let Some(dx) = dx {
        for ib in 0..b {
            for ic in 0..c {
                let xbase = (ib * c + ic) * h * w;
                let gbase = (ib * c + ic) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wgt[(ic * kh + ky) * kw + kx];
                        scatter_shifted(
                            &grad[gbase..gbase + oh * ow],
                            (oh, ow),
                            &mut dx[xbase..xbase + h * w],
                            (h, w),
                            (ky, kx),
                            g,
                            wv,
                        );
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for ib in 0..b {
            for ic in 0..c {
                let xbase = (ib * c + ic) * h * w;
                let gbase = (ib * c + ic) * oh * ow;
                for ky in 0..kh {
                    for kx in 0..kw {
                        dw[(ic * kh + ky) * kw + kx] += dot_shifted(
                            &grad[gbase..gbase + oh * ow],
                            (oh, ow),
                            &x[xbase..xbase + h * w],
                            (h, w),
                            (ky, kx),
                            g,
                        );
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Max pooling. Returns per-output linear input indices of the maxima; ties
/// resolve to the lowest linear index. `u32::MAX` marks an all-padding window
/// (output 0, no gradient).
pub fn maxpool_fwd<F: Scalar>(
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    g: ConvGeom,
    out: &mut [F],
    argmax: &mut Vec<u32>,
) {
    let oh = conv_out_dim(h, k, g.pad, g.stride, 1);
    let ow = conv_out_dim(w, k, g.pad, g.stride, 1);
    argmax.clear();
    argmax.reserve(b * c * oh * ow);
    for ib in 0..b {
        for ic in 0..c {
            let base = (ib * c + ic) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = u32::MAX;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            let v = x[idx];
                            if v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = (ib * c + ic) * oh * ow + oy * ow + ox;
                    out[o] = if best_idx == u32::MAX { F::zero() } else { best };
                    argmax.push(best_idx);
                }
            }
        }
    }
}

pub fn maxpool_bwd<F: Scalar>(grad: &[F], argmax: &[u32], dx: &mut [F]) {
    for (gv, &idx) in grad.iter().zip(argmax.iter()) {
        if idx != u32::MAX {
            dx[idx as usize] += *gv;
        }
    }
}

/// Average pooling; padded positions are excluded from the mean.
pub fn avgpool_fwd<F: Scalar>(
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    g: ConvGeom,
    out: &mut [F],
) {
    avgpool_apply(Some(x), None::<&mut [F]>, None, (b, c, h, w), k, g, out, false);
}

pub fn avgpool_bwd<F: Scalar>(
    grad: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    g: ConvGeom,
    dx: &mut [F],
) {
    avgpool_apply(None, Some(dx), Some(grad), (b, c, h, w), k, g, &mut [], true);
}

#[allow(clippy::too_many_arguments)]
fn avgpool_apply<F: Scalar>(
    x: Option<&[F]>,
    mut dx: Option<&mut [F]>,
    grad: Option<&[F]>,
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    g: ConvGeom,
    out: &mut [F],
    backward: bool,
) {
    let oh = conv_out_dim(h, k, g.pad, g.stride, 1);
    let ow = conv_out_dim(w, k, g.pad, g.stride, 1);
    for ib in 0..b {
        for ic in 0..c {
            let base = (ib * c + ic) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * g.stride) as isize - g.pad as isize;
                    let x0 = (ox * g.stride) as isize - g.pad as isize;
                    let ylo = y0.max(0) as usize;
                    let yhi = ((y0 + k as isize).min(h as isize)).max(0) as usize;
                    let xlo = x0.max(0) as usize;
                    let xhi = ((x0 + k as isize).min(w as isize)).max(0) as usize;
                    let count = (yhi.saturating_sub(ylo)) * (xhi.saturating_sub(xlo));
                    let o = (ib * c + ic) * oh * ow + oy * ow + ox;
                    if count == 0 {
                        if !backward {
                            out[o] = F::zero();
                        }
                        continue;
                    }
                    let inv = F::one() / F::fromf(count as f64);
                    if backward {
                        let gv = grad.unwrap()[o] * inv;
                        let dx = dx.as_deref_mut().unwrap();
                        for iy in ylo..yhi {
                            for ix in xlo..xhi {
                                dx[base + iy * w + ix] += gv;
                            }
                        }
                    } else {
                        let x = x.unwrap();
                        let mut acc = F::zero();
                        for iy in ylo..yhi {
                            for ix in xlo..xhi {
                                acc += x[base + iy * w + ix];
                            }
                        }
                        out[o] = acc * inv;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// affine grid sampling (bilinear, zero padding)
// ---------------------------------------------------------------------------

/// Samples `x` on the grid `src = A*(dst - center) + center + t`, where
/// `theta = [a11, a12, tx, a21, a22, ty]` and coordinates are pixel indices.
/// The identity theta reproduces the input bit-exactly (sample points land
/// on pixel centers). Out-of-range samples read zero.
pub fn affine_sample_fwd<F: Scalar>(
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    theta: &[F; 6],
    out: &mut [F],
) {
    affine_sample_impl(x, None, None, None, (b, c, h, w), theta, Some(out));
}

/// Backward: accumulates into `dx` and `dtheta` from `grad`.
pub fn affine_sample_bwd<F: Scalar>(
    x: &[F],
    grad: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    theta: &[F; 6],
    dx: &mut [F],
    dtheta: &mut [F; 6],
) {
    affine_sample_impl(x, Some(grad), Some(dx), Some(dtheta), (b, c, h, w), theta, None);
}

#[allow(clippy::too_many_arguments)]
fn affine_sample_impl<F: Scalar>(
    x: &[F],
    grad: Option<&[F]>,
    mut dx: Option<&mut [F]>,
    mut dtheta: Option<&mut [F; 6]>,
    (b, c, h, w): (usize, usize, usize, usize),
    theta: &[F; 6],
    mut out: Option<&mut [F]>,
) {
    let cx = F::fromf((w as f64 - 1.0) / 2.0);
    let cy = F::fromf((h as f64 - 1.0) / 2.0);
    let hw = h * w;
    for oy in 0..h {
        let ry = F::fromf(oy as f64) - cy;
        for ox in 0..w {
            let rx = F::fromf(ox as f64) - cx;
            let sx = theta[0] * rx + theta[1] * ry + theta[2] + cx;
            let sy = theta[3] * rx + theta[4] * ry + theta[5] + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let x0i = x0.f64() as isize;
            let y0i = y0.f64() as isize;
            // (corner dy, corner dx, weight)
            let corners = [
                (0isize, 0isize, (F::one() - fx) * (F::one() - fy)),
                (0, 1, fx * (F::one() - fy)),
                (1, 0, (F::one() - fx) * fy),
                (1, 1, fx * fy),
            ];
            let fetch = |bi: usize, ci: usize, dy: isize, dxx: isize| -> F {
                let yy = y0i + dy;
                let xx = x0i + dxx;
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                    F::zero()
                } else {
                    x[(bi * c + ci) * hw + yy as usize * w + xx as usize]
                }
            };
            for bi in 0..b {
                for ci in 0..c {
                    let o = (bi * c + ci) * hw + oy * w + ox;
                    if let Some(out) = out.as_deref_mut() {
                        let mut acc = F::zero();
                        for &(dy, dxx, wt) in &corners {
                            if wt != F::zero() {
                                acc += wt * fetch(bi, ci, dy, dxx);
                            }
                        }
                        out[o] = acc;
                    }
                    if let Some(g) = grad {
                        let gv = g[o];
                        if gv == F::zero() {
                            continue;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for &(dy, dxx, wt) in &corners {
                                let yy = y0i + dy;
                                let xx = x0i + dxx;
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    dx[(bi * c + ci) * hw + yy as usize * w + xx as usize] +=
                                        wt * gv;
                                }
                            }
                        }
                        if let Some(dtheta) = dtheta.as_deref_mut() {
                            let v00 = fetch(bi, ci, 0, 0);
                            let v01 = fetch(bi, ci, 0, 1);
                            let v10 = fetch(bi, ci, 1, 0);
                            let v11 = fetch(bi, ci, 1, 1);
                            let dsx = (v01 - v00) * (F::one() - fy) + (v11 - v10) * fy;
                            let dsy = (v10 - v00) * (F::one() - fx) + (v11 - v01) * fx;
                            dtheta[0] += gv * dsx * rx;
                            dtheta[1] += gv * dsx * ry;
                            dtheta[2] += gv * dsx;
                            dtheta[3] += gv * dsy * rx;
                            dtheta[4] += gv * dsy * ry;
                            dtheta[5] += gv * dsy;
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// batch normalization (per-channel batch statistics)
// ---------------------------------------------------------------------------

pub struct BnSaved<F> {
    pub mean: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Normalizes each channel with statistics of the current minibatch, then
/// applies the learnable per-channel affine.
pub fn batchnorm_fwd<F: Scalar>(
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    gamma: &[F],
    beta: &[F],
    eps: F,
    out: &mut [F],
) -> BnSaved<F> {
    let m = b * h * w;
    let inv_m = F::one() / F::fromf(m as f64);
    let hw = h * w;
    let mut mean = vec![F::zero(); c];
    let mut inv_std = vec![F::zero(); c];
    for ic in 0..c {
        let mut acc = F::zero();
        for ib in 0..b {
            let base = (ib * c + ic) * hw;
            for v in &x[base..base + hw] {
                acc += *v;
            }
        }
        let mu = acc * inv_m;
        let mut var = F::zero();
        for ib in 0..b {
            let base = (ib * c + ic) * hw;
            for v in &x[base..base + hw] {
                let d = *v - mu;
                var += d * d;
            }
        }
        var = var * inv_m;
        let istd = F::one() / (var + eps).sqrt();
        mean[ic] = mu;
        inv_std[ic] = istd;
        for ib in 0..b {
            let base = (ib * c + ic) * hw;
            for i in base..base + hw {
                out[i] = (x[i] - mu) * istd * gamma[ic] + beta[ic];
            }
        }
    }
    BnSaved { mean, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_bwd<F: Scalar>(
    grad: &[F],
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    gamma: &[F],
    saved: &BnSaved<F>,
    dx: &mut [F],
    dgamma: &mut [F],
    dbeta: &mut [F],
) {
    let m = b * h * w;
    let inv_m = F::one() / F::fromf(m as f64);
    let hw = h * w;
    for ic in 0..c {
        let mu = saved.mean[ic];
        let istd = saved.inv_std[ic].clone();
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for ib in 0..b {
            let base = (ib * c + ic) * hw;
            for i in base..base + hw {
                let xhat = (x[i] - mu) * istd;
                sum_g += grad[i];
                sum_gx += grad[i] * xhat;
            }
        }
        dgamma[ic] += sum_gx;
        dbeta[ic] += sum_g;
        let mean_g = sum_g * inv_m;
        let mean_gx = sum_gx * inv_m;
        let scale = gamma[ic] * istd;
        for ib in 0..b {
            let base = (ib * c + ic) * hw;
            for i in base..base + hw {
                let xhat = (x[i] - mu) * istd;
                dx[i] += scale * (grad[i] - mean_g - xhat * mean_gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_is_identity() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x: Vec<f32> = (0..2 * 3 * 4 * 4).map(|i| i as f32 * 0.1).collect();
        let mut out = vec![0.0f32; x.len()];
        // identity needs ci==co with a diagonal kernel
        let mut w = vec![0.0f32; 3 * 3];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        conv2d_fwd(
            &x,
            (2, 3, 4, 4),
            &w,
            (3, 1, 1),
            ConvGeom { stride: 1, pad: 0, dil: 1 },
            &mut out,
        );
        assert_eq!(x, out);
    }

    #[test]
    fn affine_identity_is_bit_exact() {
        let x: Vec<f32> = (0..1 * 2 * 5 * 7).map(|i| (i as f32).sin()).collect();
        let mut out = vec![0.0f32; x.len()];
        let theta = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0];
        affine_sample_fwd(&x, (1, 2, 5, 7), &theta, &mut out);
        assert_eq!(x, out);
    }

    #[test]
    fn maxpool_tie_breaks_to_lowest_index() {
        let x = vec![1.0f32, 1.0, 1.0, 1.0];
        let mut out = vec![0.0f32; 1];
        let mut arg = Vec::new();
        maxpool_fwd(&x, (1, 1, 2, 2), 2, ConvGeom { stride: 1, pad: 0, dil: 1 }, &mut out, &mut arg);
        assert_eq!(out[0], 1.0);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn avgpool_excludes_padding_from_count() {
        // single pixel, 3x3 window with pad 1: mean over the one valid cell
        let x = vec![2.0f32];
        let mut out = vec![0.0f32; 1];
        avgpool_fwd(&x, (1, 1, 1, 1), 3, ConvGeom { stride: 1, pad: 1, dil: 1 }, &mut out);
        assert_eq!(out[0], 2.0);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).cos()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.3).sin()).collect();
        let mut out = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                assert!((out[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }
}

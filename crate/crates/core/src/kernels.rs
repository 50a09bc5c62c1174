//! Dense numeric kernels for the autodiff ops: convolutions, pooling,
//! upsampling and per-channel normalization. Everything operates on
//! standard-layout slices with explicit dimensions.

use crate::scalar::Scalar;

/// Output extent of a same-padded convolution.
pub fn conv_out(n: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (n + 2 * pad - k) / stride + 1
}

/// Contiguous output range [lo, hi) whose input index ox*stride + offset
/// stays inside [0, n), with offset = k_idx - pad.
#[inline]
fn valid_range(out_n: usize, stride: usize, offset: isize, n: usize) -> (usize, usize) {
    // ox*stride + offset >= 0  =>  ox >= ceil(-offset / stride)
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    // ox*stride + offset < n  =>  ox <= (n - 1 - offset) / stride
    let hi_excl = if (n as isize) <= offset {
        0
    } else {
        ((n as isize - 1 - offset) as usize) / stride + 1
    };
    (lo.min(out_n), hi_excl.min(out_n))
}

/// y[lo..hi] += a * x[x_start..] with unit stride.
#[inline]
fn saxpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// y[..] += a * x[..] where x is read with the given stride.
#[inline]
fn saxpy_strided<T: Scalar>(y: &mut [T], x: &[T], stride: usize, a: T) {
    if stride == 1 {
        saxpy(y, &x[..y.len()], a);
    } else {
        for (o, v) in y.iter_mut().zip(x.iter().step_by(stride)) {
            *o += a * *v;
        }
    }
}

/// dot(y, x with stride), plus y scattered into gx with the same stride.
#[inline]
fn dot_and_scatter<T: Scalar>(
    y: &[T],
    x: &[T],
    stride: usize,
    wv: T,
    mut gx: Option<&mut [T]>,
) -> T {
    let mut acc = T::zero();
    if stride == 1 {
        let x = &x[..y.len()];
        if let Some(gx) = gx.as_deref_mut() {
            let gx = &mut gx[..y.len()];
            for i in 0..y.len() {
                acc += y[i] * x[i];
                gx[i] += wv * y[i];
            }
        } else {
            for i in 0..y.len() {
                acc += y[i] * x[i];
            }
        }
    } else if let Some(gx) = gx.as_deref_mut() {
        for (i, g) in y.iter().enumerate() {
            acc += *g * x[i * stride];
            gx[i * stride] += wv * *g;
        }
    } else {
        for (i, g) in y.iter().enumerate() {
            acc += *g * x[i * stride];
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    out: &mut [T],
) {
    let pad = (k - 1) / 2;
    let (oh, ow) = (conv_out(h, k, stride), conv_out(wd, k, stride));
    debug_assert_eq!(out.len(), cout * oh * ow);
    for co in 0..cout {
        let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
        o.fill(b[co]);
        for ci in 0..cin {
            let xp = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let off_x = kx as isize - pad as isize;
                    let (lo, hi) = valid_range(ow, stride, off_x, wd);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xp[iy as usize * wd..(iy as usize + 1) * wd];
                        let x_start = (lo * stride) as isize + off_x;
                        saxpy_strided(
                            &mut o[oy * ow + lo..oy * ow + hi],
                            &row[x_start as usize..],
                            stride,
                            wv,
                        );
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let pad = (k - 1) / 2;
    let (oh, ow) = (conv_out(h, k, stride), conv_out(wd, k, stride));
    if let Some(gb) = gb {
        for co in 0..cout {
            let go = &gout[co * oh * ow..(co + 1) * oh * ow];
            gb[co] += go.iter().copied().sum();
        }
    }
    let mut gxs = gx;
    let mut gws = gw;
    for co in 0..cout {
        let go = &gout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xp = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = w[widx];
                    let off_x = kx as isize - pad as isize;
                    let (lo, hi) = valid_range(ow, stride, off_x, wd);
                    if lo >= hi {
                        continue;
                    }
                    let mut wacc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * wd;
                        let x_start = base + (lo * stride + kx) - pad;
                        let gx_row = gxs
                            .as_deref_mut()
                            .map(|gx| &mut gx[ci * h * wd + x_start..]);
                        wacc = wacc
                            + dot_and_scatter(
                                &go[oy * ow + lo..oy * ow + hi],
                                &xp[x_start..],
                                stride,
                                wv,
                                gx_row,
                            );
                    }
                    if let Some(gw) = gws.as_deref_mut() {
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    cin: usize,
    d: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    out: &mut [T],
) {
    let pad = (k - 1) / 2;
    let od = conv_out(d, k, stride);
    let oh = conv_out(h, k, stride);
    let ow = conv_out(wd, k, stride);
    debug_assert_eq!(out.len(), cout * od * oh * ow);
    for co in 0..cout {
        let o = &mut out[co * od * oh * ow..(co + 1) * od * oh * ow];
        o.fill(b[co]);
        for ci in 0..cin {
            let xp = &x[ci * d * h * wd..(ci + 1) * d * h * wd];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let off_x = kx as isize - pad as isize;
                        let (lo, hi) = valid_range(ow, stride, off_x, wd);
                        if lo >= hi {
                            continue;
                        }
                        for oz in 0..od {
                            let iz = (oz * stride + kz) as isize - pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            let xslab = &xp[iz as usize * h * wd..(iz as usize + 1) * h * wd];
                            let oslab = &mut o[oz * oh * ow..(oz + 1) * oh * ow];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &xslab[iy as usize * wd..(iy as usize + 1) * wd];
                                let x_start = lo * stride + kx - pad;
                                saxpy_strided(
                                    &mut oslab[oy * ow + lo..oy * ow + hi],
                                    &row[x_start..],
                                    stride,
                                    wv,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    cin: usize,
    d: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let pad = (k - 1) / 2;
    let od = conv_out(d, k, stride);
    let oh = conv_out(h, k, stride);
    let ow = conv_out(wd, k, stride);
    if let Some(gb) = gb {
        for co in 0..cout {
            let go = &gout[co * od * oh * ow..(co + 1) * od * oh * ow];
            gb[co] += go.iter().copied().sum();
        }
    }
    let mut gxs = gx;
    let mut gws = gw;
    for co in 0..cout {
        let go = &gout[co * od * oh * ow..(co + 1) * od * oh * ow];
        for ci in 0..cin {
            let xp = &x[ci * d * h * wd..(ci + 1) * d * h * wd];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                        let wv = w[widx];
                        let off_x = kx as isize - pad as isize;
                        let (lo, hi) = valid_range(ow, stride, off_x, wd);
                        if lo >= hi {
                            continue;
                        }
                        let mut wacc = T::zero();
                        for oz in 0..od {
                            let iz = (oz * stride + kz) as isize - pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            let zbase = iz as usize * h * wd;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = zbase + iy as usize * wd;
                                let x_start = base + lo * stride + kx - pad;
                                let gx_row = gxs
                                    .as_deref_mut()
                                    .map(|gx| &mut gx[ci * d * h * wd + x_start..]);
                                wacc = wacc
                                    + dot_and_scatter(
                                        &go[(oz * oh + oy) * ow + lo..(oz * oh + oy) * ow + hi],
                                        &xp[x_start..],
                                        stride,
                                        wv,
                                        gx_row,
                                    );
                            }
                        }
                        if let Some(gw) = gws.as_deref_mut() {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping average pooling over [C, H, W] with kernel equal to the
/// stride; a partial window at the bottom/right edge averages over the
/// elements it actually covers.
pub fn avg_pool2d_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let y_end = (oy * k + k).min(h);
            for ox in 0..ow {
                let x_end = (ox * k + k).min(w);
                let mut s = T::zero();
                for y in oy * k..y_end {
                    for xx in ox * k..x_end {
                        s += xp[y * w + xx];
                    }
                }
                let count = (y_end - oy * k) * (x_end - ox * k);
                op[oy * ow + ox] = s / T::of_usize(count);
            }
        }
    }
}

pub fn avg_pool2d_backward<T: Scalar>(
    gout: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    gx: &mut [T],
) {
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    for ch in 0..c {
        let gp = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        let gxp = &mut gx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let y_end = (oy * k + k).min(h);
            for ox in 0..ow {
                let x_end = (ox * k + k).min(w);
                let count = (y_end - oy * k) * (x_end - ox * k);
                let g = gp[oy * ow + ox] / T::of_usize(count);
                for y in oy * k..y_end {
                    for xx in ox * k..x_end {
                        gxp[y * w + xx] += g;
                    }
                }
            }
        }
    }
}

/// Corner-aligned bilinear weights for one output index.
#[inline]
fn up_weights<T: Scalar>(o: usize, out_n: usize, in_n: usize) -> (usize, usize, T) {
    if out_n == 1 || in_n == 1 {
        return (0, 0, T::zero());
    }
    let f = T::of_usize(o) * T::of_usize(in_n - 1) / T::of_usize(out_n - 1);
    let i0 = f.floor().as_f64() as usize;
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, f - T::of_usize(i0))
}

/// Bilinear upsample [C, h, w] to [C, oh, ow], corner-aligned.
pub fn upsample2d_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    for oy in 0..oh {
        let (y0, y1, wy) = up_weights::<T>(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, wx) = up_weights::<T>(ox, ow, w);
            for ch in 0..c {
                let xp = &x[ch * h * w..(ch + 1) * h * w];
                let top = xp[y0 * w + x0] * (T::one() - wx) + xp[y0 * w + x1] * wx;
                let bot = xp[y1 * w + x0] * (T::one() - wx) + xp[y1 * w + x1] * wx;
                out[(ch * oh + oy) * ow + ox] = top * (T::one() - wy) + bot * wy;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn upsample2d_backward<T: Scalar>(
    gout: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    gx: &mut [T],
) {
    for oy in 0..oh {
        let (y0, y1, wy) = up_weights::<T>(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, wx) = up_weights::<T>(ox, ow, w);
            for ch in 0..c {
                let g = gout[(ch * oh + oy) * ow + ox];
                let gp = &mut gx[ch * h * w..(ch + 1) * h * w];
                gp[y0 * w + x0] += g * (T::one() - wy) * (T::one() - wx);
                gp[y0 * w + x1] += g * (T::one() - wy) * wx;
                gp[y1 * w + x0] += g * wy * (T::one() - wx);
                gp[y1 * w + x1] += g * wy * wx;
            }
        }
    }
}

/// Nearest-neighbor 2x upsample of [C, D, H, W].
pub fn upsample3d2x_forward<T: Scalar>(
    x: &[T],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    out: &mut [T],
) {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    for ch in 0..c {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[((ch * od + oz) * oh + oy) * ow + ox] =
                        x[((ch * d + oz / 2) * h + oy / 2) * w + ox / 2];
                }
            }
        }
    }
}

pub fn upsample3d2x_backward<T: Scalar>(
    gout: &[T],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    gx: &mut [T],
) {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    for ch in 0..c {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    gx[((ch * d + oz / 2) * h + oy / 2) * w + ox / 2] +=
                        gout[((ch * od + oz) * oh + oy) * ow + ox];
                }
            }
        }
    }
}

/// Per-channel normalization over all spatial positions of one sample, with
/// learnable gain and bias. Statistics depend only on the input itself, so
/// inference is deterministic and batch-independent.
pub fn channel_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    c: usize,
    spatial: usize,
    eps: T,
    out: &mut [T],
    stats: &mut Vec<(T, T)>,
) {
    stats.clear();
    let n = T::of_usize(spatial);
    for ch in 0..c {
        let xp = &x[ch * spatial..(ch + 1) * spatial];
        let mean = xp.iter().copied().sum::<T>() / n;
        let mut var = T::zero();
        for &v in xp {
            let dv = v - mean;
            var += dv * dv;
        }
        var = var / n;
        let invstd = T::one() / (var + eps).sqrt();
        stats.push((mean, invstd));
        let op = &mut out[ch * spatial..(ch + 1) * spatial];
        for (o, &v) in op.iter_mut().zip(xp.iter()) {
            *o = gain[ch] * ((v - mean) * invstd) + bias[ch];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn channel_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    stats: &[(T, T)],
    c: usize,
    spatial: usize,
    gout: &[T],
    gx: Option<&mut [T]>,
    ggain: Option<&mut [T]>,
    gbias: Option<&mut [T]>,
) {
    let n = T::of_usize(spatial);
    let mut gxs = gx;
    let mut ggains = ggain;
    let mut gbiases = gbias;
    for ch in 0..c {
        let (mean, invstd) = stats[ch];
        let xp = &x[ch * spatial..(ch + 1) * spatial];
        let gp = &gout[ch * spatial..(ch + 1) * spatial];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&g, &v) in gp.iter().zip(xp.iter()) {
            let xhat = (v - mean) * invstd;
            sum_g += g;
            sum_gx += g * xhat;
        }
        if let Some(gb) = gbiases.as_deref_mut() {
            gb[ch] += sum_g;
        }
        if let Some(gg) = ggains.as_deref_mut() {
            gg[ch] += sum_gx;
        }
        if let Some(gx) = gxs.as_deref_mut() {
            let gxp = &mut gx[ch * spatial..(ch + 1) * spatial];
            let mean_g = sum_g / n;
            let mean_gx = sum_gx / n;
            for ((o, &g), &v) in gxp.iter_mut().zip(gp.iter()).zip(xp.iter()) {
                let xhat = (v - mean) * invstd;
                *o += gain[ch] * invstd * (g - mean_g - xhat * mean_gx);
            }
        }
    }
}

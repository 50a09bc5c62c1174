//! Bilinear sampling shared by every warp in the pipeline.
//!
//! Out-of-bounds taps read zero; a sample is flagged valid only when the
//! continuous coordinate lies inside [0, W-1] x [0, H-1].

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::scalar::Scalar;

/// The four taps and weights of one bilinear lookup.
#[derive(Debug, Clone, Copy)]
pub struct Taps<T> {
    pub x0: isize,
    pub y0: isize,
    pub wx: T,
    pub wy: T,
    pub in_bounds: bool,
}

pub fn taps<T: Scalar>(x: T, y: T, width: usize, height: usize) -> Taps<T> {
    let xf = x.floor();
    let yf = y.floor();
    let in_bounds = x >= T::zero()
        && y >= T::zero()
        && x <= T::of_usize(width - 1)
        && y <= T::of_usize(height - 1);
    Taps {
        x0: xf.as_f64() as isize,
        y0: yf.as_f64() as isize,
        wx: x - xf,
        wy: y - yf,
        in_bounds,
    }
}

#[inline]
fn tap_value<T: Scalar>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Sample one scalar plane stored row-major as `h` rows of `w` values.
#[inline]
pub fn sample_plane<T: Scalar>(plane: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let t = taps(x, y, w, h);
    let v00 = tap_value(plane, h, w, t.y0, t.x0);
    let v01 = tap_value(plane, h, w, t.y0, t.x0 + 1);
    let v10 = tap_value(plane, h, w, t.y0 + 1, t.x0);
    let v11 = tap_value(plane, h, w, t.y0 + 1, t.x0 + 1);
    let one = T::one();
    (one - t.wy) * ((one - t.wx) * v00 + t.wx * v01) + t.wy * ((one - t.wx) * v10 + t.wx * v11)
}

/// Scatter an output gradient back into the plane gradient buffer.
#[inline]
pub fn scatter_plane_grad<T: Scalar>(grad: &mut [T], h: usize, w: usize, x: T, y: T, g: T) {
    let t = taps(x, y, w, h);
    let one = T::one();
    let mut add = |yy: isize, xx: isize, wgt: T| {
        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
            grad[yy as usize * w + xx as usize] += g * wgt;
        }
    };
    add(t.y0, t.x0, (one - t.wy) * (one - t.wx));
    add(t.y0, t.x0 + 1, (one - t.wy) * t.wx);
    add(t.y0 + 1, t.x0, t.wy * (one - t.wx));
    add(t.y0 + 1, t.x0 + 1, t.wy * t.wx);
}

/// Partial derivatives of the sampled value with respect to the coordinates.
#[inline]
pub fn coord_grads<T: Scalar>(plane: &[T], h: usize, w: usize, x: T, y: T) -> (T, T) {
    let t = taps(x, y, w, h);
    let v00 = tap_value(plane, h, w, t.y0, t.x0);
    let v01 = tap_value(plane, h, w, t.y0, t.x0 + 1);
    let v10 = tap_value(plane, h, w, t.y0 + 1, t.x0);
    let v11 = tap_value(plane, h, w, t.y0 + 1, t.x0 + 1);
    let one = T::one();
    let dx = (one - t.wy) * (v01 - v00) + t.wy * (v11 - v10);
    let dy = (one - t.wx) * (v10 - v00) + t.wx * (v11 - v01);
    (dx, dy)
}

/// Sample a [C, H, W] image at real-valued coordinates; one output column of
/// C values per coordinate. Also reports per-coordinate validity.
pub fn bilinear_sample<T: Scalar>(
    image: ArrayView3<T>,
    coords: &[(T, T)],
) -> (Vec<Vec<T>>, Vec<bool>) {
    let (c, h, w) = image.dim();
    let data = image.as_slice().expect("image must be standard layout");
    let mut values = Vec::with_capacity(coords.len());
    let mut valid = Vec::with_capacity(coords.len());
    for &(x, y) in coords {
        let mut col = Vec::with_capacity(c);
        for ch in 0..c {
            col.push(sample_plane(&data[ch * h * w..(ch + 1) * h * w], h, w, x, y));
        }
        values.push(col);
        valid.push(taps(x, y, w, h).in_bounds);
    }
    (values, valid)
}

/// Sample a single-channel map at a grid of coordinates, returning a map of
/// the same grid shape plus validity.
pub fn sample_map_grid<T: Scalar>(
    map: ArrayView2<T>,
    xs: &Array2<T>,
    ys: &Array2<T>,
) -> (Array2<T>, Array2<bool>) {
    let (h, w) = map.dim();
    let data = map.as_slice().expect("map must be standard layout");
    let mut out = Array2::zeros(xs.dim());
    let mut valid = Array2::from_elem(xs.dim(), false);
    for ((idx, v), m) in out.indexed_iter_mut().zip(valid.iter_mut()) {
        let (x, y) = (xs[idx], ys[idx]);
        *v = sample_plane(data, h, w, x, y);
        *m = taps(x, y, w, h).in_bounds;
    }
    (out, valid)
}

/// Sample a [C, H, W] feature map at a per-pixel coordinate grid, producing
/// [C, out_h, out_w] plus validity.
pub fn sample_feat_grid<T: Scalar>(
    feat: ArrayView3<T>,
    xs: &Array2<T>,
    ys: &Array2<T>,
) -> (Array3<T>, Array2<bool>) {
    let (c, h, w) = feat.dim();
    let (oh, ow) = xs.dim();
    let data = feat.as_slice().expect("feature map must be standard layout");
    let mut out = Array3::zeros((c, oh, ow));
    let mut valid = Array2::from_elem((oh, ow), false);
    for oy in 0..oh {
        for ox in 0..ow {
            let (x, y) = (xs[[oy, ox]], ys[[oy, ox]]);
            for ch in 0..c {
                out[[ch, oy, ox]] = sample_plane(&data[ch * h * w..(ch + 1) * h * w], h, w, x, y);
            }
            valid[[oy, ox]] = taps(x, y, w, h).in_bounds;
        }
    }
    (out, valid)
}

//! Dense per-pixel map types: disparity maps with validity masks and
//! multi-channel feature maps.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-pixel disparity estimate (inverse scene units) with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap<T> {
    pub data: Array2<T>,
    pub mask: Array2<bool>,
}

impl<T: Scalar> DisparityMap<T> {
    pub fn new(data: Array2<T>, mask: Array2<bool>) -> Result<Self> {
        if data.dim() != mask.dim() {
            return Err(Error::shape(format!(
                "disparity data {:?} vs mask {:?}",
                data.dim(),
                mask.dim()
            )));
        }
        Ok(DisparityMap { data, mask })
    }

    /// All pixels valid.
    pub fn dense(data: Array2<T>) -> Self {
        let mask = Array2::from_elem(data.dim(), true);
        DisparityMap { data, mask }
    }

    /// Marks non-finite and non-positive entries invalid, the ground-truth
    /// encoding convention.
    pub fn from_encoded(data: Array2<T>) -> Self {
        let mask = data.map(|v| v.is_finite() && v.as_f64() > 0.0);
        DisparityMap { data, mask }
    }

    /// (height, width).
    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn cast<U: Scalar>(&self) -> DisparityMap<U> {
        DisparityMap {
            data: self.data.map(|v| U::of(v.as_f64())),
            mask: self.mask.clone(),
        }
    }

    /// Downsample by an integer factor, preferring the top-left pixel of each
    /// block and falling back to the first valid pixel in scan order.
    pub fn downsample_nearest_valid(&self, scale: usize) -> DisparityMap<T> {
        assert!(scale >= 1);
        let (h, w) = self.dim();
        let (oh, ow) = (h.div_ceil(scale), w.div_ceil(scale));
        let mut data = Array2::zeros((oh, ow));
        let mut mask = Array2::from_elem((oh, ow), false);
        for oy in 0..oh {
            for ox in 0..ow {
                let (sy, sx) = (oy * scale, ox * scale);
                let mut found = false;
                'block: for dy in 0..scale {
                    for dx in 0..scale {
                        let (y, x) = (sy + dy, sx + dx);
                        if y < h && x < w && self.mask[[y, x]] {
                            data[[oy, ox]] = self.data[[y, x]];
                            mask[[oy, ox]] = true;
                            found = true;
                            break 'block;
                        }
                    }
                }
                if !found {
                    data[[oy, ox]] = T::zero();
                }
            }
        }
        DisparityMap { data, mask }
    }

    /// Bilinear upsample to the given full resolution (corner-aligned).
    /// The mask is not interpolated; invalid inputs only occur in ground
    /// truth, which is never upsampled.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> DisparityMap<T> {
        let (h, w) = self.dim();
        let mut out = Array2::zeros((out_h, out_w));
        let sy = if out_h > 1 {
            T::of_usize(h - 1) / T::of_usize(out_h - 1)
        } else {
            T::zero()
        };
        let sx = if out_w > 1 {
            T::of_usize(w - 1) / T::of_usize(out_w - 1)
        } else {
            T::zero()
        };
        for oy in 0..out_h {
            let fy = T::of_usize(oy) * sy;
            let y0 = fy.floor().as_f64() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - T::of_usize(y0);
            for ox in 0..out_w {
                let fx = T::of_usize(ox) * sx;
                let x0 = fx.floor().as_f64() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - T::of_usize(x0);
                let top = self.data[[y0, x0]] * (T::one() - wx) + self.data[[y0, x1]] * wx;
                let bot = self.data[[y1, x0]] * (T::one() - wx) + self.data[[y1, x1]] * wx;
                out[[oy, ox]] = top * (T::one() - wy) + bot * wy;
            }
        }
        DisparityMap::dense(out)
    }
}

/// Multi-channel feature map at a fixed downsampling factor relative to the
/// source image; data layout is [channels, height, width].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array3<T>,
    pub scale: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Array3<T>, scale: usize) -> Self {
        FeatureMap { data, scale }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// (height, width).
    pub fn dim(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn encoded_validity_convention() {
        let d = arr2(&[[0.5, 0.0], [-1.0, f64::NAN]]);
        let m = DisparityMap::from_encoded(d);
        assert!(m.mask[[0, 0]]);
        assert!(!m.mask[[0, 1]]);
        assert!(!m.mask[[1, 0]]);
        assert!(!m.mask[[1, 1]]);
        assert_eq!(m.valid_count(), 1);
    }

    #[test]
    fn downsample_prefers_top_left() {
        let d = arr2(&[
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
            [13.0, 14.0, 15.0, 16.0],
        ]);
        let m = DisparityMap::dense(d).downsample_nearest_valid(2);
        assert_eq!(m.data, arr2(&[[1.0, 3.0], [9.0, 11.0]]));
    }

    #[test]
    fn downsample_falls_back_to_valid_neighbor() {
        let data = arr2(&[[0.0, 2.0], [3.0, 4.0]]);
        let src = DisparityMap::from_encoded(data);
        let m = src.downsample_nearest_valid(2);
        assert!(m.mask[[0, 0]]);
        assert_eq!(m.data[[0, 0]], 2.0);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let d = Array2::from_elem((4, 4), 0.37_f64);
        let up = DisparityMap::dense(d).upsample_bilinear(16, 16);
        for v in up.data.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }
}

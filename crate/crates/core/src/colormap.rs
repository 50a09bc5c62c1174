//! Disparity map visualization: a fixed warm-cold color ramp rendered to
//! 8-bit RGB for qualitative side-by-side comparison.

use ndarray::Array3;

use crate::maps::DisparityMap;
use crate::scalar::Scalar;

/// Five-stop piecewise-linear ramp from deep blue (far) to yellow (near).
const STOPS: [[f64; 3]; 5] = [
    [0.05, 0.03, 0.35],
    [0.15, 0.35, 0.85],
    [0.10, 0.75, 0.55],
    [0.85, 0.75, 0.15],
    [0.99, 0.95, 0.55],
];

fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f;
        out[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Renders a disparity map to RGB with the given normalization range.
/// Invalid pixels are black.
pub fn colorize<T: Scalar>(map: &DisparityMap<T>, lo: f64, hi: f64) -> Array3<u8> {
    let (h, w) = map.dim();
    let span = (hi - lo).max(1e-12);
    let mut out = Array3::zeros((3, h, w));
    for ((y, x), v) in map.data.indexed_iter() {
        if !map.mask[[y, x]] {
            continue;
        }
        let rgb = ramp((v.as_f64() - lo) / span);
        for c in 0..3 {
            out[[c, y, x]] = rgb[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn range_ends_map_to_ramp_ends() {
        let data = Array2::from_shape_vec((1, 2), vec![0.0f64, 1.0]).unwrap();
        let img = colorize(&DisparityMap::dense(data), 0.0, 1.0);
        assert_eq!(
            [img[[0, 0, 0]], img[[1, 0, 0]], img[[2, 0, 0]]],
            ramp(0.0)
        );
        assert_eq!(
            [img[[0, 0, 1]], img[[1, 0, 1]], img[[2, 0, 1]]],
            ramp(1.0)
        );
    }

    #[test]
    fn invalid_pixels_render_black() {
        let mut m = DisparityMap::dense(Array2::from_elem((1, 1), 0.5f64));
        m.mask[[0, 0]] = false;
        let img = colorize(&m, 0.0, 1.0);
        assert_eq!(img[[0, 0, 0]], 0);
        assert_eq!(img[[1, 0, 0]], 0);
        assert_eq!(img[[2, 0, 0]], 0);
    }
}

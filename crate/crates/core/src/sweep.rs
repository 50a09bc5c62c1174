//! Plane-sweep warping and cross-view disparity transfer.
//!
//! All functions here take cameras already rescaled to the resolution of the
//! maps they operate on.

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DisparityHypotheses, PixelProjector, RescalePlane};
use crate::maps::{DisparityMap, FeatureMap};
use crate::sampling::{sample_plane, taps};
use crate::scalar::Scalar;

/// Per-reference-pixel source coordinates produced by projecting each pixel
/// at its estimated disparity.
#[derive(Debug, Clone)]
pub struct Correspondence<T> {
    pub xs: Array2<T>,
    pub ys: Array2<T>,
    pub valid: Array2<bool>,
}

impl<T: Scalar> Correspondence<T> {
    pub fn dim(&self) -> (usize, usize) {
        self.xs.dim()
    }
}

/// Projects every reference pixel at its disparity into the source view.
/// Pixels with invalid disparity or projections behind the source camera are
/// flagged invalid.
pub fn project_map<T: Scalar>(
    d_ref: &DisparityMap<T>,
    reference: &CameraModel<T>,
    source: &CameraModel<T>,
) -> Correspondence<T> {
    let (h, w) = d_ref.dim();
    let proj = PixelProjector::new(reference, source);
    let mut xs = Array2::zeros((h, w));
    let mut ys = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let d = d_ref.data[[y, x]];
            if !d_ref.mask[[y, x]] || !(d.as_f64() > 0.0) {
                continue;
            }
            let p = proj.project(T::of_usize(x), T::of_usize(y), d);
            if p.valid {
                xs[[y, x]] = p.x;
                ys[[y, x]] = p.y;
                valid[[y, x]] = true;
            }
        }
    }
    Correspondence { xs, ys, valid }
}

/// Transfers a source-view disparity map into the reference scale at the
/// given correspondence, dividing each bilinearly sampled value by the Z
/// component of the relative projection applied to the source pixel.
pub fn rescale_disparity<T: Scalar>(
    d_src: &DisparityMap<T>,
    reference: &CameraModel<T>,
    source: &CameraModel<T>,
    correspondence: &Correspondence<T>,
) -> Result<DisparityMap<T>> {
    let (h, w) = correspondence.dim();
    let (sh, sw) = d_src.dim();
    if d_src.dim() != (source.image_size().1, source.image_size().0) {
        return Err(Error::shape(format!(
            "source disparity {:?} does not match source camera image size {:?}",
            d_src.dim(),
            source.image_size()
        )));
    }
    let plane = RescalePlane::new(reference, source);
    let data_slice = d_src.data.as_slice().expect("standard layout");
    let mask_float: Vec<T> = d_src
        .mask
        .iter()
        .map(|&m| if m { T::one() } else { T::zero() })
        .collect();
    let mut out = Array2::zeros((h, w));
    let mut mask = Array2::from_elem((h, w), false);
    let eps = T::of(crate::geometry::MIN_Z_EPS);
    for y in 0..h {
        for x in 0..w {
            if !correspondence.valid[[y, x]] {
                continue;
            }
            let (sx, sy) = (correspondence.xs[[y, x]], correspondence.ys[[y, x]]);
            if !taps(sx, sy, sw, sh).in_bounds {
                continue;
            }
            let m = sample_plane(&mask_float, sh, sw, sx, sy);
            if m.as_f64() < 1.0 - 1e-6 {
                continue;
            }
            let divisor = plane.divisor(sx, sy);
            if divisor <= eps {
                continue;
            }
            out[[y, x]] = sample_plane(data_slice, sh, sw, sx, sy) / divisor;
            mask[[y, x]] = true;
        }
    }
    Ok(DisparityMap { data: out, mask })
}

/// Warps a source-view feature map onto every disparity plane of the
/// reference frustum. Returns `[channels, planes, height, width]` plus the
/// per-voxel validity mask `[planes, height, width]`; out-of-bounds samples
/// read zero.
pub fn plane_sweep_warp<T: Scalar>(
    feat: &FeatureMap<T>,
    planes: &DisparityHypotheses<T>,
    reference: &CameraModel<T>,
    source: &CameraModel<T>,
) -> Result<(Array4<T>, Array3<bool>)> {
    let (fh, fw) = feat.dim();
    if (source.image_size().0, source.image_size().1) != (fw, fh) {
        return Err(Error::shape(format!(
            "feature map {:?} does not match source camera image size {:?}",
            (fw, fh),
            source.image_size()
        )));
    }
    let c = feat.channels();
    let d = planes.count();
    let (ow, oh) = reference.image_size();
    let geom = SweepCoords::new(reference, source, planes);
    let fdata = feat.data.as_slice().expect("standard layout");
    let mut out = Array4::zeros((c, d, oh, ow));
    let mut mask = Array3::from_elem((d, oh, ow), false);
    let odata = out.as_slice_mut().expect("standard layout");
    for i in 0..d {
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy, valid) = geom.coords(x, y, i);
                if valid {
                    mask[[i, y, x]] = taps(sx, sy, fw, fh).in_bounds;
                }
                for ch in 0..c {
                    let v = sample_plane(&fdata[ch * fh * fw..(ch + 1) * fh * fw], fh, fw, sx, sy);
                    odata[((ch * d + i) * oh + y) * ow + x] = v;
                }
            }
        }
    }
    Ok((out, mask))
}

/// Precomputed pixel-to-source projection for the whole plane stack: the
/// homogeneous source pixel is base(u) + d_i * delta, so one 3-vector per
/// reference pixel covers every plane.
pub struct SweepCoords<T> {
    projector: PixelProjector<T>,
    bases: Vec<[T; 3]>,
    disp: Vec<T>,
    width: usize,
}

impl<T: Scalar> SweepCoords<T> {
    pub fn new(
        reference: &CameraModel<T>,
        source: &CameraModel<T>,
        planes: &DisparityHypotheses<T>,
    ) -> Self {
        let projector = PixelProjector::new(reference, source);
        let (w, h) = reference.image_size();
        let mut bases = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                bases.push(projector.base(T::of_usize(x), T::of_usize(y)));
            }
        }
        SweepCoords {
            projector,
            bases,
            disp: planes.values(),
            width: w,
        }
    }

    pub fn plane_count(&self) -> usize {
        self.disp.len()
    }

    /// Reference-grid (height, width).
    pub fn out_dims(&self) -> (usize, usize) {
        (self.bases.len() / self.width, self.width)
    }

    #[inline]
    pub fn coords(&self, x: usize, y: usize, plane: usize) -> (T, T, bool) {
        let base = self.bases[y * self.width + x];
        let p = self.projector.project_base(base, self.disp[plane]);
        (p.x, p.y, p.valid)
    }

    pub fn source_dims(&self) -> (usize, usize) {
        (self.projector.src_height, self.projector.src_width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Mat3, Mat4};
    use ndarray::Array3 as Nd3;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(f: f64, c: f64, t: [f64; 3], size: (usize, usize)) -> CameraModel<f64> {
        CameraModel::new(
            Mat3::from_rows([f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]),
            Mat4::from_rigid(&Mat3::identity(), t),
            size,
        )
        .unwrap()
    }

    fn random_feat(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Nd3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0)), 1)
    }

    #[test]
    fn identity_warp_reproduces_features_exactly() {
        // Power-of-two intrinsics make the identity case bit-exact.
        let c = cam(16.0, 8.0, [0.5, -0.25, 2.0], (16, 16));
        let feat = random_feat(7, 3, 16, 16);
        let planes = DisparityHypotheses::new(0.05, 0.05, 4).unwrap();
        let (out, mask) = plane_sweep_warp(&feat, &planes, &c, &c).unwrap();
        for i in 0..4 {
            for y in 0..16 {
                for x in 0..16 {
                    assert!(mask[[i, y, x]]);
                    for ch in 0..3 {
                        assert_eq!(out[[ch, i, y, x]], feat.data[[ch, y, x]]);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_warp_slices_independent_of_plane() {
        // With a general rotation the slices may differ from the input in the
        // last bits, but they must be identical across planes.
        let (s, co) = (0.09983341664682815, 0.9950041652780258); // sin/cos 0.1
        let r = Mat3::from_rows([co, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, co]);
        let k = Mat3::from_rows([17.0, 0.0, 7.5], [0.0, 19.0, 8.5], [0.0, 0.0, 1.0]);
        let c = CameraModel::new(k, Mat4::from_rigid(&r, [0.1, 0.2, 0.3]), (16, 16)).unwrap();
        let feat = random_feat(8, 2, 16, 16);
        let planes = DisparityHypotheses::new(0.0, 0.1, 5).unwrap();
        let (out, _) = plane_sweep_warp(&feat, &planes, &c, &c).unwrap();
        for i in 1..5 {
            for y in 0..16 {
                for x in 0..16 {
                    for ch in 0..2 {
                        assert_eq!(out[[ch, i, y, x]], out[[ch, 0, y, x]]);
                    }
                }
            }
        }
    }

    #[test]
    fn warp_matches_per_pixel_projection_oracle() {
        let refc = cam(20.0, 7.5, [0.0, 0.0, 0.0], (16, 16));
        let src = cam(20.0, 7.5, [0.3, -0.1, 0.02], (16, 16));
        let feat = random_feat(9, 2, 16, 16);
        let planes = DisparityHypotheses::new(0.1, 0.1, 3).unwrap();
        let (out, mask) = plane_sweep_warp(&feat, &planes, &refc, &src).unwrap();
        let fdata = feat.data.as_slice().unwrap();
        for i in 0..3 {
            let d = planes.disparity(i);
            for y in 0..16 {
                for x in 0..16 {
                    let p =
                        crate::geometry::project_pixel((x as f64, y as f64), d, &refc, &src)
                            .unwrap();
                    for ch in 0..2 {
                        let want = sample_plane(&fdata[ch * 256..(ch + 1) * 256], 16, 16, p.x, p.y);
                        let got = out[[ch, i, y, x]];
                        assert!((got - want).abs() < 1e-9, "plane {i} pixel ({x},{y})");
                    }
                    let want_mask = p.valid && taps(p.x, p.y, 16, 16).in_bounds;
                    assert_eq!(mask[[i, y, x]], want_mask);
                }
            }
        }
    }

    #[test]
    fn all_out_of_bounds_gives_zero_slices_and_mask() {
        let refc = cam(20.0, 7.5, [0.0, 0.0, 0.0], (16, 16));
        // Source camera displaced so far that nothing projects in bounds.
        let src = cam(20.0, 7.5, [500.0, 0.0, 0.0], (16, 16));
        let feat = random_feat(10, 1, 16, 16);
        let planes = DisparityHypotheses::new(0.1, 0.1, 2).unwrap();
        let (out, mask) = plane_sweep_warp(&feat, &planes, &refc, &src).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        assert!(mask.iter().all(|m| !*m));
    }

    #[test]
    fn rescale_identity_cameras_is_plain_sampling() {
        let c = cam(16.0, 8.0, [0.0, 0.0, 1.0], (16, 16));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d_ref = DisparityMap::dense(Array2::from_shape_fn((16, 16), |_| {
            rng.gen_range(0.2..0.8)
        }));
        let d_src = DisparityMap::dense(Array2::from_shape_fn((16, 16), |_| {
            rng.gen_range(0.2..0.8)
        }));
        let corr = project_map(&d_ref, &c, &c);
        let out = rescale_disparity(&d_src, &c, &c, &corr).unwrap();
        // Identity correspondence, unit divisor: output equals d_src exactly.
        for y in 0..16 {
            for x in 0..16 {
                assert!(out.mask[[y, x]]);
                assert_eq!(out.data[[y, x]], d_src.data[[y, x]]);
            }
        }
    }

    #[test]
    fn rescale_pure_rotation_matches_closed_form() {
        // Constant-depth plane scene under a pure rotation: the transfer is
        // exact, so the rescaled disparity must match the analytic value
        // 1 / z_ref(point) per pixel.
        let (s, co) = (0.07991469396917269, 0.996801706302619); // sin/cos 0.08
        let r = Mat3::from_rows([co, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, co]);
        let k = Mat3::from_rows([20.0, 0.0, 7.5], [0.0, 20.0, 7.5], [0.0, 0.0, 1.0]);
        let refc = cam(20.0, 7.5, [0.0, 0.0, 0.0], (16, 16));
        let src = CameraModel::new(k, Mat4::from_rigid(&r, [0.0, 0.0, 0.0]), (16, 16)).unwrap();
        let z_plane = 2.5_f64;

        // Ground-truth source disparity of the fronto-parallel plane z = z_plane
        // (in the reference frame), evaluated per source pixel.
        let src_to_world = src.world_to_cam().inverse_rigid();
        let d_src = DisparityMap::dense(Array2::from_shape_fn((16, 16), |(y, x)| {
            let ray = src
                .intrinsics()
                .inverse_intrinsics()
                .mul_vec([x as f64, y as f64, 1.0]);
            let dir = src_to_world.rotation().mul_vec(ray);
            // Reference frame is the world frame here; stretch the ray to z = z_plane.
            let t = z_plane / dir[2];
            1.0 / (ray[2] * t)
        }));
        let d_ref = DisparityMap::dense(Array2::from_elem((16, 16), 1.0 / z_plane));
        let corr = project_map(&d_ref, &refc, &src);
        let out = rescale_disparity(&d_src, &refc, &src, &corr).unwrap();
        for y in 2..14 {
            for x in 2..14 {
                if out.mask[[y, x]] {
                    assert!(
                        (out.data[[y, x]] - 1.0 / z_plane).abs() < 1e-3,
                        "pixel ({x},{y}): {} vs {}",
                        out.data[[y, x]],
                        1.0 / z_plane
                    );
                }
            }
        }
        assert!(out.valid_count() > 100);
    }

    #[test]
    fn rescale_zero_disparity_stays_zero() {
        let c = cam(16.0, 8.0, [0.0, 0.0, 0.0], (16, 16));
        let d_ref = DisparityMap::dense(Array2::from_elem((16, 16), 0.5));
        let d_src = DisparityMap::dense(Array2::zeros((16, 16)));
        let corr = project_map(&d_ref, &c, &c);
        let out = rescale_disparity(&d_src, &c, &c, &corr).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
    }
}

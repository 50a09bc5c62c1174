//! Construction of the 4-D volumes and 2-D error maps fed to the networks:
//! the concatenation matching cost volume, geometric cost volumes built from
//! cross-view disparity transfer, photometric and geometric reconstruction
//! errors, and the visual hull.

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DisparityHypotheses, PixelProjector, RescalePlane};
use crate::maps::{DisparityMap, FeatureMap};
use crate::sampling::{sample_feat_grid, sample_plane, taps};
use crate::scalar::Scalar;
use crate::sweep::{project_map, rescale_disparity, Correspondence};

/// 4-D cost volume `[channels, planes, height, width]` with labelled channel
/// groups. All entries are finite; invalid geometry carries a sentinel cost,
/// never NaN.
#[derive(Debug, Clone)]
pub struct CostVolume<T> {
    pub data: Array4<T>,
    pub planes: DisparityHypotheses<T>,
    pub channel_roles: Vec<(String, usize)>,
}

impl<T: Scalar> CostVolume<T> {
    pub fn new(
        data: Array4<T>,
        planes: DisparityHypotheses<T>,
        channel_roles: Vec<(String, usize)>,
    ) -> Result<Self> {
        let (c, d, _, _) = data.dim();
        if d != planes.count() {
            return Err(Error::shape(format!(
                "volume has {d} planes, hypothesis set has {}",
                planes.count()
            )));
        }
        let labelled: usize = channel_roles.iter().map(|(_, n)| n).sum();
        if labelled != c {
            return Err(Error::shape(format!(
                "channel roles cover {labelled} channels, volume has {c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cost volume contains non-finite values"));
        }
        Ok(CostVolume {
            data,
            planes,
            channel_roles,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// (planes, height, width).
    pub fn grid(&self) -> (usize, usize, usize) {
        let (_, d, h, w) = self.data.dim();
        (d, h, w)
    }
}

/// Non-negative per-pixel reconstruction error `[channels, height, width]`
/// plus the validity of the projection that produced each pixel.
#[derive(Debug, Clone)]
pub struct ErrorMap<T> {
    pub data: Array3<T>,
    pub valid: Array2<bool>,
}

impl<T: Scalar> ErrorMap<T> {
    /// (height, width).
    pub fn dim(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Normalized per-voxel visibility count `[planes, height, width]`; every
/// entry is an integer multiple of 1 / num_views.
#[derive(Debug, Clone)]
pub struct VisualHullVolume<T> {
    pub data: Array3<T>,
    pub num_views: usize,
}

/// Concatenates the reference feature map (tiled along the plane axis) with
/// the plane-sweep warped source volume, giving 2F channels.
pub fn concat_cost_volume<T: Scalar>(
    f_ref: &FeatureMap<T>,
    f_src_warped: &Array4<T>,
    planes: &DisparityHypotheses<T>,
) -> Result<CostVolume<T>> {
    let (fc, fh, fw) = f_ref.data.dim();
    let (wc, wd, wh, ww) = f_src_warped.dim();
    if fc != wc || fh != wh || fw != ww {
        return Err(Error::shape(format!(
            "reference features {:?} vs warped volume {:?}",
            (fc, fh, fw),
            (wc, wd, wh, ww)
        )));
    }
    if wd != planes.count() {
        return Err(Error::shape("warped volume plane count mismatch"));
    }
    let mut data = Array4::zeros((2 * fc, wd, fh, fw));
    for ch in 0..fc {
        for i in 0..wd {
            for y in 0..fh {
                for x in 0..fw {
                    data[[ch, i, y, x]] = f_ref.data[[ch, y, x]];
                    data[[fc + ch, i, y, x]] = f_src_warped[[ch, i, y, x]];
                }
            }
        }
    }
    CostVolume::new(
        data,
        planes.clone(),
        vec![("reference".into(), fc), ("source_warped".into(), fc)],
    )
}

/// Geometric cost of the reference view: distance between the estimated
/// disparity and each plane hypothesis. Invalid pixels carry the sentinel.
pub fn geometric_cost_ref<T: Scalar>(
    d_ref: &DisparityMap<T>,
    planes: &DisparityHypotheses<T>,
) -> CostVolume<T> {
    let (h, w) = d_ref.dim();
    let d = planes.count();
    let sentinel = planes.range();
    let mut data = Array4::zeros((1, d, h, w));
    for i in 0..d {
        let di = planes.disparity(i);
        for y in 0..h {
            for x in 0..w {
                data[[0, i, y, x]] = if d_ref.mask[[y, x]] {
                    (d_ref.data[[y, x]] - di).abs()
                } else {
                    sentinel
                };
            }
        }
    }
    CostVolume::new(data, planes.clone(), vec![("geometric_ref".into(), 1)])
        .expect("construction is finite by design")
}

/// Geometric cost of the source view: the source disparity transferred into
/// reference scale at the correspondence of `d_ref`, compared against each
/// plane. Pixels whose projection is invalid get the sentinel at all planes.
pub fn geometric_cost_source<T: Scalar>(
    d_ref: &DisparityMap<T>,
    d_src: &DisparityMap<T>,
    planes: &DisparityHypotheses<T>,
    reference: &CameraModel<T>,
    source: &CameraModel<T>,
) -> Result<CostVolume<T>> {
    let corr = project_map(d_ref, reference, source);
    let transferred = rescale_disparity(d_src, reference, source, &corr)?;
    let (h, w) = d_ref.dim();
    let d = planes.count();
    let sentinel = planes.range();
    let mut data = Array4::zeros((1, d, h, w));
    for i in 0..d {
        let di = planes.disparity(i);
        for y in 0..h {
            for x in 0..w {
                data[[0, i, y, x]] = if transferred.mask[[y, x]] {
                    (transferred.data[[y, x]] - di).abs()
                } else {
                    sentinel
                };
            }
        }
    }
    CostVolume::new(data, planes.clone(), vec![("geometric_src".into(), 1)])
}

/// Photometric reconstruction error: per-channel absolute difference between
/// the reference low-level features and the source features sampled at the
/// correspondence. Invalid pixels read zero and are flagged.
pub fn photometric_error<T: Scalar>(
    f_ref_low: &FeatureMap<T>,
    f_src_low: &FeatureMap<T>,
    d_ref: &DisparityMap<T>,
    reference: &CameraModel<T>,
    source: &CameraModel<T>,
) -> Result<ErrorMap<T>> {
    if f_ref_low.dim() != d_ref.dim() {
        return Err(Error::shape(
            "low-level features must be at the disparity map resolution",
        ));
    }
    let corr = project_map(d_ref, reference, source);
    let (sampled, in_bounds) = sample_feat_grid(f_src_low.data.view(), &corr.xs, &corr.ys);
    let (c, h, w) = f_ref_low.data.dim();
    let mut data = Array3::zeros((c, h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let ok = corr.valid[[y, x]];
            valid[[y, x]] = ok && in_bounds[[y, x]];
            if ok {
                for ch in 0..c {
                    data[[ch, y, x]] =
                        (sampled[[ch, y, x]] - f_ref_low.data[[ch, y, x]]).abs();
                }
            }
        }
    }
    Ok(ErrorMap { data, valid })
}

/// Geometric reconstruction error: absolute difference between the reference
/// disparity and the source disparity transferred into reference scale.
/// Invalid projections read zero and are flagged.
pub fn geometric_error<T: Scalar>(
    d_ref: &DisparityMap<T>,
    d_src: &DisparityMap<T>,
    reference: &CameraModel<T>,
    source: &CameraModel<T>,
) -> Result<ErrorMap<T>> {
    let corr = project_map(d_ref, reference, source);
    geometric_error_at(d_ref, d_src, reference, source, &corr)
}

/// Same as [`geometric_error`] with a precomputed correspondence.
pub fn geometric_error_at<T: Scalar>(
    d_ref: &DisparityMap<T>,
    d_src: &DisparityMap<T>,
    reference: &CameraModel<T>,
    source: &CameraModel<T>,
    corr: &Correspondence<T>,
) -> Result<ErrorMap<T>> {
    let transferred = rescale_disparity(d_src, reference, source, corr)?;
    let (h, w) = d_ref.dim();
    let mut data = Array3::zeros((1, h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if transferred.mask[[y, x]] && d_ref.mask[[y, x]] {
                data[[0, y, x]] = (transferred.data[[y, x]] - d_ref.data[[y, x]]).abs();
                valid[[y, x]] = true;
            }
        }
    }
    Ok(ErrorMap { data, valid })
}

/// Repeats an error map along the plane axis so it can join a 3-D volume
/// concatenation.
pub fn tile_along_depth<T: Scalar>(
    e: &ErrorMap<T>,
    planes: &DisparityHypotheses<T>,
) -> CostVolume<T> {
    let (c, h, w) = e.data.dim();
    let d = planes.count();
    let mut data = Array4::zeros((c, d, h, w));
    for ch in 0..c {
        for i in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data[[ch, i, y, x]] = e.data[[ch, y, x]];
                }
            }
        }
    }
    CostVolume::new(data, planes.clone(), vec![("tiled_error".into(), c)])
        .expect("tiled error volume is finite")
}

/// Visual hull over the reference frustum: each voxel (u, d_i) is projected
/// into every view, the plane disparity is rescaled into that view's frame,
/// and the unit step of (sampled view disparity - rescaled plane disparity)
/// is averaged over views. The step is closed at zero. Voxels that fall
/// outside a view or behind its camera count as occluded for that view.
pub fn visual_hull<T: Scalar>(
    views: &[(DisparityMap<T>, CameraModel<T>)],
    planes: &DisparityHypotheses<T>,
    reference: &CameraModel<T>,
) -> Result<VisualHullVolume<T>> {
    if views.is_empty() {
        return Err(Error::invalid("visual hull needs at least one view"));
    }
    let n = views.len();
    let (w, h) = reference.image_size();
    let d = planes.count();
    let mut counts = Array3::<u32>::zeros((d, h, w));
    for (map, cam) in views {
        let (mh, mw) = map.dim();
        if (mw, mh) != cam.image_size() {
            return Err(Error::shape(
                "view disparity map does not match its camera size",
            ));
        }
        let proj = PixelProjector::new(reference, cam);
        let rescale = RescalePlane::new(cam, reference);
        let map_slice = map.data.as_slice().expect("standard layout");
        let mask_float: Vec<T> = map
            .mask
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let base = proj.base(T::of_usize(x), T::of_usize(y));
                // Disparity-to-view-n conversion divides by the Z row of
                // P_n P_ref^-1 at the reference pixel.
                let divisor = rescale.divisor(T::of_usize(x), T::of_usize(y));
                if divisor.as_f64() <= crate::geometry::MIN_Z_EPS {
                    continue;
                }
                for i in 0..d {
                    let di = planes.disparity(i);
                    let p = proj.project_base(base, di);
                    if !p.valid || !taps(p.x, p.y, mw, mh).in_bounds {
                        continue;
                    }
                    let m = sample_plane(&mask_float, mh, mw, p.x, p.y);
                    if m.as_f64() < 1.0 - 1e-6 {
                        continue;
                    }
                    let sampled = sample_plane(map_slice, mh, mw, p.x, p.y);
                    if sampled >= di / divisor {
                        counts[[i, y, x]] += 1;
                    }
                }
            }
        }
    }
    let nt = T::of_usize(n);
    let data = counts.map(|&c| T::of_usize(c as usize) / nt);
    Ok(VisualHullVolume { data, num_views: n })
}

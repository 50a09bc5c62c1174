//! Cross-view consistency filtering of disparity maps and fusion of the
//! survivors into a colored point cloud, written as ASCII PLY.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::maps::DisparityMap;
use crate::sampling::{sample_plane, taps};
use crate::scalar::Scalar;
use crate::sweep::{project_map, rescale_disparity};

/// Colored 3-D points in scene units.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<([f64; 3], [u8; 3])>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Pairwise agreement: the geometric transfer error of view r against view n
/// at a pixel, None when the projection or transfer is invalid.
fn transfer_error<T: Scalar>(
    d_r: &DisparityMap<T>,
    d_n: &DisparityMap<T>,
    cam_r: &CameraModel<T>,
    cam_n: &CameraModel<T>,
) -> Result<(Array2<T>, Array2<bool>)> {
    let corr = project_map(d_r, cam_r, cam_n);
    let transferred = rescale_disparity(d_n, cam_r, cam_n, &corr)?;
    let (h, w) = d_r.dim();
    let mut err = Array2::zeros((h, w));
    let mut ok = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if transferred.mask[[y, x]] && d_r.mask[[y, x]] {
                err[[y, x]] = (transferred.data[[y, x]] - d_r.data[[y, x]]).abs();
                ok[[y, x]] = true;
            }
        }
    }
    Ok((err, ok))
}

/// Keeps a pixel of each view only when at least `min_consistent_views`
/// other views agree within `disp_tolerance` (geometric transfer error in
/// disparity units). Returns the maps with updated validity masks.
pub fn consistency_filter<T: Scalar>(
    views: &[(DisparityMap<T>, CameraModel<T>)],
    min_consistent_views: usize,
    disp_tolerance: T,
) -> Result<Vec<DisparityMap<T>>> {
    if views.len() < 2 {
        return Err(Error::invalid("consistency filtering needs at least two views"));
    }
    let mut out = Vec::with_capacity(views.len());
    for (r, (d_r, cam_r)) in views.iter().enumerate() {
        let (h, w) = d_r.dim();
        let mut agree = Array2::<u32>::zeros((h, w));
        for (n, (d_n, cam_n)) in views.iter().enumerate() {
            if n == r {
                continue;
            }
            let (err, ok) = transfer_error(d_r, d_n, cam_r, cam_n)?;
            for y in 0..h {
                for x in 0..w {
                    if ok[[y, x]] && err[[y, x]] < disp_tolerance {
                        agree[[y, x]] += 1;
                    }
                }
            }
        }
        let mask = Array2::from_shape_fn((h, w), |idx| {
            d_r.mask[idx] && agree[idx] as usize >= min_consistent_views
        });
        out.push(DisparityMap {
            data: d_r.data.clone(),
            mask,
        });
    }
    Ok(out)
}

/// Back-projects every surviving pixel, averaging its position with the
/// agreeing views' surface points, and colors it from its own image. The
/// per-point average runs over views in a pairwise-determined set, so the
/// cloud is permutation invariant up to float reassociation.
pub fn fuse_point_cloud<T: Scalar>(
    filtered: &[DisparityMap<T>],
    views: &[(DisparityMap<T>, CameraModel<T>)],
    images: &[Array3<u8>],
    disp_tolerance: T,
) -> Result<PointCloud> {
    if filtered.len() != views.len() || images.len() != views.len() {
        return Err(Error::shape(
            "filtered maps, views and images must align one to one",
        ));
    }
    let mut cloud = PointCloud::default();
    for (r, ((surv, (d_r, cam_r)), image)) in
        filtered.iter().zip(views).zip(images).enumerate()
    {
        let cam_r64 = cam_r.to_f64();
        let (h, w) = surv.dim();
        // Transfer data against every other view, reused per pixel.
        let mut transfers = Vec::new();
        for (n, (d_n, cam_n)) in views.iter().enumerate() {
            if n == r {
                transfers.push(None);
                continue;
            }
            let corr = project_map(d_r, cam_r, cam_n);
            let transferred = rescale_disparity(d_n, cam_r, cam_n, &corr)?;
            transfers.push(Some((corr, transferred, d_n, cam_n)));
        }
        for y in 0..h {
            for x in 0..w {
                if !surv.mask[[y, x]] {
                    continue;
                }
                let d = surv.data[[y, x]].as_f64();
                if !(d > 0.0) {
                    continue;
                }
                let own = cam_r64.unproject(x as f64, y as f64, 1.0 / d);
                let mut acc = own;
                let mut count = 1.0;
                for entry in transfers.iter().flatten() {
                    let (corr, transferred, d_n, cam_n) = entry;
                    if !transferred.mask[[y, x]] {
                        continue;
                    }
                    let err = (transferred.data[[y, x]] - surv.data[[y, x]]).abs();
                    if err >= disp_tolerance {
                        continue;
                    }
                    // The agreeing view's own surface point along its ray.
                    let (sx, sy) = (corr.xs[[y, x]], corr.ys[[y, x]]);
                    let (nh, nw) = d_n.dim();
                    if !taps(sx, sy, nw, nh).in_bounds {
                        continue;
                    }
                    let dn = sample_plane(
                        d_n.data.as_slice().expect("standard layout"),
                        nh,
                        nw,
                        sx,
                        sy,
                    )
                    .as_f64();
                    if !(dn > 0.0) {
                        continue;
                    }
                    let p = cam_n
                        .to_f64()
                        .unproject(sx.as_f64(), sy.as_f64(), 1.0 / dn);
                    acc = [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]];
                    count += 1.0;
                }
                let point = [acc[0] / count, acc[1] / count, acc[2] / count];
                if !point.iter().all(|v| v.is_finite()) {
                    continue;
                }
                let color = [image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]];
                cloud.points.push((point, color));
            }
        }
    }
    Ok(cloud)
}

/// ASCII PLY 1.0 with float xyz and uchar rgb properties. An empty cloud
/// writes a valid zero-vertex file.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = String::new();
    buf.push_str("ply\nformat ascii 1.0\n");
    buf.push_str(&format!("element vertex {}\n", cloud.points.len()));
    buf.push_str("property float x\nproperty float y\nproperty float z\n");
    buf.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    buf.push_str("end_header\n");
    for (p, c) in &cloud.points {
        buf.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]
        ));
    }
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MVSample;
    use crate::synth::{generate_scene, SceneSampler};

    fn gt_views(sample: &MVSample<f64>) -> Vec<(DisparityMap<f64>, CameraModel<f64>)> {
        sample
            .gt_disparity
            .iter()
            .cloned()
            .zip(sample.cameras.iter().cloned())
            .collect()
    }

    #[test]
    fn zero_min_views_is_identity_mask() {
        let sample = generate_scene(&SceneSampler::desk(2).sample(3).unwrap())
            .unwrap()
            .cast::<f64>();
        let views = gt_views(&sample);
        let filtered = consistency_filter(&views, 0, 1e-3).unwrap();
        for (f, (orig, _)) in filtered.iter().zip(&views) {
            assert_eq!(f.mask, orig.mask);
        }
    }

    #[test]
    fn fewer_than_two_views_rejected() {
        let sample = generate_scene(&SceneSampler::desk(1).sample(4).unwrap())
            .unwrap()
            .cast::<f64>();
        let views = vec![gt_views(&sample)[0].clone()];
        assert!(consistency_filter(&views, 1, 1e-3).is_err());
    }

    #[test]
    fn clean_ground_truth_mostly_survives() {
        let raw = generate_scene(&SceneSampler::desk(2).sample(5).unwrap()).unwrap();
        let sample = raw.cast::<f64>();
        let views = gt_views(&sample);
        let filtered = consistency_filter(&views, 1, 1e-3).unwrap();
        // Count only pixels visible in at least one other view.
        let vis01 = crate::synth::visibility_mask(&raw, 0, 1, 5e-3);
        let vis02 = crate::synth::visibility_mask(&raw, 0, 2, 5e-3);
        let edges = crate::synth::discontinuity_mask(&raw.gt_disparity[0], 0.02);
        let mut visible = 0;
        let mut surviving = 0;
        for ((y, x), m) in filtered[0].mask.indexed_iter() {
            if (vis01[[y, x]] || vis02[[y, x]]) && !edges[[y, x]] {
                visible += 1;
                if *m {
                    surviving += 1;
                }
            }
        }
        assert!(visible > 1000);
        let ratio = surviving as f64 / visible as f64;
        assert!(ratio >= 0.95, "survival ratio {ratio}");
    }

    #[test]
    fn corrupted_view_pixels_get_removed() {
        let sample = generate_scene(&SceneSampler::desk(2).sample(6).unwrap())
            .unwrap()
            .cast::<f64>();
        let mut views = gt_views(&sample);
        // Ruin half of view 1 with large noise.
        let (h, w) = views[1].0.dim();
        for y in 0..h / 2 {
            for x in 0..w {
                views[1].0.data[[y, x]] = 0.83;
            }
        }
        let filtered = consistency_filter(&views, 1, 1e-3).unwrap();
        let ruined_survivors = (0..h / 2)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| filtered[1].mask[[y, x]])
            .count();
        // Corrupted pixels no longer agree with anyone.
        assert!(
            ruined_survivors < (h / 2 * w) / 10,
            "{ruined_survivors} corrupted pixels survived"
        );
    }

    #[test]
    fn fused_cloud_size_bounded_by_pixel_count() {
        let sample = generate_scene(&SceneSampler::desk(1).sample(7).unwrap())
            .unwrap()
            .cast::<f64>();
        let views = gt_views(&sample);
        let filtered = consistency_filter(&views, 1, 1e-3).unwrap();
        let cloud = fuse_point_cloud(&filtered, &views, &sample.images, 1e-3).unwrap();
        let total_pixels: usize = views.iter().map(|(d, _)| d.data.len()).sum();
        assert!(cloud.len() <= total_pixels);
        assert!(cloud.len() > 100);
        for (p, _) in &cloud.points {
            assert!(p.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn single_plane_cloud_lies_on_the_plane() {
        use crate::geometry::DisparityHypotheses;
        use crate::synth::{axis_camera, Primitive, SceneSpec, Texture};
        let planes = DisparityHypotheses::new(0.05, 0.05, 16).unwrap();
        let z = 4.0;
        let spec = SceneSpec {
            seed: 0,
            primitives: vec![(
                Primitive::Plane {
                    point: [0.0, 0.0, z],
                    normal: [0.0, 0.0, -1.0],
                    bounds: None,
                },
                Texture::Checker {
                    scale: 2.0,
                    color_a: [0.8, 0.3, 0.2],
                    color_b: [0.2, 0.3, 0.8],
                },
            )],
            cameras: vec![
                axis_camera([0.0, 0.0, 0.0], 80.0, (32, 32)).unwrap(),
                axis_camera([0.25, 0.0, 0.0], 80.0, (32, 32)).unwrap(),
            ],
            image_size: (32, 32),
            disparity_range: planes,
        };
        let sample = generate_scene(&spec).unwrap().cast::<f64>();
        let views = gt_views(&sample);
        let filtered = consistency_filter(&views, 1, 1e-3).unwrap();
        let cloud = fuse_point_cloud(&filtered, &views, &sample.images, 1e-3).unwrap();
        assert!(!cloud.is_empty());
        for (p, _) in &cloud.points {
            assert!((p[2] - z).abs() < 0.01, "z = {}", p[2]);
        }
    }

    #[test]
    fn ply_output_is_wellformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let cloud = PointCloud {
            points: vec![([1.0, 2.0, 3.0], [10, 20, 30])],
        };
        write_ply(&cloud, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 1\n"));
        assert!(text.contains("property uchar blue"));
        assert!(text.trim_end().ends_with("1 2 3 10 20 30"));

        let empty = PointCloud::default();
        write_ply(&empty, &dir.path().join("empty.ply")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("empty.ply")).unwrap();
        assert!(text.contains("element vertex 0"));
    }
}

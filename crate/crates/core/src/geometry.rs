//! Camera models, disparity plane hypotheses and projection between views.
//!
//! Disparity throughout this crate is the reciprocal of Z-depth in the
//! owning camera's frame; larger disparity means a closer surface.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Mat4, Vec3};
use crate::scalar::Scalar;

/// Minimum camera-frame Z (scene units) below which a projection is invalid.
pub const MIN_Z_EPS: f64 = 1e-8;

/// Pinhole camera: intrinsics plus a world-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel<T> {
    intrinsics: Mat3<T>,
    world_to_cam: Mat4<T>,
    image_size: (usize, usize),
}

impl<T: Scalar> CameraModel<T> {
    /// Validates the intrinsics (upper-triangular, positive focals) and the
    /// pose (orthonormal rotation with determinant +1, checked to 1e-6).
    pub fn new(
        intrinsics: Mat3<T>,
        world_to_cam: Mat4<T>,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let k = &intrinsics.0;
        if k[1][0].as_f64() != 0.0
            || k[2][0].as_f64() != 0.0
            || k[2][1].as_f64() != 0.0
            || (k[2][2].as_f64() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidCamera(
                "intrinsics must be upper-triangular with unit bottom-right entry".into(),
            ));
        }
        if k[0][0].as_f64() <= 0.0 || k[1][1].as_f64() <= 0.0 {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        let r = world_to_cam.rotation();
        let rrt = r.mul_mat(&r.transpose());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rrt.0[i][j].as_f64() - want).abs() > 1e-6 {
                    return Err(Error::InvalidCamera(format!(
                        "rotation is not orthonormal (RR^T deviates at ({i},{j}))"
                    )));
                }
            }
        }
        if (r.det().as_f64() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera("rotation determinant is not +1".into()));
        }
        let last = world_to_cam.0[3];
        if last[0].as_f64() != 0.0
            || last[1].as_f64() != 0.0
            || last[2].as_f64() != 0.0
            || (last[3].as_f64() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidCamera(
                "world-to-camera bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::InvalidCamera("image size must be nonzero".into()));
        }
        Ok(CameraModel {
            intrinsics,
            world_to_cam,
            image_size,
        })
    }

    pub fn intrinsics(&self) -> &Mat3<T> {
        &self.intrinsics
    }

    pub fn world_to_cam(&self) -> &Mat4<T> {
        &self.world_to_cam
    }

    /// (width, height) in pixels.
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    /// Camera adapted to a feature map downsampled by `scale`: focal lengths
    /// and principal point divided by the factor, image size rounded up.
    pub fn rescaled(&self, scale: usize) -> CameraModel<T> {
        let s = T::of_usize(scale);
        let mut k = self.intrinsics.0;
        for j in 0..3 {
            k[0][j] /= s;
            k[1][j] /= s;
        }
        CameraModel {
            intrinsics: Mat3(k),
            world_to_cam: self.world_to_cam,
            image_size: (
                self.image_size.0.div_ceil(scale),
                self.image_size.1.div_ceil(scale),
            ),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        let inv = self.world_to_cam.inverse_rigid();
        inv.translation()
    }

    /// Full-rank 4x4 projection matrix [[K, 0], [0, 1]] * world_to_cam.
    pub fn projection4(&self) -> Mat4<T> {
        Mat4::from_mat3(&self.intrinsics).mul_mat(&self.world_to_cam)
    }

    /// Inverse of the 4x4 projection matrix, built analytically.
    pub fn projection4_inv(&self) -> Mat4<T> {
        self.world_to_cam
            .inverse_rigid()
            .mul_mat(&Mat4::from_mat3(&self.intrinsics.inverse_intrinsics()))
    }

    /// Back-project pixel (x, y) at depth z into world coordinates.
    pub fn unproject(&self, x: T, y: T, z: T) -> Vec3<T> {
        let ray = self.intrinsics.inverse_intrinsics().mul_vec([x, y, T::one()]);
        let cam = [ray[0] * z, ray[1] * z, ray[2] * z];
        let c2w = self.world_to_cam.inverse_rigid();
        let h = c2w.mul_vec([cam[0], cam[1], cam[2], T::one()]);
        [h[0], h[1], h[2]]
    }

    /// Project a world point; returns pixel coordinates and camera depth.
    /// Invalid when the point sits at or behind the camera plane.
    pub fn project(&self, p: Vec3<T>) -> Option<(T, T, T)> {
        let h = self.world_to_cam.mul_vec([p[0], p[1], p[2], T::one()]);
        let z = h[2];
        if z.as_f64() <= MIN_Z_EPS {
            return None;
        }
        let uvw = self.intrinsics.mul_vec([h[0], h[1], h[2]]);
        Some((uvw[0] / uvw[2], uvw[1] / uvw[2], z))
    }

    pub fn cast<U: Scalar>(&self) -> CameraModel<U> {
        let recast3 = |m: &Mat3<T>| {
            let mut out = [[U::zero(); 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = U::of(m.0[i][j].as_f64());
                }
            }
            Mat3(out)
        };
        let mut w2c = [[U::zero(); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                w2c[i][j] = U::of(self.world_to_cam.0[i][j].as_f64());
            }
        }
        CameraModel {
            intrinsics: recast3(&self.intrinsics),
            world_to_cam: Mat4(w2c),
            image_size: self.image_size,
        }
    }

    pub fn to_f64(&self) -> CameraModel<f64> {
        self.cast::<f64>()
    }

    pub fn to_f32(&self) -> CameraModel<f32> {
        self.cast::<f32>()
    }
}

/// The ordered fronto-parallel plane hypotheses; plane i carries disparity
/// d_min + i * delta for i in 1..=count.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityHypotheses<T> {
    d_min: T,
    delta: T,
    count: usize,
}

impl<T: Scalar> DisparityHypotheses<T> {
    pub fn new(d_min: T, delta: T, count: usize) -> Result<Self> {
        if !(delta.as_f64() > 0.0) {
            return Err(Error::invalid("plane interval delta must be positive"));
        }
        if count == 0 {
            return Err(Error::invalid("plane count must be at least 1"));
        }
        if !(d_min.as_f64() >= 0.0) {
            return Err(Error::invalid("minimum disparity must be non-negative"));
        }
        Ok(DisparityHypotheses {
            d_min,
            delta,
            count,
        })
    }

    pub fn d_min(&self) -> T {
        self.d_min
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Disparity of plane `i` (zero-based index into the ordered list).
    pub fn disparity(&self, i: usize) -> T {
        debug_assert!(i < self.count);
        self.d_min + T::of_usize(i + 1) * self.delta
    }

    pub fn values(&self) -> Vec<T> {
        (0..self.count).map(|i| self.disparity(i)).collect()
    }

    /// Smallest hypothesis disparity, d_min + delta.
    pub fn first(&self) -> T {
        self.disparity(0)
    }

    /// Largest hypothesis disparity, d_min + count * delta.
    pub fn last(&self) -> T {
        self.disparity(self.count - 1)
    }

    /// Full hypothesis range count * delta, used as the sentinel cost for
    /// invalid projections in geometric cost volumes.
    pub fn range(&self) -> T {
        T::of_usize(self.count) * self.delta
    }

    pub fn mean(&self) -> T {
        let mut s = T::zero();
        for i in 0..self.count {
            s = s + self.disparity(i);
        }
        s / T::of_usize(self.count)
    }

    pub fn cast<U: Scalar>(&self) -> DisparityHypotheses<U> {
        DisparityHypotheses {
            d_min: U::of(self.d_min.as_f64()),
            delta: U::of(self.delta.as_f64()),
            count: self.count,
        }
    }
}

/// Build the ordered plane list of the hypothesis set.
pub fn disparity_planes<T: Scalar>(d_min: T, delta: T, count: usize) -> Result<Vec<T>> {
    Ok(DisparityHypotheses::new(d_min, delta, count)?.values())
}

/// Result of projecting one reference pixel into a source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected<T> {
    pub x: T,
    pub y: T,
    /// False when the point lies at or behind the source camera plane.
    pub valid: bool,
}

/// Precomputed projective map from reference pixels at a given disparity to
/// source pixel coordinates.
///
/// For a reference pixel u with ray r(u) = K_ref^-1 (u, 1), the source
/// homogeneous pixel of the point at disparity d is
///   h(u, d) = K_src (R_rel r(u) + d * t_rel),
/// which drops the 1/d depth factor (projectively irrelevant) so identical
/// cameras map pixels to themselves bit-exactly.
#[derive(Debug, Clone)]
pub struct PixelProjector<T> {
    /// K_src * R_rel * K_ref^-1, applied to (x, y, 1).
    m: Mat3<T>,
    /// K_src * t_rel, scaled by the disparity.
    delta: Vec3<T>,
    pub src_width: usize,
    pub src_height: usize,
}

impl<T: Scalar> PixelProjector<T> {
    pub fn new(reference: &CameraModel<T>, source: &CameraModel<T>) -> Self {
        let r_ref = reference.world_to_cam().rotation();
        let t_ref = reference.world_to_cam().translation();
        let r_src = source.world_to_cam().rotation();
        let t_src = source.world_to_cam().translation();
        // Relative transform taking reference-camera coords to source-camera coords.
        let r_rel = r_src.mul_mat(&r_ref.transpose());
        let rt = r_rel.mul_vec(t_ref);
        let t_rel = [t_src[0] - rt[0], t_src[1] - rt[1], t_src[2] - rt[2]];
        let m = source
            .intrinsics()
            .mul_mat(&r_rel)
            .mul_mat(&reference.intrinsics().inverse_intrinsics());
        let delta = source.intrinsics().mul_vec(t_rel);
        PixelProjector {
            m,
            delta,
            src_width: source.image_size().0,
            src_height: source.image_size().1,
        }
    }

    /// Homogeneous base vector for reference pixel (x, y); add d * delta to
    /// get the homogeneous source pixel at disparity d.
    pub fn base(&self, x: T, y: T) -> Vec3<T> {
        self.m.mul_vec([x, y, T::one()])
    }

    pub fn delta(&self) -> Vec3<T> {
        self.delta
    }

    /// Project from a precomputed base; `d` must be positive.
    pub fn project_base(&self, base: Vec3<T>, d: T) -> Projected<T> {
        let h = [
            base[0] + d * self.delta[0],
            base[1] + d * self.delta[1],
            base[2] + d * self.delta[2],
        ];
        // Camera-frame depth is h2 / d; require it above the epsilon.
        let valid = h[2].as_f64() > MIN_Z_EPS * d.as_f64();
        if !valid {
            return Projected {
                x: T::zero(),
                y: T::zero(),
                valid: false,
            };
        }
        Projected {
            x: h[0] / h[2],
            y: h[1] / h[2],
            valid: true,
        }
    }

    pub fn project(&self, x: T, y: T, d: T) -> Projected<T> {
        self.project_base(self.base(x, y), d)
    }

    /// Derivative of the projected coordinates with respect to the disparity.
    pub fn coord_grad(&self, base: Vec3<T>, d: T) -> (T, T) {
        let h = [
            base[0] + d * self.delta[0],
            base[1] + d * self.delta[1],
            base[2] + d * self.delta[2],
        ];
        let h2 = h[2];
        if h2.as_f64() <= MIN_Z_EPS * d.as_f64() {
            return (T::zero(), T::zero());
        }
        let inv = T::one() / (h2 * h2);
        (
            (self.delta[0] * h2 - h[0] * self.delta[2]) * inv,
            (self.delta[1] * h2 - h[1] * self.delta[2]) * inv,
        )
    }
}

/// Projects a reference pixel at a given disparity onto the source view.
pub fn project_pixel<T: Scalar>(
    u: (T, T),
    d: T,
    reference: &CameraModel<T>,
    source: &CameraModel<T>,
) -> Result<Projected<T>> {
    if !(d.as_f64() > 0.0) {
        return Err(Error::invalid("disparity must be positive"));
    }
    Ok(PixelProjector::new(reference, source).project(u.0, u.1, d))
}

/// Per-view disparity rescale factor of Eq.-style cross-view comparison.
///
/// The divisor is the Z row of P_ref * P_src^-1 applied to the homogeneous
/// source pixel (x, y, 1, 1); it is affine in the pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct RescalePlane<T> {
    cx: T,
    cy: T,
    c0: T,
}

impl<T: Scalar> RescalePlane<T> {
    /// Factor converting `source`-view disparities into `reference` scale.
    pub fn new(reference: &CameraModel<T>, source: &CameraModel<T>) -> Self {
        let m = reference.projection4().mul_mat(&source.projection4_inv());
        let row = m.0[2];
        RescalePlane {
            cx: row[0],
            cy: row[1],
            c0: row[2] + row[3],
        }
    }

    /// Divisor at source pixel (x, y); rescaled disparity is d / divisor.
    pub fn divisor(&self, x: T, y: T) -> T {
        self.cx * x + self.cy * y + self.c0
    }

    /// Affine coefficients (cx, cy, c0) of the divisor.
    pub fn coefficients(&self) -> (T, T, T) {
        (self.cx, self.cy, self.c0)
    }
}

/// Writes the camera text format: three intrinsics rows then four
/// world-to-camera rows, whitespace-separated decimals.
pub fn write_camera_file<T: Scalar>(cam: &CameraModel<T>, path: &Path) -> Result<()> {
    let mut buf = String::new();
    for row in &cam.intrinsics().0 {
        let line: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
        buf.push_str(&line.join(" "));
        buf.push('\n');
    }
    for row in &cam.world_to_cam().0 {
        let line: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
        buf.push_str(&line.join(" "));
        buf.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads the camera text format; `image_size` comes from the paired image.
pub fn read_camera_file<T: Scalar>(path: &Path, image_size: (usize, usize)) -> Result<CameraModel<T>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_row = |line: &str, lineno: usize, n: usize| -> Result<Vec<T>> {
        let vals: Vec<T> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map(T::of).map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno,
                    msg: format!("not a number: {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno,
                msg: format!("expected {n} values, found {}", vals.len()),
            });
        }
        Ok(vals)
    };
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < 7 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: lines.len(),
            msg: "camera file needs 3 intrinsics rows and 4 pose rows".into(),
        });
    }
    let mut k = [[T::zero(); 3]; 3];
    for i in 0..3 {
        let row = parse_row(lines[i], i + 1, 3)?;
        k[i].copy_from_slice(&row);
    }
    let mut w2c = [[T::zero(); 4]; 4];
    for i in 0..4 {
        let row = parse_row(lines[3 + i], 4 + i, 4)?;
        w2c[i].copy_from_slice(&row);
    }
    CameraModel::new(Mat3(k), Mat4(w2c), image_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat3;

    pub(crate) fn simple_camera(f: f64, cx: f64, cy: f64, t: [f64; 3]) -> CameraModel<f64> {
        let k = Mat3::from_rows([f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]);
        let w2c = Mat4::from_rigid(&Mat3::identity(), t);
        CameraModel::new(k, w2c, (64, 64)).unwrap()
    }

    #[test]
    fn planes_match_direct_arithmetic() {
        let p = disparity_planes(0.0, 0.01, 3).unwrap();
        assert_eq!(p, vec![0.01, 0.02, 0.03]);
    }

    #[test]
    fn degenerate_interval_rejected() {
        assert!(disparity_planes(0.5, 0.0, 4).is_err());
        assert!(disparity_planes(0.5, -0.1, 4).is_err());
        assert!(disparity_planes::<f64>(0.5, 0.1, 0).is_err());
    }

    #[test]
    fn paper_scale_plane_count() {
        let p = disparity_planes(0.0_f64, 0.01, 128).unwrap();
        assert!((p[127] - 1.28).abs() < 1e-12);
        assert_eq!(p.len(), 128);
    }

    #[test]
    fn planes_strictly_increasing() {
        let h = DisparityHypotheses::new(0.123, 0.017, 40).unwrap();
        let v = h.values();
        for w in v.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn identity_projection_is_exact() {
        // Power-of-two intrinsics keep the algebra exact in floating point.
        let cam = simple_camera(128.0, 32.0, 32.0, [0.25, -0.5, 1.0]);
        for &(x, y) in &[(3.0, 7.0), (0.0, 0.0), (63.0, 41.5), (12.25, 33.75)] {
            for &d in &[0.1, 0.37, 0.85] {
                let p = project_pixel((x, y), d, &cam, &cam).unwrap();
                assert!(p.valid);
                assert_eq!(p.x, x);
                assert_eq!(p.y, y);
            }
        }
    }

    #[test]
    fn hand_computed_translation_case() {
        // Reference at origin, source world-to-camera translation +1 in X,
        // focal 100, principal point (50, 50). The point at depth 1 in front
        // of the reference lands at (150, 50) in the source.
        let refc = simple_camera(100.0, 50.0, 50.0, [0.0, 0.0, 0.0]);
        let src = simple_camera(100.0, 50.0, 50.0, [1.0, 0.0, 0.0]);
        let p = project_pixel((50.0, 50.0), 1.0, &refc, &src).unwrap();
        assert!(p.valid);
        assert!((p.x - 150.0).abs() < 1e-9);
        assert!((p.y - 50.0).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_flagged_invalid() {
        // Source shifted far along +Z in camera coords puts the point behind it.
        let refc = simple_camera(100.0, 50.0, 50.0, [0.0, 0.0, 0.0]);
        let src = simple_camera(100.0, 50.0, 50.0, [0.0, 0.0, -2.0]);
        // Depth 1 point has source-frame depth 1 - 2 = -1.
        let p = project_pixel((50.0, 50.0), 1.0, &refc, &src).unwrap();
        assert!(!p.valid);
    }

    #[test]
    fn nonpositive_disparity_rejected() {
        let cam = simple_camera(100.0, 50.0, 50.0, [0.0, 0.0, 0.0]);
        assert!(project_pixel((1.0, 1.0), 0.0, &cam, &cam).is_err());
        assert!(project_pixel((1.0, 1.0), -0.5, &cam, &cam).is_err());
    }

    #[test]
    fn projection_roundtrip_through_inverse_pair() {
        let refc = simple_camera(120.0, 31.0, 30.0, [0.0, 0.0, 0.0]);
        // A genuinely rotated source camera.
        let (s, c) = (0.19866933079506122, 0.9800665778412416); // sin/cos 0.2
        let r = Mat3::from_rows([c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]);
        let src = CameraModel::new(
            *refc.intrinsics(),
            Mat4::from_rigid(&r, [0.4, -0.1, 0.05]),
            (64, 64),
        )
        .unwrap();
        for &(x, y, d) in &[(10.0, 20.0, 0.5), (40.0, 33.0, 0.3), (25.0, 50.0, 0.7)] {
            let fwd = project_pixel((x, y), d, &refc, &src).unwrap();
            assert!(fwd.valid);
            // Disparity of the same 3-D point in the source frame.
            let pw = refc.unproject(x, y, 1.0 / d);
            let (_, _, z_src) = src.project(pw).unwrap();
            let back = project_pixel((fwd.x, fwd.y), 1.0 / z_src, &src, &refc).unwrap();
            assert!(back.valid);
            assert!((back.x - x).abs() < 1e-5, "x {} vs {}", back.x, x);
            assert!((back.y - y).abs() < 1e-5, "y {} vs {}", back.y, y);
        }
    }

    #[test]
    fn rescale_divisor_identity_is_exactly_one() {
        let cam = simple_camera(128.0, 32.0, 32.0, [0.5, 0.25, -1.0]);
        let plane = RescalePlane::new(&cam, &cam);
        assert_eq!(plane.divisor(17.3, 42.9), 1.0);
    }

    #[test]
    fn rescale_divisor_matches_full_matrix_product() {
        let refc = simple_camera(120.0, 31.0, 30.0, [0.1, 0.0, 0.0]);
        let src = simple_camera(115.0, 33.0, 29.0, [-0.2, 0.05, 0.3]);
        let plane = RescalePlane::new(&refc, &src);
        let m = refc.projection4().mul_mat(&src.projection4_inv());
        for &(x, y) in &[(0.0, 0.0), (12.5, 40.25), (63.0, 1.0)] {
            let h = m.mul_vec([x, y, 1.0, 1.0]);
            assert!((plane.divisor(x, y) - h[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn camera_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0000.txt");
        let (s, c) = (0.6, 0.8);
        let r = Mat3::from_rows([c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]);
        let cam = CameraModel::<f64>::new(
            Mat3::from_rows([110.0, 0.0, 31.5], [0.0, 108.0, 30.5], [0.0, 0.0, 1.0]),
            Mat4::from_rigid(&r, [0.125, -0.75, 2.5]),
            (64, 48),
        )
        .unwrap();
        write_camera_file(&cam, &path).unwrap();
        let back: CameraModel<f64> = read_camera_file(&path, (64, 48)).unwrap();
        assert_eq!(cam, back);
    }

    #[test]
    fn camera_file_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(
            &path,
            "1 0 0\n0 1 zzz\n0 0 1\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n",
        )
        .unwrap();
        let err = read_camera_file::<f64>(&path, (4, 4)).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 2"), "got: {msg}");
    }

    #[test]
    fn rescaled_camera_divides_intrinsic_rows() {
        let cam = simple_camera(128.0, 32.0, 30.0, [0.0, 0.0, 0.0]);
        let s = cam.rescaled(4);
        assert_eq!(s.intrinsics().0[0][0], 32.0);
        assert_eq!(s.intrinsics().0[0][2], 8.0);
        assert_eq!(s.intrinsics().0[1][1], 32.0);
        assert_eq!(s.intrinsics().0[1][2], 7.5);
        assert_eq!(s.image_size(), (16, 16));
    }

    #[test]
    fn invalid_cameras_rejected() {
        let k = Mat3::from_rows([100.0, 0.0, 32.0], [5.0, 100.0, 32.0], [0.0, 0.0, 1.0]);
        assert!(CameraModel::new(k, Mat4::identity(), (64, 64)).is_err());
        let k2 = Mat3::from_rows([-10.0, 0.0, 32.0], [0.0, 100.0, 32.0], [0.0, 0.0, 1.0]);
        assert!(CameraModel::new(k2, Mat4::identity(), (64, 64)).is_err());
        // Non-orthonormal rotation.
        let mut bad = Mat4::<f64>::identity();
        bad.0[0][0] = 1.1;
        let k3 = Mat3::from_rows([100.0, 0.0, 32.0], [0.0, 100.0, 32.0], [0.0, 0.0, 1.0]);
        assert!(CameraModel::new(k3, bad, (64, 64)).is_err());
    }
}

//! Deterministic synthetic multi-view scenes with exact ground-truth
//! disparity: ray-cast textured planes and spheres viewed by a small camera
//! rig. Stands in for real capture data at desk scale.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::MVSample;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DisparityHypotheses};
use crate::linalg::{add3, cross, dot3, normalize3, scale3, sub3, Mat3, Mat4, Vec3};
use crate::maps::DisparityMap;
use crate::sweep::project_map;

/// Solid procedural textures; hash-based so rendering is bit-stable across
/// runs.
#[derive(Debug, Clone)]
pub enum Texture {
    Checker {
        scale: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
    Noise {
        scale: f64,
        base: [f64; 3],
        amplitude: f64,
        seed: u32,
    },
    /// Deliberately textureless, the failure mode matching networks hate.
    Flat { color: [f64; 3] },
}

fn hash3(x: i64, y: i64, z: i64, seed: u32) -> f64 {
    let mut h = seed as u64 ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x as u64, y as u64, z as u64] {
        h ^= v.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h = h.rotate_left(31).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    }
    h ^= h >> 33;
    (h & 0xffff_ffff) as f64 / u32::MAX as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(p: Vec3<f64>, seed: u32) -> f64 {
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [
        smooth(p[0] - base[0]),
        smooth(p[1] - base[1]),
        smooth(p[2] - base[2]),
    ];
    let (bx, by, bz) = (base[0] as i64, base[1] as i64, base[2] as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - frac[2]), (1, frac[2])] {
        for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (dx, wx) in [(0, 1.0 - frac[0]), (1, frac[0])] {
                acc += wx * wy * wz * hash3(bx + dx, by + dy, bz + dz, seed);
            }
        }
    }
    acc
}

impl Texture {
    fn color_at(&self, p: Vec3<f64>) -> [f64; 3] {
        match self {
            Texture::Checker {
                scale,
                color_a,
                color_b,
            } => {
                let k = (p[0] * scale).floor() as i64
                    + (p[1] * scale).floor() as i64
                    + (p[2] * scale).floor() as i64;
                if k.rem_euclid(2) == 0 {
                    *color_a
                } else {
                    *color_b
                }
            }
            Texture::Noise {
                scale,
                base,
                amplitude,
                seed,
            } => {
                let q = [p[0] * scale, p[1] * scale, p[2] * scale];
                let n = 0.65 * value_noise(q, *seed)
                    + 0.35 * value_noise([q[0] * 2.1, q[1] * 2.1, q[2] * 2.1], seed ^ 0xabcd);
                [
                    (base[0] + amplitude * (n - 0.5)).clamp(0.0, 1.0),
                    (base[1] + amplitude * (n - 0.5)).clamp(0.0, 1.0),
                    (base[2] + amplitude * (n - 0.5)).clamp(0.0, 1.0),
                ]
            }
            Texture::Flat { color } => *color,
        }
    }
}

/// Scene primitives. Planes may be bounded to a rectangle in their own
/// basis so foreground occluders stay finite.
#[derive(Debug, Clone)]
pub enum Primitive {
    Plane {
        point: Vec3<f64>,
        normal: Vec3<f64>,
        /// (basis_u, basis_v, half extent u, half extent v)
        bounds: Option<(Vec3<f64>, Vec3<f64>, f64, f64)>,
    },
    Sphere { center: Vec3<f64>, radius: f64 },
}

impl Primitive {
    /// Nearest positive hit parameter of ray origin + t * dir along with the
    /// surface normal; t equals camera depth when dir has unit z in camera
    /// coordinates.
    fn hit(&self, origin: Vec3<f64>, dir: Vec3<f64>) -> Option<(f64, Vec3<f64>)> {
        match self {
            Primitive::Plane {
                point,
                normal,
                bounds,
            } => {
                let denom = dot3(dir, *normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = dot3(sub3(*point, origin), *normal) / denom;
                if t <= 1e-6 {
                    return None;
                }
                if let Some((bu, bv, hu, hv)) = bounds {
                    let p = add3(origin, scale3(dir, t));
                    let rel = sub3(p, *point);
                    if dot3(rel, *bu).abs() > *hu || dot3(rel, *bv).abs() > *hv {
                        return None;
                    }
                }
                Some((t, *normal))
            }
            Primitive::Sphere { center, radius } => {
                let oc = sub3(origin, *center);
                let a = dot3(dir, dir);
                let b = 2.0 * dot3(dir, oc);
                let c = dot3(oc, oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = (-b - sq) / (2.0 * a);
                let t = if t > 1e-6 { t } else { (-b + sq) / (2.0 * a) };
                if t <= 1e-6 {
                    return None;
                }
                let p = add3(origin, scale3(dir, t));
                Some((t, normalize3(sub3(p, *center))))
            }
        }
    }
}

/// Full description of one synthetic sample.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<(Primitive, Texture)>,
    /// Reference camera first.
    pub cameras: Vec<CameraModel<f64>>,
    pub image_size: (usize, usize),
    pub disparity_range: DisparityHypotheses<f64>,
}

/// Camera at `center` looking at `target`. World coordinates follow the
/// image convention: +x right, +y down, +z into the scene.
pub fn look_at_camera(
    center: Vec3<f64>,
    target: Vec3<f64>,
    focal: f64,
    image_size: (usize, usize),
) -> Result<CameraModel<f64>> {
    let forward = normalize3(sub3(target, center));
    let world_down = [0.0, 1.0, 0.0];
    let right = normalize3(cross(world_down, forward));
    let down = cross(forward, right);
    // Rows of world-to-camera rotation are the camera axes.
    let r = Mat3::from_rows(right, down, forward);
    let t = scale3(r.mul_vec(center), -1.0);
    CameraModel::new(intrinsics_for(focal, image_size), Mat4::from_rigid(&r, t), image_size)
}

/// Axis-aligned camera: identity orientation, centered principal point.
/// The desk rig uses pure translations so the cross-view disparity transfer
/// of the ground truth is exact.
pub fn axis_camera(
    center: Vec3<f64>,
    focal: f64,
    image_size: (usize, usize),
) -> Result<CameraModel<f64>> {
    let t = scale3(center, -1.0);
    CameraModel::new(
        intrinsics_for(focal, image_size),
        Mat4::from_rigid(&Mat3::identity(), t),
        image_size,
    )
}

fn intrinsics_for(focal: f64, image_size: (usize, usize)) -> Mat3<f64> {
    let (w, h) = image_size;
    Mat3::from_rows(
        [focal, 0.0, (w as f64 - 1.0) / 2.0],
        [0.0, focal, (h as f64 - 1.0) / 2.0],
        [0.0, 0.0, 1.0],
    )
}

/// Controls for the random scene sampler.
#[derive(Debug, Clone)]
pub struct SceneSampler {
    pub image_size: (usize, usize),
    pub planes: DisparityHypotheses<f64>,
    pub n_sources: usize,
    /// Chance that a foreground object is textureless.
    pub low_texture_prob: f64,
    /// Chance that the background plane is weakly textured, the matching
    /// failure mode wide baselines disambiguate.
    pub low_texture_background_prob: f64,
    /// Baseline of source i is base + growth * i.
    pub baseline_base: f64,
    pub baseline_growth: f64,
}

impl SceneSampler {
    pub fn desk(n_sources: usize) -> Self {
        SceneSampler {
            image_size: (64, 64),
            planes: DisparityHypotheses::new(0.05, 0.05, 16).expect("valid desk planes"),
            n_sources,
            low_texture_prob: 0.1,
            low_texture_background_prob: 0.0,
            baseline_base: 0.16,
            baseline_growth: 0.07,
        }
    }

    fn random_color(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        [
            rng.gen_range(0.15..0.95),
            rng.gen_range(0.15..0.95),
            rng.gen_range(0.15..0.95),
        ]
    }

    fn random_texture(&self, rng: &mut ChaCha8Rng, allow_flat: bool) -> Texture {
        if allow_flat && rng.gen_bool(self.low_texture_prob) {
            return Texture::Flat {
                color: self.random_color(rng),
            };
        }
        if rng.gen_bool(0.5) {
            Texture::Checker {
                scale: rng.gen_range(1.2..4.0),
                color_a: self.random_color(rng),
                color_b: self.random_color(rng),
            }
        } else {
            Texture::Noise {
                scale: rng.gen_range(0.8..2.5),
                base: self.random_color(rng),
                amplitude: rng.gen_range(0.5..0.9),
                seed: rng.gen(),
            }
        }
    }

    /// Draws a scene specification. Depth placement keeps every surface
    /// inside the hypothesis disparity range with margin.
    pub fn sample(&self, seed: u64) -> Result<SceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut primitives = Vec::new();

        // Background plane, slightly tilted, covering the whole frustum.
        let zb = rng.gen_range(5.4..7.2);
        let tilt = [rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12), -1.0];
        let bg_texture = if self.low_texture_background_prob > 0.0
            && rng.gen_bool(self.low_texture_background_prob)
        {
            Texture::Noise {
                scale: rng.gen_range(0.3..0.6),
                base: self.random_color(&mut rng),
                amplitude: rng.gen_range(0.08..0.2),
                seed: rng.gen(),
            }
        } else {
            self.random_texture(&mut rng, false)
        };
        primitives.push((
            Primitive::Plane {
                point: [0.0, 0.0, zb],
                normal: normalize3(tilt),
                bounds: None,
            },
            bg_texture,
        ));

        // Foreground occluders.
        let n_objects = rng.gen_range(1..=3);
        for _ in 0..n_objects {
            let z = rng.gen_range(1.9..4.2);
            let cx = rng.gen_range(-0.8..0.8) * z * 0.35;
            let cy = rng.gen_range(-0.8..0.8) * z * 0.35;
            let tex = self.random_texture(&mut rng, true);
            if rng.gen_bool(0.5) {
                primitives.push((
                    Primitive::Sphere {
                        center: [cx, cy, z],
                        radius: rng.gen_range(0.25..0.55),
                    },
                    tex,
                ));
            } else {
                let n = normalize3([
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    -1.0,
                ]);
                let bu = normalize3(cross(n, [0.0, 1.0, 0.02]));
                let bv = normalize3(cross(n, bu));
                primitives.push((
                    Primitive::Plane {
                        point: [cx, cy, z],
                        normal: n,
                        bounds: Some((bu, bv, rng.gen_range(0.35..0.8), rng.gen_range(0.35..0.8))),
                    },
                    tex,
                ));
            }
        }

        // Rig: reference at the origin, sources translated in the camera
        // plane on growing baselines with alternating directions. All views
        // share the identity orientation so the ground-truth disparity
        // transfer between any pair is exact.
        let focal = rng.gen_range(70.0..88.0);
        let mut cameras = vec![axis_camera([0.0, 0.0, 0.0], focal, self.image_size)?];
        for i in 0..self.n_sources {
            let b = self.baseline_base + self.baseline_growth * i as f64;
            let angle_pick = i % 4;
            let (dx, dy) = match angle_pick {
                0 => (1.0, 0.15),
                1 => (-0.2, 1.0),
                2 => (-1.0, -0.3),
                _ => (0.4, -1.0),
            };
            let dir = normalize3([dx, dy, 0.0]);
            let center = [dir[0] * b, dir[1] * b, 0.0];
            cameras.push(axis_camera(center, focal, self.image_size)?);
        }

        Ok(SceneSpec {
            seed,
            primitives,
            cameras,
            image_size: self.image_size,
            disparity_range: self.planes.clone(),
        })
    }
}

/// Ray-casts one view: image in [0, 1], exact disparity, and the index of
/// the primitive hit per pixel.
fn render_view(
    spec: &SceneSpec,
    cam: &CameraModel<f64>,
) -> (Array3<f64>, Array2<f64>, Array2<i32>) {
    let (w, h) = spec.image_size;
    let cam_to_world = cam.world_to_cam().inverse_rigid();
    let origin = cam.center();
    let kinv = cam.intrinsics().inverse_intrinsics();
    let light = normalize3([0.35, -0.5, -0.8]);
    let mut image = Array3::zeros((3, h, w));
    let mut disp = Array2::zeros((h, w));
    let mut hit_idx = Array2::from_elem((h, w), -1_i32);
    for y in 0..h {
        for x in 0..w {
            // Unit-z camera ray keeps the hit parameter equal to depth.
            let ray_cam = kinv.mul_vec([x as f64, y as f64, 1.0]);
            let dir = cam_to_world.rotation().mul_vec(ray_cam);
            let mut best: Option<(f64, Vec3<f64>, usize)> = None;
            for (i, (prim, _)) in spec.primitives.iter().enumerate() {
                if let Some((t, n)) = prim.hit(origin, dir) {
                    if best.map_or(true, |(bt, _, _)| t < bt) {
                        best = Some((t, n, i));
                    }
                }
            }
            if let Some((t, n, idx)) = best {
                let p = add3(origin, scale3(dir, t));
                let tex = &spec.primitives[idx].1;
                let base = tex.color_at(p);
                // Two-sided diffuse shading plus an ambient floor.
                let ndl = dot3(n, light).abs();
                let shade = 0.55 + 0.45 * ndl;
                for c in 0..3 {
                    image[[c, y, x]] = (base[c] * shade).clamp(0.0, 1.0);
                }
                disp[[y, x]] = 1.0 / t;
                hit_idx[[y, x]] = idx as i32;
            }
        }
    }
    (image, disp, hit_idx)
}

fn quantize(image: &Array3<f64>) -> Array3<u8> {
    image.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Renders every view of the scene and validates the disparity range.
pub fn generate_scene(spec: &SceneSpec) -> Result<MVSample<f32>> {
    if spec.primitives.is_empty() {
        return Err(Error::Generation("scene has no primitives".into()));
    }
    if spec.cameras.len() < 2 {
        return Err(Error::Generation(
            "scene needs a reference and at least one source camera".into(),
        ));
    }
    let lo = spec.disparity_range.first();
    let hi = spec.disparity_range.last();
    let mut images = Vec::new();
    let mut cameras = Vec::new();
    let mut gt = Vec::new();
    for cam in &spec.cameras {
        let (image, disp, hits) = render_view(spec, cam);
        for ((y, x), &d) in disp.indexed_iter() {
            let idx = hits[[y, x]];
            if idx < 0 {
                return Err(Error::Generation(format!(
                    "ray at pixel ({x},{y}) escaped the scene; add a background primitive"
                )));
            }
            if d < lo || d > hi {
                return Err(Error::Generation(format!(
                    "primitive #{idx} puts pixel ({x},{y}) at disparity {d:.4}, outside [{lo:.4}, {hi:.4}]"
                )));
            }
        }
        images.push(quantize(&image));
        cameras.push(cam.to_f32());
        gt.push(DisparityMap::dense(disp.map(|&v| v as f32)));
    }
    Ok(MVSample {
        images,
        cameras,
        gt_disparity: gt,
    })
}

/// Per-pixel mask of view `a` pixels whose ground-truth surface point is
/// visible in view `b`: the projection lands in bounds and the transferred
/// disparity of view b agrees within `tol`.
pub fn visibility_mask(
    sample: &MVSample<f32>,
    a: usize,
    b: usize,
    tol: f64,
) -> Array2<bool> {
    let s = sample.cast::<f64>();
    let d_a = &s.gt_disparity[a];
    let d_b = &s.gt_disparity[b];
    let cam_a = &s.cameras[a];
    let cam_b = &s.cameras[b];
    let corr = project_map(d_a, cam_a, cam_b);
    let err = crate::volumes::geometric_error_at(d_a, d_b, cam_a, cam_b, &corr)
        .expect("ground-truth maps share the sample geometry");
    let (h, w) = d_a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        err.valid[[y, x]] && err.data[[0, y, x]] < tol
    })
}

/// Pixels adjacent to a disparity discontinuity larger than `threshold`.
/// Bilinear transfers are meaningless across depth edges, so consistency
/// oracles exclude them.
pub fn discontinuity_mask(map: &DisparityMap<f32>, threshold: f32) -> Array2<bool> {
    let (h, w) = map.dim();
    let mut edges = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let v = map.data[[y, x]];
            let mut is_edge = false;
            for (dy, dx) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                    let u = map.data[[ny as usize, nx as usize]];
                    if (v - u).abs() > threshold {
                        is_edge = true;
                    }
                }
            }
            edges[[y, x]] = is_edge;
        }
    }
    // Dilate once: neighbors of edge pixels also sample across the edge.
    let mut out = edges.clone();
    for y in 0..h {
        for x in 0..w {
            if edges[[y, x]] {
                for (dy, dx) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                        out[[ny as usize, nx as usize]] = true;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fronto_parallel_plane_has_constant_disparity() {
        let planes = DisparityHypotheses::new(0.05, 0.05, 16).unwrap();
        let cam = axis_camera([0.0, 0.0, 0.0], 80.0, (32, 32)).unwrap();
        let spec = SceneSpec {
            seed: 0,
            primitives: vec![(
                Primitive::Plane {
                    point: [0.0, 0.0, 4.0],
                    normal: [0.0, 0.0, -1.0],
                    bounds: None,
                },
                Texture::Flat {
                    color: [0.5, 0.5, 0.5],
                },
            )],
            cameras: vec![cam.clone(), cam],
            image_size: (32, 32),
            disparity_range: planes,
        };
        let sample = generate_scene(&spec).unwrap();
        for &d in sample.gt_disparity[0].data.iter() {
            assert!((d - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let sampler = SceneSampler::desk(2);
        let a = generate_scene(&sampler.sample(7).unwrap()).unwrap();
        let b = generate_scene(&sampler.sample(7).unwrap()).unwrap();
        for v in 0..a.view_count() {
            assert_eq!(a.images[v], b.images[v]);
            for (x, y) in a.gt_disparity[v]
                .data
                .iter()
                .zip(b.gt_disparity[v].data.iter())
            {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn generated_disparities_stay_in_declared_range() {
        let sampler = SceneSampler::desk(3);
        for seed in 0..5 {
            let sample = generate_scene(&sampler.sample(seed).unwrap()).unwrap();
            let lo = sampler.planes.first() as f32;
            let hi = sampler.planes.last() as f32;
            for view in &sample.gt_disparity {
                for &d in view.data.iter() {
                    assert!(d >= lo && d <= hi);
                }
            }
        }
    }

    #[test]
    fn ground_truth_is_cross_view_consistent_off_occlusions() {
        let sampler = SceneSampler::desk(2);
        let sample = generate_scene(&sampler.sample(11).unwrap()).unwrap();
        let s64 = sample.cast::<f64>();
        let corr = project_map(&s64.gt_disparity[0], &s64.cameras[0], &s64.cameras[1]);
        let err = crate::volumes::geometric_error_at(
            &s64.gt_disparity[0],
            &s64.gt_disparity[1],
            &s64.cameras[0],
            &s64.cameras[1],
            &corr,
        )
        .unwrap();
        let visible = visibility_mask(&sample, 0, 1, 5e-3);
        let edges = discontinuity_mask(&sample.gt_disparity[0], 0.025);
        let mut checked = 0;
        for ((y, x), &ok) in visible.indexed_iter() {
            if ok && !edges[[y, x]] && err.valid[[y, x]] {
                assert!(
                    err.data[[0, y, x]] < 1e-3,
                    "pixel ({x},{y}) error {}",
                    err.data[[0, y, x]]
                );
                checked += 1;
            }
        }
        // The scene must actually exercise the check.
        assert!(checked > 500, "only {checked} pixels checked");
    }

    #[test]
    fn occlusion_scene_has_large_error_on_boundaries() {
        // A sphere in front of a plane: the sphere occludes different parts
        // of the background in each view, so the geometric error of the
        // ground truth is large exactly there.
        let planes = DisparityHypotheses::new(0.05, 0.05, 16).unwrap();
        let refc = axis_camera([0.0, 0.0, 0.0], 80.0, (64, 64)).unwrap();
        let src = axis_camera([0.35, 0.0, 0.0], 80.0, (64, 64)).unwrap();
        let spec = SceneSpec {
            seed: 0,
            primitives: vec![
                (
                    Primitive::Plane {
                        point: [0.0, 0.0, 6.0],
                        normal: [0.0, 0.0, -1.0],
                        bounds: None,
                    },
                    Texture::Checker {
                        scale: 2.0,
                        color_a: [0.9, 0.2, 0.2],
                        color_b: [0.2, 0.9, 0.2],
                    },
                ),
                (
                    Primitive::Sphere {
                        center: [0.0, 0.0, 2.5],
                        radius: 0.5,
                    },
                    Texture::Noise {
                        scale: 2.0,
                        base: [0.4, 0.4, 0.8],
                        amplitude: 0.6,
                        seed: 9,
                    },
                ),
            ],
            cameras: vec![refc, src],
            image_size: (64, 64),
            disparity_range: planes,
        };
        let sample = generate_scene(&spec).unwrap();
        let s64 = sample.cast::<f64>();
        let corr = project_map(&s64.gt_disparity[0], &s64.cameras[0], &s64.cameras[1]);
        let err = crate::volumes::geometric_error_at(
            &s64.gt_disparity[0],
            &s64.gt_disparity[1],
            &s64.cameras[0],
            &s64.cameras[1],
            &corr,
        )
        .unwrap();
        let occluded = visibility_mask(&sample, 0, 1, 5e-3).map(|v| !v);
        let max_occluded_err = err
            .data
            .indexed_iter()
            .filter(|((_, y, x), _)| occluded[[*y, *x]] && err.valid[[*y, *x]])
            .map(|(_, &v)| v)
            .fold(0.0, f64::max);
        assert!(
            max_occluded_err > 0.05,
            "occlusion should produce large transfer error, got {max_occluded_err}"
        );
    }
}

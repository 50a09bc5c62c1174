//! Fast self-contained invariant checks behind the `selftest` subcommand:
//! the directly assertable contracts of every module, runnable in seconds
//! without training.

use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};

use crate::autodiff::Tape;
use crate::geometry::{self, CameraModel, DisparityHypotheses};
use crate::linalg::{Mat3, Mat4};
use crate::maps::{DisparityMap, FeatureMap};
use crate::net::{
    aam_aggregate, mean_pool_aggregate, AamWeights, ModelConfig, MvsModel, NetworkConfig,
};
use crate::nn::zeros;
use crate::sweep;
use crate::train::{LossWeights, TrainConfig};
use crate::volumes;

type CheckFn = fn() -> Result<(), String>;

pub struct SelfTestResult {
    pub name: &'static str,
    pub error: Option<String>,
}

fn expect(cond: bool, msg: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b}"))
    }
}

fn pow2_cam(t: [f64; 3]) -> CameraModel<f64> {
    CameraModel::new(
        Mat3::from_rows([16.0, 0.0, 8.0], [0.0, 16.0, 8.0], [0.0, 0.0, 1.0]),
        Mat4::from_rigid(&Mat3::identity(), t),
        (16, 16),
    )
    .expect("valid test camera")
}

fn planes4() -> DisparityHypotheses<f64> {
    DisparityHypotheses::new(0.1, 0.1, 4).expect("valid planes")
}

fn check_disparity_planes() -> Result<(), String> {
    let p = geometry::disparity_planes(0.0, 0.01, 3).map_err(|e| e.to_string())?;
    expect(p == vec![0.01, 0.02, 0.03], "plane arithmetic")?;
    expect(
        geometry::disparity_planes(0.5, 0.0, 4).is_err(),
        "zero interval must be rejected",
    )?;
    let long = geometry::disparity_planes(0.0, 0.01, 128).map_err(|e| e.to_string())?;
    close(long[127], 1.28, 1e-12, "last plane of 128")
}

fn check_identity_projection() -> Result<(), String> {
    let cam = pow2_cam([0.25, -0.5, 1.0]);
    let p = geometry::project_pixel((3.0, 7.0), 0.37, &cam, &cam).map_err(|e| e.to_string())?;
    expect(p.valid && p.x == 3.0 && p.y == 7.0, "identity projection must be exact")
}

fn check_behind_camera() -> Result<(), String> {
    let refc = pow2_cam([0.0, 0.0, 0.0]);
    let src = pow2_cam([0.0, 0.0, -2.0]);
    let p = geometry::project_pixel((8.0, 8.0), 1.0, &refc, &src).map_err(|e| e.to_string())?;
    expect(!p.valid, "point behind source camera must be invalid")
}

fn check_identity_warp() -> Result<(), String> {
    let cam = pow2_cam([0.0, 0.0, 0.5]);
    let planes = planes4();
    let feat = FeatureMap::new(
        Array3::from_shape_fn((2, 16, 16), |(c, y, x)| (c + 2 * y + x) as f64 * 0.01),
        1,
    );
    let (out, mask) = sweep::plane_sweep_warp(&feat, &planes, &cam, &cam).map_err(|e| e.to_string())?;
    for i in 0..4 {
        for y in 0..16 {
            for x in 0..16 {
                if !mask[[i, y, x]] {
                    return Err("identity warp mask must be full".into());
                }
                for c in 0..2 {
                    if out[[c, i, y, x]] != feat.data[[c, y, x]] {
                        return Err("identity warp must reproduce features exactly".into());
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_rescale_identity_and_zero() -> Result<(), String> {
    let cam = pow2_cam([0.0, 0.0, 0.0]);
    let d_ref = DisparityMap::dense(Array2::from_elem((16, 16), 0.3));
    let d_src = DisparityMap::dense(Array2::from_shape_fn((16, 16), |(y, x)| {
        0.2 + 0.001 * (y * 16 + x) as f64
    }));
    let corr = sweep::project_map(&d_ref, &cam, &cam);
    let out = sweep::rescale_disparity(&d_src, &cam, &cam, &corr).map_err(|e| e.to_string())?;
    expect(out.data == d_src.data, "identity rescale must be exact")?;
    let zeros_map = DisparityMap::dense(Array2::zeros((16, 16)));
    let out = sweep::rescale_disparity(&zeros_map, &cam, &cam, &corr).map_err(|e| e.to_string())?;
    expect(out.data.iter().all(|v| *v == 0.0), "zero disparity stays zero")
}

fn check_concat_halves() -> Result<(), String> {
    let cam = pow2_cam([0.0, 0.0, 0.0]);
    let planes = planes4();
    let feat = FeatureMap::new(
        Array3::from_shape_fn((2, 16, 16), |(c, y, x)| ((c + y + x) % 5) as f64),
        1,
    );
    let (warped, _) = sweep::plane_sweep_warp(&feat, &planes, &cam, &cam).map_err(|e| e.to_string())?;
    let v = volumes::concat_cost_volume(&feat, &warped, &planes).map_err(|e| e.to_string())?;
    for c in 0..2 {
        for i in 0..4 {
            for y in 0..16 {
                for x in 0..16 {
                    if v.data[[c, i, y, x]] != v.data[[2 + c, i, y, x]] {
                        return Err("identity-camera concat halves must match".into());
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_geometric_costs() -> Result<(), String> {
    let planes = planes4();
    let d = DisparityMap::dense(Array2::from_elem((16, 16), planes.disparity(2)));
    let vref = volumes::geometric_cost_ref(&d, &planes);
    expect(
        (0..16).all(|y| (0..16).all(|x| vref.data[[0, 2, y, x]] == 0.0)),
        "reference cost zero at matching plane",
    )?;
    let cam = pow2_cam([0.0, 0.0, 0.0]);
    let vsrc = volumes::geometric_cost_source(&d, &d, &planes, &cam, &cam)
        .map_err(|e| e.to_string())?;
    expect(
        vsrc.data == vref.data,
        "identical cameras reduce the source cost to the reference cost",
    )
}

fn check_tile_and_errors() -> Result<(), String> {
    let planes = planes4();
    let e = volumes::ErrorMap {
        data: Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y * 3 + x) as f64 * 0.1),
        valid: Array2::from_elem((3, 3), true),
    };
    let v = volumes::tile_along_depth(&e, &planes);
    for c in 0..2 {
        for i in 0..4 {
            for y in 0..3 {
                for x in 0..3 {
                    if v.data[[c, i, y, x]] != e.data[[c, y, x]] {
                        return Err("tiled slices must equal the error map".into());
                    }
                }
            }
        }
    }
    let cam = pow2_cam([0.0, 0.0, 0.0]);
    let f = FeatureMap::new(Array3::from_elem((2, 16, 16), 0.25), 1);
    let f2 = FeatureMap::new(f.data.map(|v| v + 1.0), 1);
    let d = DisparityMap::dense(Array2::from_elem((16, 16), 0.3));
    let ep = volumes::photometric_error(&f, &f2, &d, &cam, &cam).map_err(|e| e.to_string())?;
    expect(
        ep.data.iter().all(|v| (v - 1.0).abs() < 1e-9),
        "constant offset photometric error",
    )?;
    let eg = volumes::geometric_error(&d, &d, &cam, &cam).map_err(|e| e.to_string())?;
    expect(eg.data.iter().all(|v| *v == 0.0), "identity geometric error")
}

fn check_visual_hull_cases() -> Result<(), String> {
    let cam = pow2_cam([0.0, 0.0, 0.0]);
    let planes = planes4();
    let high = DisparityMap::dense(Array2::from_elem((16, 16), 1.0));
    let low = DisparityMap::dense(Array2::from_elem((16, 16), 0.05));
    let hull = volumes::visual_hull(
        &[(high.clone(), cam.clone()), (high.clone(), cam.clone())],
        &planes,
        &cam,
    )
    .map_err(|e| e.to_string())?;
    expect(hull.data.iter().all(|&v| v == 1.0), "saturated hull is all ones")?;
    let hull = volumes::visual_hull(
        &[(high, cam.clone()), (low, cam.clone())],
        &planes,
        &cam,
    )
    .map_err(|e| e.to_string())?;
    expect(hull.data.iter().all(|&v| v == 0.5), "split hull is exactly one half")
}

fn check_soft_argmax_cases() -> Result<(), String> {
    let planes = DisparityHypotheses::new(0.0, 0.01, 8).expect("valid planes");
    let mut tape: Tape<f64> = Tape::new();
    let mut one_hot = ArrayD::from_elem(IxDyn(&[8, 1, 1]), 0.0);
    one_hot[[2, 0, 0]] = 1.0;
    let p = tape.constant(one_hot);
    let d = tape.depth_expectation(p, Arc::new(planes.values()));
    close(
        tape.value(d).as_slice().unwrap()[0],
        0.03,
        1e-12,
        "point mass expectation",
    )?;
    let uni = tape.constant(ArrayD::from_elem(IxDyn(&[8, 1, 1]), 1.0 / 8.0));
    let d = tape.depth_expectation(uni, Arc::new(planes.values()));
    close(
        tape.value(d).as_slice().unwrap()[0],
        planes.mean(),
        1e-12,
        "uniform expectation is the plane mean",
    )
}

fn tiny_model() -> MvsModel<f64> {
    let cfg = ModelConfig {
        net: NetworkConfig {
            feature_channels: 4,
            low_level_channels: 8,
            plane_count: 8,
            crm_stacks: 3,
            spp_pool_sizes: vec![2, 4],
            base_width: 4,
        },
        ..ModelConfig::desk()
    };
    MvsModel::new(cfg, 99).expect("tiny model builds")
}

fn check_crm_and_refinement_init() -> Result<(), String> {
    let model = tiny_model();
    let mut tape = Tape::new();
    let bind = model.params.bind_frozen(&mut tape);
    let cost = tape.constant(ArrayD::from_shape_vec(
        IxDyn(&[8, 8, 4, 4]),
        (0..8 * 8 * 16).map(|i| (i as f64 * 0.37).sin()).collect(),
    )
    .unwrap());
    let (c_tilde, inters) = model.crm.apply(&mut tape, &bind, cost);
    expect(inters.len() == 3, "intermediate count equals the stack count")?;
    for &v in &inters {
        if tape.value(v) != tape.value(c_tilde) {
            return Err("zero-initialized stacks must start as the identity".into());
        }
    }
    let gch = model.cfg.refine_in_channels() - model.cfg.net.base_width;
    let guidance = tape.constant(ArrayD::from_elem(IxDyn(&[gch, 8, 4, 4]), 0.2));
    let refined = model
        .refine
        .as_ref()
        .expect("tiny model keeps refinement")
        .apply(&mut tape, &bind, c_tilde, &[guidance]);
    expect(
        tape.value(refined) == tape.value(c_tilde),
        "refinement must start as the identity",
    )
}

fn check_aggregation_identities() -> Result<(), String> {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.0));
    let b = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 2.0));
    let m = mean_pool_aggregate(&mut tape, &[a, b]).map_err(|e| e.to_string())?;
    expect(tape.value(m).iter().all(|&v| v == 1.0), "mean of zeros and twos is ones")?;

    let wv = ArrayD::from_shape_vec(
        IxDyn(&[1, 1, 3, 3, 3]),
        (0..27).map(|i| (i as f64 * 0.11).cos() * 0.2).collect(),
    )
    .unwrap();
    let ws = tape.constant(wv.clone());
    let bs = tape.constant(zeros::<f64>(&[1]));
    let wo = tape.constant(wv);
    let bo = tape.constant(zeros::<f64>(&[1]));
    let bind = crate::nn::Binding::from_nodes(vec![ws, bs, wo, bo]);
    let weights = AamWeights {
        self_conv: crate::nn::Conv3dLayer {
            w: crate::nn::ParamId(0),
            b: crate::nn::ParamId(1),
            stride: 1,
        },
        others_conv: crate::nn::Conv3dLayer {
            w: crate::nn::ParamId(2),
            b: crate::nn::ParamId(3),
            stride: 1,
        },
    };
    let c = tape.constant(ArrayD::from_shape_vec(
        IxDyn(&[1, 2, 2, 2]),
        (0..8).map(|i| i as f64 * 0.3 - 1.0).collect(),
    )
    .unwrap());
    let single = aam_aggregate(&mut tape, &bind, &[c], &weights).map_err(|e| e.to_string())?;
    expect(tape.value(single) == tape.value(c), "singleton aggregation is the identity")?;

    // Tied weights equal mean pooling.
    let set: Vec<_> = (0..3)
        .map(|i| {
            tape.constant(ArrayD::from_shape_vec(
                IxDyn(&[1, 2, 2, 2]),
                (0..8).map(|j| ((i * 8 + j) as f64 * 0.17).sin()).collect(),
            )
            .unwrap())
        })
        .collect();
    let fused = aam_aggregate(&mut tape, &bind, &set, &weights).map_err(|e| e.to_string())?;
    let mean = mean_pool_aggregate(&mut tape, &set).map_err(|e| e.to_string())?;
    for (x, y) in tape.value(fused).iter().zip(tape.value(mean).iter()) {
        if (x - y).abs() > 1e-6 {
            return Err("tied-weight aggregation must equal mean pooling".into());
        }
    }
    Ok(())
}

fn check_loss_arithmetic() -> Result<(), String> {
    let w = LossWeights::<f64>::paper_defaults(3);
    close(w.lambda, 0.8, 1e-12, "lambda")?;
    close(
        w.lambda + w.omega.iter().sum::<f64>(),
        1.8,
        1e-12,
        "unit branch errors sum",
    )
}

fn check_lr_schedule() -> Result<(), String> {
    let cfg = TrainConfig {
        decay_interval: 10,
        ..TrainConfig::desk_stage1()
    };
    close(cfg.lr_at(10), 1e-3, 1e-15, "rate before the first decay")?;
    close(cfg.lr_at(11), 0.9e-3, 1e-15, "rate after the first decay")
}

fn check_pfm_roundtrip() -> Result<(), String> {
    let dir = std::env::temp_dir().join(format!("mvstereo-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("selftest.pfm");
    let map = Array2::from_shape_fn((5, 4), |(y, x)| (y as f32 * 4.0 + x as f32) * 0.125 - 1.0);
    crate::dataset::write_pfm(&map, &path).map_err(|e| e.to_string())?;
    let back = crate::dataset::read_pfm(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&path);
    for (a, b) in map.iter().zip(back.iter()) {
        if a.to_bits() != b.to_bits() {
            return Err("PFM round trip must be bit exact".into());
        }
    }
    Ok(())
}

fn check_checkpoint_roundtrip() -> Result<(), String> {
    let dir = std::env::temp_dir().join(format!("mvstereo-selftest-ck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("selftest.ckpt");
    let cfg = ModelConfig {
        net: NetworkConfig {
            feature_channels: 4,
            low_level_channels: 8,
            plane_count: 8,
            crm_stacks: 2,
            spp_pool_sizes: vec![2],
            base_width: 4,
        },
        ..ModelConfig::desk()
    };
    let model: MvsModel<f32> = MvsModel::new(cfg, 3).map_err(|e| e.to_string())?;
    crate::checkpoint::save_checkpoint(&model, 1, &path).map_err(|e| e.to_string())?;
    let (loaded, _) = crate::checkpoint::load_checkpoint::<f32>(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&path);
    for ((_, a), (_, b)) in model.params.iter().zip(loaded.params.iter()) {
        for (x, y) in a.iter().zip(b.iter()) {
            if x.to_bits() != y.to_bits() {
                return Err("checkpoint round trip must be bit exact".into());
            }
        }
    }
    Ok(())
}

fn check_metrics_perfect() -> Result<(), String> {
    let gt = DisparityMap::dense(Array2::from_shape_fn((6, 6), |(y, x)| {
        0.2 + 0.01 * (y + x) as f64
    }));
    let r = crate::metrics::compute_metrics(&gt, &gt, 0.05).map_err(|e| e.to_string())?;
    expect(
        r.l1 == 0.0 && r.l1_inv == 0.0 && r.l1_rel == 0.0 && r.inlier == [100.0; 4],
        "perfect prediction scores zero error and full accuracy",
    )
}

fn check_generator_determinism() -> Result<(), String> {
    let sampler = crate::synth::SceneSampler {
        image_size: (24, 24),
        ..crate::synth::SceneSampler::desk(1)
    };
    let a = crate::synth::generate_scene(&sampler.sample(3).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let b = crate::synth::generate_scene(&sampler.sample(3).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    expect(a.images == b.images, "same-seed scenes must be identical")
}

fn check_volume_shape_guard() -> Result<(), String> {
    let planes = planes4();
    let bad = Array4::from_elem((1, 3, 2, 2), 0.0);
    expect(
        volumes::CostVolume::new(bad, planes, vec![("x".into(), 1)]).is_err(),
        "plane-count mismatch must be rejected",
    )
}

pub fn run_all() -> Vec<SelfTestResult> {
    let checks: Vec<(&'static str, CheckFn)> = vec![
        ("disparity_planes arithmetic and rejection", check_disparity_planes),
        ("identity projection exact", check_identity_projection),
        ("behind-camera projection invalid", check_behind_camera),
        ("identity plane-sweep warp exact", check_identity_warp),
        ("disparity rescale identity and zero", check_rescale_identity_and_zero),
        ("concat volume halves equal for identical cameras", check_concat_halves),
        ("geometric cost volumes", check_geometric_costs),
        ("error maps and depth tiling", check_tile_and_errors),
        ("visual hull saturated and split cases", check_visual_hull_cases),
        ("soft-argmax expectation cases", check_soft_argmax_cases),
        ("regularizer and refinement identity at init", check_crm_and_refinement_init),
        ("aggregation identities", check_aggregation_identities),
        ("loss weight arithmetic", check_loss_arithmetic),
        ("learning-rate schedule", check_lr_schedule),
        ("pfm round trip", check_pfm_roundtrip),
        ("checkpoint round trip", check_checkpoint_roundtrip),
        ("metrics on a perfect prediction", check_metrics_perfect),
        ("generator determinism", check_generator_determinism),
        ("cost volume shape guard", check_volume_shape_guard),
    ];
    checks
        .into_iter()
        .map(|(name, f)| SelfTestResult {
            name,
            error: f().err(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_selftests_pass() {
        let results = super::run_all();
        for r in &results {
            assert!(r.error.is_none(), "{}: {:?}", r.name, r.error);
        }
        assert!(results.len() >= 15);
    }
}

use mvstereo::dataset::MVSample;
use mvstereo::geometry::DisparityHypotheses;
use mvstereo::metrics::evaluate_dataset;
use mvstereo::net::{ModelConfig, MvsModel, RefinementKind};
use mvstereo::synth::{generate_scene, SceneSampler};
use mvstereo::train::{train_stage1, TrainConfig};

fn gen(n: usize, seed0: u64) -> Vec<MVSample<f32>> {
    let sampler = SceneSampler {
        image_size: (48, 48),
        ..SceneSampler::desk(5)
    };
    (0..n)
        .map(|i| generate_scene(&sampler.sample(seed0 + i as u64).unwrap()).unwrap())
        .collect()
}

fn main() {
    let t0 = std::time::Instant::now();
    let planes = DisparityHypotheses::new(0.05f32, 0.05, 16).unwrap();
    let train_set = gen(6, 1000);
    let eval_set = gen(20, 5000);
    let mut medians = Vec::new();
    for (label, kind) in [
        ("full", RefinementKind::Full),
        ("none", RefinementKind::None),
        ("photo", RefinementKind::PhotometricOnly),
    ] {
        let mut l1s = Vec::new();
        for seed in [11u64, 22, 33] {
            let mut m = MvsModel::new(
                ModelConfig {
                    refinement: kind,
                    ..ModelConfig::desk()
                },
                seed,
            )
            .unwrap();
            let tc = TrainConfig {
                iterations: 500,
                batch_size: 1,
                seed,
                ..TrainConfig::desk_stage1()
            };
            train_stage1(&mut m, &train_set, &tc).unwrap();
            let (agg, _) = evaluate_dataset(&m, &eval_set, 1, 0.05, &planes).unwrap();
            println!(
                "{label} seed {seed}: L1 {:.4} Sc {:.4} ({:?})",
                agg.l1,
                agg.sc_inv,
                t0.elapsed()
            );
            l1s.push(agg.l1);
        }
        let mut s = l1s.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("{label} median {:.4} all {l1s:?}", s[1]);
        medians.push((label, s[1], l1s));
    }
    let full = &medians[0];
    let none = &medians[1];
    let photo = &medians[2];
    println!(
        "check1 full<=none: {} ({:.4} vs {:.4})",
        full.1 <= none.1,
        full.1,
        none.1
    );
    let spread = |vals: &[f64], med: f64| vals.iter().map(|v| (v - med).abs()).fold(0.0, f64::max);
    let noise = spread(&full.2, full.1).max(spread(&photo.2, photo.1));
    println!(
        "check2 photo>=full-noise: {} ({:.4} vs {:.4} - {:.4})",
        photo.1 >= full.1 - noise,
        photo.1,
        full.1,
        noise
    );
}

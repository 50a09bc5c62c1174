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
    let train_set = gen(8, 1000);
    let eval_set = gen(30, 5000);
    for (label, kind) in [
        ("full", RefinementKind::Full),
        ("none", RefinementKind::None),
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
                iterations: 600,
                batch_size: 2,
                decay_interval: 100,
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
    }
}

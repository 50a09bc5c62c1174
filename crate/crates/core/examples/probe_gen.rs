use mvstereo::dataset::MVSample;
use mvstereo::geometry::DisparityHypotheses;
use mvstereo::metrics::evaluate_dataset;
use mvstereo::net::{AggregatorKind, ModelConfig, MvsModel, RefinementKind};
use mvstereo::synth::{generate_scene, SceneSampler};
use mvstereo::train::{train_stage1, train_stage2, TrainConfig};

fn gen(growth: f64, low_bg: f64, n: usize, seed0: u64) -> Vec<MVSample<f32>> {
    let sampler = SceneSampler {
        image_size: (48, 48),
        baseline_growth: growth,
        low_texture_background_prob: low_bg,
        ..SceneSampler::desk(5)
    };
    (0..n)
        .map(|i| generate_scene(&sampler.sample(seed0 + i as u64).unwrap()).unwrap())
        .collect()
}

fn copy_into(dst: &mut MvsModel<f32>, src: &MvsModel<f32>) {
    let names: Vec<String> = dst.params.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        if let Some((_, v)) = src.params.iter().find(|(nn, _)| *nn == n) {
            dst.params.set_by_name(&n, v.clone()).unwrap();
        }
    }
}

fn main() {
    let t0 = std::time::Instant::now();
    let planes = DisparityHypotheses::new(0.05f32, 0.05, 16).unwrap();
    let train6 = gen(0.07, 0.0, 6, 1000);

    let base_path = std::path::Path::new("/tmp/probe_base.ckpt");
    let base: MvsModel<f32> = if base_path.exists() {
        mvstereo::checkpoint::load_checkpoint(base_path).unwrap().0
    } else {
        let mut m = MvsModel::new(
            ModelConfig {
                refinement: RefinementKind::Full,
                ..ModelConfig::desk()
            },
            11,
        )
        .unwrap();
        let tc = TrainConfig {
            iterations: 500,
            batch_size: 1,
            seed: 11,
            ..TrainConfig::desk_stage1()
        };
        train_stage1(&mut m, &train6, &tc).unwrap();
        mvstereo::checkpoint::save_checkpoint(&m, 1, base_path).unwrap();
        m
    };
    println!("base ready ({:?})", t0.elapsed());


    for low_bg in [0.35f64, 0.0] {
        let growth = 0.12f64;
        let stage2_set = gen(growth, low_bg, 20, 3000);
        let eval_set = gen(growth, low_bg, 20, 5000);
        let sc = |m: &MvsModel<f32>, n: usize| {
            let (agg, _) = evaluate_dataset(m, &eval_set, n, 0.05, &planes).unwrap();
            (agg.sc_inv, agg.l1)
        };
        let mut mean_model = MvsModel::new(
            ModelConfig {
                aggregator: AggregatorKind::MeanPool,
                aggregate_after_crm: false,
                refinement: RefinementKind::Full,
                ..ModelConfig::desk()
            },
            0,
        )
        .unwrap();
        copy_into(&mut mean_model, &base);
        let (s3, l3) = sc(&mean_model, 3);
        let (s5, l5) = sc(&mean_model, 5);
        println!("lowbg {low_bg} growth {growth} meanpool: N3 Sc {s3:.6} L1 {l3:.4} | N5 Sc {s5:.6} L1 {l5:.4}");

        // Single aggregation point: attention module only at the final
        // fusion, branches keep local volumes (the module-comparison setup).
        let mut aam = MvsModel::new(
            ModelConfig {
                aggregator: AggregatorKind::Aam,
                aggregate_after_crm: false,
                refinement: RefinementKind::Full,
                ..ModelConfig::desk()
            },
            0,
        )
        .unwrap();
        copy_into(&mut aam, &base);
        let mut done = 0usize;
        for stop in [150usize, 300] {
            let tc = TrainConfig {
                stage: 2,
                iterations: stop - done,
                batch_size: 4,
                n_views: 3,
                seed: 8 + done as u64,
                ..TrainConfig::desk_stage1()
            };
            train_stage2(&mut aam, &stage2_set, &tc).unwrap();
            done = stop;
            let (s3, l3) = sc(&aam, 3);
            let (s5, l5) = sc(&aam, 5);
            println!(
                "lowbg {low_bg} aam@{stop}: N3 Sc {s3:.6} L1 {l3:.4} | N5 Sc {s5:.6} L1 {l5:.4} ({:?})",
                t0.elapsed()
            );
        }
    }
}

//! Command-line pipeline: synthetic dataset generation, two-stage training,
//! inference, evaluation, point cloud fusion, gradient checks and the
//! invariant self test.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mvstereo::checkpoint::{load_checkpoint, save_checkpoint};
use mvstereo::colormap::colorize;
use mvstereo::dataset::{load_dataset, read_index, read_sample, write_index, write_sample};
use mvstereo::fusion::{consistency_filter, fuse_point_cloud, write_ply};
use mvstereo::geometry::DisparityHypotheses;
use mvstereo::metrics::{evaluate_dataset, infer_disparity, write_metrics_csv, MetricReport};
use mvstereo::net::{
    AggregatorKind, BranchExec, ModelConfig, MvsModel, NetworkConfig, RefinementKind,
};
use mvstereo::synth::{generate_scene, SceneSampler};
use mvstereo::train::{train_stage1, train_stage2, write_log, TrainConfig};

#[derive(Parser)]
#[command(
    name = "mvstereo",
    about = "Multi-view stereo depth estimation: plane-sweep two-view networks with geometric refinement and attentional aggregation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PlaneArgs {
    /// Minimum disparity of the hypothesis planes.
    #[arg(long, default_value_t = 0.05)]
    d_min: f64,
    /// Interval between neighboring planes.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Number of disparity planes.
    #[arg(long, default_value_t = 16)]
    planes: usize,
}

impl PlaneArgs {
    fn hypotheses(&self) -> anyhow::Result<DisparityHypotheses<f32>> {
        Ok(DisparityHypotheses::new(
            self.d_min as f32,
            self.delta as f32,
            self.planes,
        )?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic multi-view dataset.
    Generate {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Generator seed; the same seed reproduces the dataset byte for byte.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Source views per sample (the reference comes on top).
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[command(flatten)]
        plane_args: PlaneArgs,
    },
    /// Train the networks: stage 1 trains the two-view network from
    /// scratch, stage 2 trains only the aggregation modules.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional key=value config file; command-line flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stage-1 checkpoint to start stage 2 from (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        decay_factor: Option<f64>,
        #[arg(long)]
        decay_interval: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Source views per sample (stage 2).
        #[arg(long)]
        views: Option<usize>,
        /// Refinement inputs: full, no-hull, photometric-only or none.
        #[arg(long, default_value = "full")]
        refinement: String,
        /// Aggregation module: aam, attsets or mean-pool.
        #[arg(long, default_value = "aam")]
        aggregator: String,
        /// Disable the first aggregation point (after cost regularization).
        #[arg(long, default_value_t = false)]
        no_first_aggregation: bool,
        #[command(flatten)]
        plane_args: PlaneArgs,
    },
    /// Run inference and write per-sample disparity maps (PFM) with color
    /// previews (PNG).
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[command(flatten)]
        plane_args: PlaneArgs,
    },
    /// Evaluate a checkpoint: per-sample metrics CSV plus a summary table.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        views: usize,
        /// Inlier threshold; defaults to the plane interval.
        #[arg(long)]
        delta_threshold: Option<f64>,
        #[command(flatten)]
        plane_args: PlaneArgs,
    },
    /// Filter by cross-view consistency and fuse into a PLY point cloud.
    Fuse {
        #[arg(long)]
        dataset: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Checkpoint for estimated maps; omit to fuse the ground truth.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Minimum number of agreeing other views; defaults to 1 for
        /// two-view samples and 2 otherwise.
        #[arg(long)]
        min_consistent: Option<usize>,
        /// Disparity agreement tolerance; defaults to the plane interval.
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        plane_args: PlaneArgs,
    },
    /// Run the finite-difference gradient suites (double precision).
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Optional directory for the resolved-config snapshot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast invariant checks of every module.
    Selftest {
        /// Optional directory for the resolved-config snapshot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_snapshot(dir: &Path, entries: &[(&str, String)]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(dir.join("config.txt"), text)?;
    Ok(())
}

fn parse_kv_file(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(
                "config {} line {}: expected key = value",
                path.display(),
                i + 1
            )
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn sample_id(i: usize) -> String {
    format!("{i:04}")
}

struct TrainCli {
    stage: u8,
    dataset: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    init: Option<PathBuf>,
    iterations: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    decay_factor: Option<f64>,
    decay_interval: Option<usize>,
    seed: Option<u64>,
    views: Option<usize>,
    refinement: String,
    aggregator: String,
    no_first_aggregation: bool,
    plane_args: PlaneArgs,
}

fn run_train(args: TrainCli) -> anyhow::Result<()> {
    let mut cfg = if args.stage == 1 {
        TrainConfig::desk_stage1()
    } else {
        TrainConfig::desk_stage2()
    };
    cfg.d_min = args.plane_args.d_min;
    cfg.delta = args.plane_args.delta;
    cfg.plane_count = args.plane_args.planes;

    if let Some(path) = &args.config {
        let kv = parse_kv_file(path)?;
        for (key, slot) in [
            ("learning_rate", &mut cfg.learning_rate),
            ("decay_factor", &mut cfg.decay_factor),
            ("d_min", &mut cfg.d_min),
            ("delta", &mut cfg.delta),
        ] {
            if let Some(v) = kv.get(key) {
                *slot = v.parse().with_context(|| format!("config key {key}"))?;
            }
        }
        for (key, slot) in [
            ("decay_interval", &mut cfg.decay_interval),
            ("batch_size", &mut cfg.batch_size),
            ("iterations", &mut cfg.iterations),
            ("n_views", &mut cfg.n_views),
            ("plane_count", &mut cfg.plane_count),
        ] {
            if let Some(v) = kv.get(key) {
                *slot = v.parse().with_context(|| format!("config key {key}"))?;
            }
        }
        if let Some(v) = kv.get("seed") {
            cfg.seed = v.parse().context("config key seed")?;
        }
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.decay_factor {
        cfg.decay_factor = v;
    }
    if let Some(v) = args.decay_interval {
        cfg.decay_interval = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.views {
        cfg.n_views = v;
    }

    let samples = load_dataset(&args.dataset)?;

    let mut model: MvsModel<f32> = if args.stage == 2 {
        let Some(init) = &args.init else {
            bail!("stage 2 requires --init with a stage-1 checkpoint")
        };
        let (model, _) = load_checkpoint::<f32>(init)?;
        model
    } else if let Some(init) = &args.init {
        let (model, _) = load_checkpoint::<f32>(init)?;
        model
    } else {
        let model_cfg = ModelConfig {
            net: NetworkConfig {
                plane_count: cfg.plane_count,
                ..NetworkConfig::desk()
            },
            refinement: RefinementKind::parse(&args.refinement)?,
            aggregator: AggregatorKind::parse(&args.aggregator)?,
            aggregate_after_crm: !args.no_first_aggregation,
            detach_geometric_guidance: true,
        };
        MvsModel::new(model_cfg, cfg.seed)?
    };

    let log = if args.stage == 1 {
        train_stage1(&mut model, &samples, &cfg)?
    } else {
        train_stage2(&mut model, &samples, &cfg)?
    };

    std::fs::create_dir_all(&args.out)?;
    save_checkpoint(&model, args.stage, &args.out.join("model.ckpt"))?;
    write_log(&log, &args.out.join("train_log.csv"))?;
    write_snapshot(
        &args.out,
        &[
            ("subcommand", "train".into()),
            ("stage", args.stage.to_string()),
            ("dataset", args.dataset.display().to_string()),
            (
                "init",
                args.init
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("iterations", cfg.iterations.to_string()),
            ("batch_size", cfg.batch_size.to_string()),
            ("learning_rate", cfg.learning_rate.to_string()),
            ("decay_factor", cfg.decay_factor.to_string()),
            ("decay_interval", cfg.decay_interval.to_string()),
            ("seed", cfg.seed.to_string()),
            ("n_views", cfg.n_views.to_string()),
            ("d_min", cfg.d_min.to_string()),
            ("delta", cfg.delta.to_string()),
            ("plane_count", cfg.plane_count.to_string()),
            ("refinement", args.refinement),
            ("aggregator", args.aggregator),
            (
                "aggregate_after_crm",
                (!args.no_first_aggregation).to_string(),
            ),
            (
                "optimizer",
                "rmsprop(rho=0.9, eps=1e-10, momentum=0)".into(),
            ),
        ],
    )?;
    let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "stage {} finished: {} iterations, final loss {last:.6}",
        args.stage, cfg.iterations
    );
    println!("checkpoint: {}", args.out.join("model.ckpt").display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            out,
            count,
            seed,
            views,
            width,
            height,
            plane_args,
        } => {
            let planes =
                DisparityHypotheses::new(plane_args.d_min, plane_args.delta, plane_args.planes)?;
            let sampler = SceneSampler {
                image_size: (width, height),
                planes,
                ..SceneSampler::desk(views)
            };
            std::fs::create_dir_all(&out)?;
            let mut names = Vec::new();
            for i in 0..count {
                let spec = sampler.sample(seed.wrapping_add(i as u64))?;
                let sample = generate_scene(&spec)?;
                let name = format!("sample_{}", sample_id(i));
                write_sample(&sample, &out.join(&name))?;
                names.push(name);
            }
            write_index(&out, &names)?;
            write_snapshot(
                &out,
                &[
                    ("subcommand", "generate".into()),
                    ("count", count.to_string()),
                    ("seed", seed.to_string()),
                    ("views", views.to_string()),
                    ("width", width.to_string()),
                    ("height", height.to_string()),
                    ("d_min", plane_args.d_min.to_string()),
                    ("delta", plane_args.delta.to_string()),
                    ("planes", plane_args.planes.to_string()),
                ],
            )?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train {
            stage,
            dataset,
            out,
            config,
            init,
            iterations,
            batch,
            lr,
            decay_factor,
            decay_interval,
            seed,
            views,
            refinement,
            aggregator,
            no_first_aggregation,
            plane_args,
        } => run_train(TrainCli {
            stage,
            dataset,
            out,
            config,
            init,
            iterations,
            batch,
            lr,
            decay_factor,
            decay_interval,
            seed,
            views,
            refinement,
            aggregator,
            no_first_aggregation,
            plane_args,
        })?,
        Command::Infer {
            dataset,
            checkpoint,
            out,
            views,
            plane_args,
        } => {
            let (model, _) = load_checkpoint::<f32>(&checkpoint)?;
            let planes = plane_args.hypotheses()?;
            let paths = read_index(&dataset)?;
            std::fs::create_dir_all(&out)?;
            for (i, path) in paths.iter().enumerate() {
                let sample = read_sample(path)?;
                let pred = infer_disparity(&model, &sample, views, &planes, BranchExec::Parallel)?;
                let name = sample_id(i);
                mvstereo::dataset::write_pfm(&pred.data, &out.join(format!("{name}.pfm")))?;
                let png = colorize(&pred, planes.first() as f64, planes.last() as f64);
                save_rgb(&png, &out.join(format!("{name}.png")))?;
            }
            write_snapshot(
                &out,
                &[
                    ("subcommand", "infer".into()),
                    ("dataset", dataset.display().to_string()),
                    ("checkpoint", checkpoint.display().to_string()),
                    ("views", views.to_string()),
                    ("d_min", plane_args.d_min.to_string()),
                    ("delta", plane_args.delta.to_string()),
                    ("planes", plane_args.planes.to_string()),
                ],
            )?;
            println!("wrote {} disparity maps to {}", paths.len(), out.display());
        }
        Command::Eval {
            dataset,
            checkpoint,
            out,
            views,
            delta_threshold,
            plane_args,
        } => {
            let (model, _) = load_checkpoint::<f32>(&checkpoint)?;
            let planes = plane_args.hypotheses()?;
            let thr = delta_threshold.unwrap_or(plane_args.delta);
            let samples: Vec<_> = load_dataset(&dataset)?;
            let (agg, per_sample) = evaluate_dataset(&model, &samples, views, thr, &planes)?;
            std::fs::create_dir_all(&out)?;
            let ids: Vec<String> = (0..per_sample.len()).map(sample_id).collect();
            write_metrics_csv(&per_sample, &ids, &out.join("metrics.csv"))?;
            write_snapshot(
                &out,
                &[
                    ("subcommand", "eval".into()),
                    ("dataset", dataset.display().to_string()),
                    ("checkpoint", checkpoint.display().to_string()),
                    ("views", views.to_string()),
                    ("delta_threshold", thr.to_string()),
                    ("d_min", plane_args.d_min.to_string()),
                    ("delta", plane_args.delta.to_string()),
                    ("planes", plane_args.planes.to_string()),
                ],
            )?;
            println!("{}", MetricReport::table_header());
            println!("{}", agg.table_row("checkpoint"));
            println!("per-sample metrics: {}", out.join("metrics.csv").display());
        }
        Command::Fuse {
            dataset,
            sample,
            checkpoint,
            out,
            min_consistent,
            tolerance,
            plane_args,
        } => {
            let paths = read_index(&dataset)?;
            let Some(path) = paths.get(sample) else {
                bail!(
                    "dataset has {} samples, index {sample} out of range",
                    paths.len()
                )
            };
            let s = read_sample(path)?;
            let planes = plane_args.hypotheses()?;
            let n_views = s.view_count();
            let tol = tolerance.unwrap_or(plane_args.delta) as f32;
            let min_ok = min_consistent.unwrap_or(if n_views <= 2 { 1 } else { 2 });

            // One disparity map per view: estimated (each view as reference
            // against the others) or the stored ground truth.
            let views: Vec<_> = if let Some(ckpt) = &checkpoint {
                let (model, _) = load_checkpoint::<f32>(ckpt)?;
                let mut maps = Vec::new();
                for v in 0..n_views {
                    let mut rotated = s.clone();
                    rotated.images.rotate_left(v);
                    rotated.cameras.rotate_left(v);
                    rotated.gt_disparity.rotate_left(v);
                    let pred = infer_disparity(
                        &model,
                        &rotated,
                        n_views - 1,
                        &planes,
                        BranchExec::Parallel,
                    )?;
                    maps.push((pred, s.cameras[v].clone()));
                }
                maps
            } else {
                s.gt_disparity
                    .iter()
                    .cloned()
                    .zip(s.cameras.iter().cloned())
                    .collect()
            };
            let filtered = consistency_filter(&views, min_ok, tol)?;
            let cloud = fuse_point_cloud(&filtered, &views, &s.images, tol)?;
            if cloud.is_empty() {
                eprintln!("warning: fused cloud is empty");
            }
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            write_ply(&cloud, &out)?;
            let snap_dir = out.parent().unwrap_or(Path::new("."));
            write_snapshot(
                snap_dir,
                &[
                    ("subcommand", "fuse".into()),
                    ("dataset", dataset.display().to_string()),
                    ("sample", sample.to_string()),
                    (
                        "checkpoint",
                        checkpoint
                            .map(|p| p.display().to_string())
                            .unwrap_or_else(|| "ground-truth".into()),
                    ),
                    ("min_consistent", min_ok.to_string()),
                    ("tolerance", tol.to_string()),
                ],
            )?;
            println!("{} points -> {}", cloud.len(), out.display());
        }
        Command::Gradcheck { seed, out } => {
            let results = mvstereo::gradcheck::run_all(seed);
            let mut failures = 0;
            for r in &results {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "[gradcheck] {:<24} max rel err {:>12.3e}  {status}",
                    r.name, r.max_rel_err
                );
                if !r.passed() {
                    failures += 1;
                }
            }
            if let Some(dir) = out {
                write_snapshot(
                    &dir,
                    &[("subcommand", "gradcheck".into()), ("seed", seed.to_string())],
                )?;
            }
            if failures > 0 {
                bail!("{failures} gradient checks exceeded the tolerance");
            }
        }
        Command::Selftest { out } => {
            let results = mvstereo::selftest::run_all();
            let mut failures = Vec::new();
            for r in &results {
                match &r.error {
                    None => println!("[selftest] {:<52} PASS", r.name),
                    Some(e) => {
                        println!("[selftest] {:<52} FAIL: {e}", r.name);
                        failures.push(r.name);
                    }
                }
            }
            if let Some(dir) = out {
                write_snapshot(&dir, &[("subcommand", "selftest".into())])?;
            }
            if !failures.is_empty() {
                bail!("violated invariants: {}", failures.join(", "));
            }
        }
    }
    Ok(())
}

fn save_rgb(image: &ndarray::Array3<u8>, path: &Path) -> anyhow::Result<()> {
    let (_, h, w) = image.dim();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            rgb.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]]),
            );
        }
    }
    rgb.save(path)?;
    Ok(())
}

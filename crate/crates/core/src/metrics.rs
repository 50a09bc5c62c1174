//! Depth and disparity evaluation metrics plus the dataset evaluation
//! harness.
//!
//! L1, L1-rel and Sc-inv are computed on depth (the reciprocal of
//! disparity); L1-inv on disparity. Inlier ratios count pixels whose
//! disparity error stays below k times the threshold for k in {1, 3, 5, 10}.

use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::dataset::MVSample;
use crate::error::{Error, Result};
use crate::geometry::DisparityHypotheses;
use crate::maps::DisparityMap;
use crate::net::{
    image_to_float, multi_view_forward, BranchExec, MvsModel, ViewInput, FEATURE_SCALE,
};
use crate::scalar::Scalar;
use crate::train::node_to_map;

pub const INLIER_KS: [u32; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub l1: f64,
    pub l1_inv: f64,
    pub l1_rel: f64,
    pub sc_inv: f64,
    /// Percentages for k in {1, 3, 5, 10}, ordered like [`INLIER_KS`].
    pub inlier: [f64; 4],
    pub pixel_count: usize,
}

impl MetricReport {
    pub fn zeroed() -> Self {
        MetricReport {
            l1: 0.0,
            l1_inv: 0.0,
            l1_rel: 0.0,
            sc_inv: 0.0,
            inlier: [0.0; 4],
            pixel_count: 0,
        }
    }

    pub fn csv_row(&self, sample_id: &str) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            sample_id,
            self.l1,
            self.l1_inv,
            self.l1_rel,
            self.sc_inv,
            self.inlier[0],
            self.inlier[1],
            self.inlier[2],
            self.inlier[3]
        )
    }

    /// Table row matching the evaluation table column order.
    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{label:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            self.l1,
            self.l1_inv,
            self.l1_rel,
            self.sc_inv,
            self.inlier[0],
            self.inlier[1],
            self.inlier[2],
            self.inlier[3]
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<24} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}",
            "method", "L1", "L1-inv", "L1-rel", "Sc-inv", "<1d", "<3d", "<5d", "<10d"
        )
    }
}

/// Computes every metric over jointly valid pixels (both maps valid, finite
/// and positive). With no valid pixels the report carries pixel_count 0 and
/// NaN metrics so the condition cannot go unnoticed.
pub fn compute_metrics<T: Scalar>(
    pred: &DisparityMap<T>,
    gt: &DisparityMap<T>,
    delta_threshold: f64,
) -> Result<MetricReport> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if !(delta_threshold > 0.0) {
        return Err(Error::invalid("delta threshold must be positive"));
    }
    let mut count = 0usize;
    let mut sum_l1 = 0.0;
    let mut sum_inv = 0.0;
    let mut sum_rel = 0.0;
    let mut sum_g = 0.0;
    let mut sum_g2 = 0.0;
    let mut inlier_counts = [0usize; 4];
    for ((p, g), (mp, mg)) in pred
        .data
        .iter()
        .zip(gt.data.iter())
        .zip(pred.mask.iter().zip(gt.mask.iter()))
    {
        let (p, g) = (p.as_f64(), g.as_f64());
        if !(*mp && *mg) || !(p > 0.0) || !(g > 0.0) || !p.is_finite() || !g.is_finite() {
            continue;
        }
        count += 1;
        let (zp, zg) = (1.0 / p, 1.0 / g);
        sum_l1 += (zp - zg).abs();
        sum_inv += (p - g).abs();
        sum_rel += (zp - zg).abs() / zg;
        let lg = zp.ln() - zg.ln();
        sum_g += lg;
        sum_g2 += lg * lg;
        for (slot, k) in inlier_counts.iter_mut().zip(INLIER_KS) {
            if (p - g).abs() < k as f64 * delta_threshold {
                *slot += 1;
            }
        }
    }
    if count == 0 {
        return Ok(MetricReport {
            l1: f64::NAN,
            l1_inv: f64::NAN,
            l1_rel: f64::NAN,
            sc_inv: f64::NAN,
            inlier: [f64::NAN; 4],
            pixel_count: 0,
        });
    }
    let n = count as f64;
    let mean_g = sum_g / n;
    let var = (sum_g2 / n - mean_g * mean_g).max(0.0);
    let mut inlier = [0.0; 4];
    for (o, c) in inlier.iter_mut().zip(inlier_counts) {
        *o = 100.0 * c as f64 / n;
    }
    Ok(MetricReport {
        l1: sum_l1 / n,
        l1_inv: sum_inv / n,
        l1_rel: sum_rel / n,
        sc_inv: var.sqrt(),
        inlier,
        pixel_count: count,
    })
}

/// Mean of per-sample reports (equal sample weighting); pixel counts sum.
pub fn aggregate_reports(reports: &[MetricReport]) -> MetricReport {
    if reports.is_empty() {
        return MetricReport::zeroed();
    }
    let n = reports.len() as f64;
    let mut agg = MetricReport::zeroed();
    for r in reports {
        agg.l1 += r.l1 / n;
        agg.l1_inv += r.l1_inv / n;
        agg.l1_rel += r.l1_rel / n;
        agg.sc_inv += r.sc_inv / n;
        for k in 0..4 {
            agg.inlier[k] += r.inlier[k] / n;
        }
        agg.pixel_count += r.pixel_count;
    }
    agg
}

/// Runs multi-view inference on one sample and returns the full-resolution
/// disparity map (bilinear upsampling of the feature-resolution estimate).
pub fn infer_disparity<T: Scalar>(
    model: &MvsModel<T>,
    sample: &MVSample<T>,
    n_views: usize,
    planes: &DisparityHypotheses<T>,
    exec: BranchExec,
) -> Result<DisparityMap<T>> {
    if sample.source_count() < n_views {
        return Err(Error::invalid(format!(
            "sample has {} source views, inference wants {}",
            sample.source_count(),
            n_views
        )));
    }
    let mut tape = Tape::new();
    let binding = model.params.bind_frozen(&mut tape);
    let reference = ViewInput {
        image: image_to_float(&sample.images[0]),
        camera: sample.cameras[0].clone(),
    };
    let sources: Vec<ViewInput<T>> = (1..=n_views)
        .map(|v| ViewInput {
            image: image_to_float(&sample.images[v]),
            camera: sample.cameras[v].clone(),
        })
        .collect();
    let out = multi_view_forward(model, &mut tape, &binding, &reference, &sources, planes, exec)?;
    let quarter = node_to_map(&tape, out.d_final);
    let (w, h) = sample.image_size();
    let _ = FEATURE_SCALE;
    Ok(quarter.upsample_bilinear(h, w))
}

/// Per-sample metrics plus the aggregate over a dataset.
pub fn evaluate_dataset<T: Scalar>(
    model: &MvsModel<T>,
    dataset: &[MVSample<T>],
    n_views: usize,
    delta_threshold: f64,
    planes: &DisparityHypotheses<T>,
) -> Result<(MetricReport, Vec<MetricReport>)> {
    let mut per_sample = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let pred = infer_disparity(model, sample, n_views, planes, BranchExec::Sequential)?;
        per_sample.push(compute_metrics(&pred, &sample.gt_disparity[0], delta_threshold)?);
    }
    Ok((aggregate_reports(&per_sample), per_sample))
}

/// Writes the per-sample CSV.
pub fn write_metrics_csv(reports: &[MetricReport], ids: &[String], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "sample_id,l1,l1_inv,l1_rel,sc_inv,in1,in3,in5,in10")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for (r, id) in reports.iter().zip(ids) {
        writeln!(f, "{}", r.csv_row(id)).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(seed: u64, lo: f64, hi: f64) -> DisparityMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DisparityMap::dense(Array2::from_shape_fn((12, 10), |_| rng.gen_range(lo..hi)))
    }

    /// Scalar per-pixel reference implementation.
    fn oracle(pred: &DisparityMap<f64>, gt: &DisparityMap<f64>, thr: f64) -> MetricReport {
        let mut vals: Vec<(f64, f64)> = Vec::new();
        for ((p, g), (mp, mg)) in pred
            .data
            .iter()
            .zip(gt.data.iter())
            .zip(pred.mask.iter().zip(gt.mask.iter()))
        {
            if *mp && *mg && *p > 0.0 && *g > 0.0 {
                vals.push((*p, *g));
            }
        }
        let n = vals.len() as f64;
        let l1 = vals.iter().map(|(p, g)| (1.0 / p - 1.0 / g).abs()).sum::<f64>() / n;
        let l1_inv = vals.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
        let l1_rel = vals
            .iter()
            .map(|(p, g)| (1.0 / p - 1.0 / g).abs() / (1.0 / g))
            .sum::<f64>()
            / n;
        let gs: Vec<f64> = vals.iter().map(|(p, g)| (1.0 / p).ln() - (1.0 / g).ln()).collect();
        let mean = gs.iter().sum::<f64>() / n;
        let var = gs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut inlier = [0.0; 4];
        for (slot, k) in inlier.iter_mut().zip(INLIER_KS) {
            let c = vals
                .iter()
                .filter(|(p, g)| (p - g).abs() < k as f64 * thr)
                .count();
            *slot = 100.0 * c as f64 / n;
        }
        MetricReport {
            l1,
            l1_inv,
            l1_rel,
            sc_inv: var.sqrt(),
            inlier,
            pixel_count: vals.len(),
        }
    }

    #[test]
    fn perfect_prediction_is_all_zero_errors() {
        let gt = rand_map(1, 0.2, 0.8);
        let r = compute_metrics(&gt, &gt, 0.05).unwrap();
        assert_eq!(r.l1, 0.0);
        assert_eq!(r.l1_inv, 0.0);
        assert_eq!(r.l1_rel, 0.0);
        assert!(r.sc_inv < 1e-12);
        for v in r.inlier {
            assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn global_depth_scale_gives_zero_scinv() {
        let gt = rand_map(2, 0.2, 0.8);
        // Depth scaled by c means disparity divided by c.
        let c = 1.7;
        let pred = DisparityMap::dense(gt.data.map(|v| v / c));
        let r = compute_metrics(&pred, &gt, 0.05).unwrap();
        assert!(r.sc_inv < 1e-6, "sc_inv {}", r.sc_inv);
        assert!((r.l1_rel - (c - 1.0)).abs() < 1e-9, "l1_rel {}", r.l1_rel);
    }

    #[test]
    fn metrics_match_scalar_oracle() {
        for seed in 0..10 {
            let pred = rand_map(100 + seed, 0.15, 0.9);
            let gt = rand_map(200 + seed, 0.15, 0.9);
            let r = compute_metrics(&pred, &gt, 0.04).unwrap();
            let o = oracle(&pred, &gt, 0.04);
            assert!((r.l1 - o.l1).abs() < 1e-6);
            assert!((r.l1_inv - o.l1_inv).abs() < 1e-6);
            assert!((r.l1_rel - o.l1_rel).abs() < 1e-6);
            assert!((r.sc_inv - o.sc_inv).abs() < 1e-6);
            for k in 0..4 {
                assert!((r.inlier[k] - o.inlier[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inlier_ratios_monotone_in_k() {
        let pred = rand_map(7, 0.15, 0.9);
        let gt = rand_map(8, 0.15, 0.9);
        let r = compute_metrics(&pred, &gt, 0.02).unwrap();
        for w in r.inlier.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn invalid_pixels_never_contribute() {
        let pred = rand_map(9, 0.15, 0.9);
        let mut gt = rand_map(10, 0.15, 0.9);
        let full = compute_metrics(&pred, &gt, 0.05).unwrap();
        // Invalidate pixels with the largest disparity error; metrics change.
        let mut worst = (0usize, 0usize);
        let mut worst_err = -1.0;
        for ((y, x), v) in gt.data.indexed_iter() {
            let e = (pred.data[[y, x]] - v).abs();
            if e > worst_err {
                worst_err = e;
                worst = (y, x);
            }
        }
        gt.mask[[worst.0, worst.1]] = false;
        let masked = compute_metrics(&pred, &gt, 0.05).unwrap();
        assert_eq!(masked.pixel_count, full.pixel_count - 1);
        assert!(masked.l1_inv < full.l1_inv);
    }

    #[test]
    fn no_valid_pixels_flagged_by_count() {
        let pred = rand_map(11, 0.15, 0.9);
        let mut gt = rand_map(12, 0.15, 0.9);
        gt.mask.fill(false);
        let r = compute_metrics(&pred, &gt, 0.05).unwrap();
        assert_eq!(r.pixel_count, 0);
        assert!(r.l1.is_nan());
    }

    #[test]
    fn aggregate_is_mean_of_reports() {
        let a = MetricReport {
            l1: 1.0,
            l1_inv: 0.1,
            l1_rel: 0.2,
            sc_inv: 0.3,
            inlier: [10.0, 20.0, 30.0, 40.0],
            pixel_count: 5,
        };
        let mut b = a.clone();
        b.l1 = 3.0;
        b.pixel_count = 7;
        let agg = aggregate_reports(&[a, b]);
        assert!((agg.l1 - 2.0).abs() < 1e-12);
        assert_eq!(agg.pixel_count, 12);
    }
}

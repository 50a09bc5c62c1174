//! Loss computation with intermediate supervision, the adaptive optimizer
//! and the two-stage training protocol: the two-view network is trained from
//! scratch first, then the aggregation modules are trained on multi-view
//! samples with everything else frozen.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, NodeId, Tape};
use crate::dataset::MVSample;
use crate::error::{Error, Result};
use crate::geometry::DisparityHypotheses;
use crate::maps::DisparityMap;
use crate::net::{
    image_to_float, multi_view_forward, two_view_forward, BranchExec, MvsModel, TwoViewOutput,
    ViewInput, FEATURE_SCALE,
};
use crate::nn::{Binding, Params};
use crate::scalar::Scalar;

/// Weights of the training loss: lambda for the refined output, one omega
/// per intermediate regularization stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights<T> {
    pub lambda: T,
    pub omega: Vec<T>,
}

impl<T: Scalar> LossWeights<T> {
    /// lambda = 0.8 with stack weights (0.2, 0.3, 0.5); fewer stacks keep
    /// the later (stronger) weights.
    pub fn paper_defaults(stacks: usize) -> Self {
        let base = [0.2, 0.3, 0.5];
        let omega: Vec<T> = if stacks <= 3 {
            base[3 - stacks..].iter().map(|&v| T::of(v)).collect()
        } else {
            std::iter::repeat(0.2)
                .take(stacks - 3)
                .chain(base)
                .map(T::of)
                .collect()
        };
        LossWeights {
            lambda: T::of(0.8),
            omega,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.as_f64() < 0.0 || self.omega.iter().any(|w| w.as_f64() < 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Mean absolute disparity error over jointly valid pixels. Returns the
/// value and a flag that is set when no pixel was valid (loss defined 0).
pub fn l1_loss<T: Scalar>(pred: &DisparityMap<T>, gt: &DisparityMap<T>) -> Result<(T, bool)> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for ((p, g), (mp, mg)) in pred
        .data
        .iter()
        .zip(gt.data.iter())
        .zip(pred.mask.iter().zip(gt.mask.iter()))
    {
        if *mp && *mg {
            total += (*p - *g).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Ok((T::zero(), true));
    }
    Ok((total / T::of_usize(count), false))
}

/// Training loss on the tape: lambda * l1(refined) plus the weighted
/// intermediate losses.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &TwoViewOutput,
    gt: Arc<ArrayD<T>>,
    mask: Arc<ArrayD<T>>,
    weights: &LossWeights<T>,
) -> Result<NodeId> {
    weights.validate()?;
    if out.intermediates.len() != weights.omega.len() {
        return Err(Error::invalid(format!(
            "{} intermediate outputs vs {} omega weights",
            out.intermediates.len(),
            weights.omega.len()
        )));
    }
    let refined = tape.masked_l1(out.d_refined, gt.clone(), mask.clone());
    let mut loss = tape.scale(refined, weights.lambda);
    for (&inter, &w) in out.intermediates.iter().zip(&weights.omega) {
        let li = tape.masked_l1(inter, gt.clone(), mask.clone());
        let scaled = tape.scale(li, w);
        loss = tape.add(loss, scaled);
    }
    Ok(loss)
}

/// RMSProp with the conventional defaults of the optimizer family:
/// decay 0.9, epsilon 1e-10, no momentum.
pub struct RmsProp<T> {
    pub rho: T,
    pub eps: T,
    mean_square: Vec<ArrayD<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(params: &Params<T>) -> Self {
        RmsProp {
            rho: T::of(0.9),
            eps: T::of(1e-10),
            mean_square: params
                .iter()
                .map(|(_, v)| ArrayD::from_elem(v.raw_dim(), T::zero()))
                .collect(),
        }
    }

    /// Applies one update from accumulated gradients (indexed like the
    /// parameter store; None entries are skipped).
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Option<ArrayD<T>>], lr: T) {
        for i in 0..grads.len() {
            let Some(g) = &grads[i] else { continue };
            let ms = &mut self.mean_square[i];
            let one_minus = T::one() - self.rho;
            ndarray::Zip::from(&mut *ms).and(g).for_each(|m, &gv| {
                *m = self.rho * *m + one_minus * gv * gv;
            });
            let value = params.value_mut(crate::nn::ParamId(i));
            ndarray::Zip::from(value).and(&*ms).and(g).for_each(|p, &m, &gv| {
                *p = *p - lr * gv / (m.sqrt() + self.eps);
            });
        }
    }
}

/// Training stage and schedule configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Source views consumed per sample in stage 2.
    pub n_views: usize,
    /// Plane hypotheses used for training.
    pub d_min: f64,
    pub delta: f64,
    pub plane_count: usize,
}

impl TrainConfig {
    pub fn desk_stage1() -> Self {
        TrainConfig {
            stage: 1,
            learning_rate: 1e-3,
            decay_factor: 0.9,
            decay_interval: 500,
            batch_size: 2,
            iterations: 2000,
            seed: 1,
            n_views: 1,
            d_min: 0.05,
            delta: 0.05,
            plane_count: 16,
        }
    }

    pub fn desk_stage2() -> Self {
        TrainConfig {
            stage: 2,
            iterations: 1000,
            n_views: 3,
            ..Self::desk_stage1()
        }
    }

    /// Learning rate at a 1-based step: multiplied by the decay factor
    /// every decay_interval steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        let k = (step.saturating_sub(1)) / self.decay_interval.max(1);
        self.learning_rate * self.decay_factor.powi(k as i32)
    }

    pub fn planes<T: Scalar>(&self) -> Result<DisparityHypotheses<T>> {
        DisparityHypotheses::new(T::of(self.d_min), T::of(self.delta), self.plane_count)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::invalid("stage must be 1 or 2"));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::invalid("batch size and iterations must be positive"));
        }
        if self.stage == 2 && self.n_views < 1 {
            return Err(Error::invalid("stage 2 needs at least one source view"));
        }
        Ok(())
    }
}

/// One line of the append-only training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
}

/// Writes records as CSV "step,stage,loss,lr".
pub fn write_log(records: &[LogRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "step,stage,loss,lr").map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in records {
        writeln!(f, "{},{},{},{}", r.step, r.stage, r.loss, r.lr)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Ground truth of the reference view downsampled to feature resolution,
/// as mask/value constant arrays for the tape loss.
pub fn quarter_gt<T: Scalar>(sample: &MVSample<T>) -> (Arc<ArrayD<T>>, Arc<ArrayD<T>>) {
    let q = sample.gt_disparity[0].downsample_nearest_valid(FEATURE_SCALE);
    let gt = q.data.clone().into_dyn();
    let mask: ArrayD<T> = q
        .mask
        .map(|&m| if m { T::one() } else { T::zero() })
        .into_dyn();
    (Arc::new(gt), Arc::new(mask))
}

fn view_input<T: Scalar>(sample: &MVSample<T>, view: usize) -> ViewInput<T> {
    ViewInput {
        image: image_to_float(&sample.images[view]),
        camera: sample.cameras[view].clone(),
    }
}

fn collect_param_grads<T: Scalar>(
    grads: &mut Grads<T>,
    binding: &Binding,
    accum: &mut [Option<ArrayD<T>>],
) {
    for (i, &node) in binding.nodes().iter().enumerate() {
        if let Some(g) = grads.take(node) {
            match &mut accum[i] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }
    }
}

fn scale_grads<T: Scalar>(accum: &mut [Option<ArrayD<T>>], factor: T) {
    for g in accum.iter_mut().flatten() {
        g.mapv_inplace(|v| v * factor);
    }
}

/// Deterministic shuffled sample order: reshuffled each epoch from a seeded
/// generator, so a fixed seed fixes the data order.
fn epoch_order(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

/// Stage 1: trains every two-view parameter from scratch on two-view pairs
/// (the first source view of each sample).
pub fn train_stage1<T: Scalar>(
    model: &mut MvsModel<T>,
    dataset: &[MVSample<T>],
    cfg: &TrainConfig,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let planes = cfg.planes::<T>()?;
    let weights = LossWeights::paper_defaults(model.crm.stack_count());
    let mut optimizer = RmsProp::new(&model.params);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut order = Vec::new();
    let mut cursor = 0usize;
    let mut log = Vec::with_capacity(cfg.iterations);

    for step in 1..=cfg.iterations {
        let lr = T::of(cfg.lr_at(step));
        let mut accum: Vec<Option<ArrayD<T>>> = vec![None; model.params.len()];
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order = epoch_order(&mut data_rng, dataset.len());
                cursor = 0;
            }
            let sample = &dataset[order[cursor]];
            cursor += 1;

            let mut tape = Tape::new();
            let binding = model.params.bind_all(&mut tape);
            let out = two_view_forward(
                model,
                &mut tape,
                &binding,
                &view_input(sample, 0),
                &view_input(sample, 1),
                &planes,
            )?;
            let (gt, mask) = quarter_gt(sample);
            let loss = total_loss(&mut tape, &out, gt, mask, &weights)?;
            batch_loss += tape.value(loss).as_slice().unwrap()[0].as_f64();
            let mut grads = tape.backward(loss);
            collect_param_grads(&mut grads, &binding, &mut accum);
        }
        scale_grads(&mut accum, T::one() / T::of_usize(cfg.batch_size));
        optimizer.step(&mut model.params, &accum, lr);
        log.push(LogRecord {
            step,
            stage: 1,
            loss: batch_loss / cfg.batch_size as f64,
            lr: lr.as_f64(),
        });
    }
    Ok(log)
}

/// Stage 2: trains only the aggregation-module parameters on multi-view
/// samples; every two-view weight stays bit-identical and the intermediate
/// losses are disabled.
pub fn train_stage2<T: Scalar>(
    model: &mut MvsModel<T>,
    dataset: &[MVSample<T>],
    cfg: &TrainConfig,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::invalid("train_stage2 requires a stage-2 config"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if model.params.iter().all(|(n, _)| !MvsModel::<T>::is_aggregation_param(n)) {
        return Err(Error::invalid(
            "model has no aggregation parameters to train (mean pooling?)",
        ));
    }
    for s in dataset {
        if s.source_count() < cfg.n_views {
            return Err(Error::invalid(format!(
                "sample has {} source views, stage 2 needs {}",
                s.source_count(),
                cfg.n_views
            )));
        }
    }
    let planes = cfg.planes::<T>()?;
    let lambda = T::of(0.8);
    let mut optimizer = RmsProp::new(&model.params);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut order = Vec::new();
    let mut cursor = 0usize;
    let mut log = Vec::with_capacity(cfg.iterations);

    for step in 1..=cfg.iterations {
        let lr = T::of(cfg.lr_at(step));
        let mut accum: Vec<Option<ArrayD<T>>> = vec![None; model.params.len()];
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order = epoch_order(&mut data_rng, dataset.len());
                cursor = 0;
            }
            let sample = &dataset[order[cursor]];
            cursor += 1;

            let mut tape = Tape::new();
            let binding = model
                .params
                .bind(&mut tape, MvsModel::<T>::is_aggregation_param);
            let sources: Vec<ViewInput<T>> = (1..=cfg.n_views)
                .map(|v| view_input(sample, v))
                .collect();
            let out = multi_view_forward(
                model,
                &mut tape,
                &binding,
                &view_input(sample, 0),
                &sources,
                &planes,
                BranchExec::Sequential,
            )?;
            let (gt, mask) = quarter_gt(sample);
            let l1 = tape.masked_l1(out.d_final, gt, mask);
            let loss = tape.scale(l1, lambda);
            batch_loss += tape.value(loss).as_slice().unwrap()[0].as_f64();
            let mut grads = tape.backward(loss);
            collect_param_grads(&mut grads, &binding, &mut accum);
        }
        scale_grads(&mut accum, T::one() / T::of_usize(cfg.batch_size));
        optimizer.step(&mut model.params, &accum, lr);
        log.push(LogRecord {
            step,
            stage: 2,
            loss: batch_loss / cfg.batch_size as f64,
            lr: lr.as_f64(),
        });
    }
    Ok(log)
}

/// Disparity map straight from a [H, W] tape node value.
pub fn node_to_map<T: Scalar>(tape: &Tape<T>, node: NodeId) -> DisparityMap<T> {
    let arr: Array2<T> = tape
        .value(node)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("node must be a 2-D map");
    DisparityMap::dense(arr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn map(vals: &[[f64; 2]; 2]) -> DisparityMap<f64> {
        DisparityMap::dense(arr2(vals))
    }

    #[test]
    fn l1_basic_cases() {
        let gt = map(&[[0.2, 0.4], [0.6, 0.8]]);
        assert_eq!(l1_loss(&gt, &gt).unwrap(), (0.0, false));
        let off = DisparityMap::dense(gt.data.map(|v| v + 0.5));
        let (l, warned) = l1_loss(&off, &gt).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        assert!(!warned);
    }

    #[test]
    fn l1_masked_matches_loop_oracle() {
        let pred = map(&[[0.3, 0.7], [0.9, 0.1]]);
        let mut gt = map(&[[0.2, 0.4], [0.6, 0.8]]);
        gt.mask[[0, 1]] = false;
        gt.mask[[1, 0]] = false;
        let (l, _) = l1_loss(&pred, &gt).unwrap();
        let want = ((0.3 - 0.2f64).abs() + (0.1 - 0.8f64).abs()) / 2.0;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn l1_no_valid_pixels_flags() {
        let pred = map(&[[0.3, 0.7], [0.9, 0.1]]);
        let mut gt = map(&[[0.2, 0.4], [0.6, 0.8]]);
        gt.mask.fill(false);
        let (l, warned) = l1_loss(&pred, &gt).unwrap();
        assert_eq!(l, 0.0);
        assert!(warned);
    }

    #[test]
    fn paper_weight_arithmetic() {
        // lambda 0.8 with unit branch errors sums to 0.8 + 0.2 + 0.3 + 0.5.
        let w = LossWeights::<f64>::paper_defaults(3);
        assert_eq!(w.lambda, 0.8);
        let total: f64 = w.lambda + w.omega.iter().sum::<f64>();
        assert!((total - 1.8).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_decays_after_interval() {
        let cfg = TrainConfig {
            decay_interval: 10,
            ..TrainConfig::desk_stage1()
        };
        assert!((cfg.lr_at(1) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(10) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(11) - 0.9e-3).abs() < 1e-15);
        assert!((cfg.lr_at(21) - 0.81e-3).abs() < 1e-15);
    }
}

//! The learned components: feature extraction, cost regularization, the
//! soft-argmax output module, residual cost-volume refinement and the
//! multi-view aggregation wiring.

mod aggregate;
mod crm;
mod fem;
mod forward;
mod output;
mod refine;

pub use aggregate::{
    aam_activate, aam_aggregate, attsets_aggregate, mean_pool_aggregate, AamWeights, AggModule,
};
pub use crm::{CrmNet, Hourglass3d};
pub use fem::FemNet;
pub use forward::{
    image_to_float, multi_view_forward, pad_to_multiple, two_view_forward, BranchExec,
    MultiViewOutput, TwoViewOutput, ViewInput, FEATURE_SCALE,
};
pub use output::OutputModule;
pub use refine::RefineNet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::scalar::Scalar;

/// Structural hyperparameters of the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Channels of the high-level feature map (F); must be even.
    pub feature_channels: usize,
    /// Channels of the low-level feature tap.
    pub low_level_channels: usize,
    /// Number of disparity planes (D).
    pub plane_count: usize,
    /// Stacked encoder-decoders in the cost regularization module.
    pub crm_stacks: usize,
    /// Average-pooling block sizes of the spatial pyramid.
    pub spp_pool_sizes: Vec<usize>,
    /// Base channel width of the 3-D networks.
    pub base_width: usize,
}

impl NetworkConfig {
    /// CPU-trainable defaults for 64x64 inputs.
    pub fn desk() -> Self {
        NetworkConfig {
            feature_channels: 8,
            low_level_channels: 16,
            plane_count: 16,
            crm_stacks: 3,
            spp_pool_sizes: vec![4, 8],
            base_width: 8,
        }
    }

    /// Full-scale sizes; far beyond desk hardware but reachable.
    pub fn full() -> Self {
        NetworkConfig {
            feature_channels: 32,
            low_level_channels: 32,
            plane_count: 128,
            crm_stacks: 3,
            spp_pool_sizes: vec![8, 16, 32, 64],
            base_width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crm_stacks < 1 {
            return Err(Error::invalid("crm_stacks must be at least 1"));
        }
        if self.feature_channels == 0 || self.feature_channels % 2 != 0 {
            return Err(Error::invalid("feature_channels must be positive and even"));
        }
        if self.low_level_channels == 0
            || self.plane_count == 0
            || self.base_width == 0
            || self.spp_pool_sizes.is_empty()
            || self.spp_pool_sizes.iter().any(|&p| p == 0)
        {
            return Err(Error::invalid("all network sizes must be positive"));
        }
        Ok(())
    }
}

/// Which guidance terms feed the refinement network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinementKind {
    /// No refinement stage at all.
    None,
    /// Photometric terms only (drops the geometric volume, geometric error
    /// and visual hull).
    PhotometricOnly,
    /// Everything except the visual hull.
    NoHull,
    Full,
}

impl RefinementKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefinementKind::None => "none",
            RefinementKind::PhotometricOnly => "photometric-only",
            RefinementKind::NoHull => "no-hull",
            RefinementKind::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RefinementKind::None),
            "photometric-only" => Ok(RefinementKind::PhotometricOnly),
            "no-hull" => Ok(RefinementKind::NoHull),
            "full" => Ok(RefinementKind::Full),
            other => Err(Error::invalid(format!("unknown refinement kind {other:?}"))),
        }
    }
}

/// Multi-view fusion module family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorKind {
    MeanPool,
    AttSets,
    Aam,
}

impl AggregatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AggregatorKind::MeanPool => "mean-pool",
            AggregatorKind::AttSets => "attsets",
            AggregatorKind::Aam => "aam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean-pool" => Ok(AggregatorKind::MeanPool),
            "attsets" => Ok(AggregatorKind::AttSets),
            "aam" => Ok(AggregatorKind::Aam),
            other => Err(Error::invalid(format!("unknown aggregator {other:?}"))),
        }
    }
}

/// Complete model description; everything a checkpoint needs to rebuild the
/// parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub net: NetworkConfig,
    pub refinement: RefinementKind,
    pub aggregator: AggregatorKind,
    /// Fuse the filtered cost volumes across branches before refinement
    /// (first aggregation point). When false each branch keeps its local
    /// volume and only the final aggregation point remains.
    pub aggregate_after_crm: bool,
    /// Treat the geometric guidance inputs (geometric cost volume, geometric
    /// error, visual hull) as constants during refinement training.
    pub detach_geometric_guidance: bool,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            net: NetworkConfig::desk(),
            refinement: RefinementKind::Full,
            aggregator: AggregatorKind::Aam,
            aggregate_after_crm: true,
            detach_geometric_guidance: true,
        }
    }

    /// Input channel count of the refinement network.
    pub fn refine_in_channels(&self) -> usize {
        let base = self.net.base_width;
        let low = self.net.low_level_channels;
        match self.refinement {
            RefinementKind::None => 0,
            RefinementKind::PhotometricOnly => base + 2 * low + low,
            RefinementKind::NoHull => base + 2 * low + 2 + low + 1,
            RefinementKind::Full => base + 2 * low + 2 + low + 1 + 1,
        }
    }
}

/// The full model: shared two-view networks plus the aggregation modules.
pub struct MvsModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: Params<T>,
    pub fem: FemNet,
    pub crm: CrmNet,
    pub output: OutputModule,
    pub refine: Option<RefineNet>,
    pub agg1: Option<AggModule>,
    pub agg2: AggModule,
}

impl<T: Scalar> MvsModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.net.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fem = FemNet::new(&mut params, &mut rng, &cfg.net);
        let crm = CrmNet::new(&mut params, &mut rng, &cfg.net);
        let output = OutputModule::new(&mut params, &mut rng, cfg.net.base_width);
        let refine = if cfg.refinement == RefinementKind::None {
            None
        } else {
            Some(RefineNet::new(
                &mut params,
                &mut rng,
                cfg.refine_in_channels(),
                cfg.net.base_width,
            ))
        };
        let agg1 = if cfg.aggregate_after_crm {
            Some(AggModule::new(
                &mut params,
                &mut rng,
                "aam1",
                cfg.aggregator,
                cfg.net.base_width,
            ))
        } else {
            None
        };
        let agg2 = AggModule::new(
            &mut params,
            &mut rng,
            "aam2",
            cfg.aggregator,
            cfg.net.base_width,
        );
        Ok(MvsModel {
            cfg,
            params,
            fem,
            crm,
            output,
            refine,
            agg1,
            agg2,
        })
    }

    /// Names of the aggregation-module parameters, the only ones the second
    /// training stage updates.
    pub fn is_aggregation_param(name: &str) -> bool {
        name.starts_with("aam1.") || name.starts_with("aam2.")
    }
}

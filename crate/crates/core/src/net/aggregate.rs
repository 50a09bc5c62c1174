//! Order-invariant fusion of cost-volume sets: mean pooling, the
//! attention-score baseline with a single activation, and the attentional
//! aggregation module with separate self and cross activations.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv3dLayer, Params};
use crate::scalar::Scalar;

use super::AggregatorKind;

/// Parameter pair of the attentional aggregation module: one activation for
/// the element itself and one shared activation for the rest of the set.
/// Both convolutions start zeroed, so the softmax weights open at exactly
/// 1/N and the module equals mean pooling until training moves it.
#[derive(Debug, Clone, Copy)]
pub struct AamWeights {
    pub self_conv: Conv3dLayer,
    pub others_conv: Conv3dLayer,
}

impl AamWeights {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let _ = rng;
        AamWeights {
            self_conv: Conv3dLayer::zeroed(params, &format!("{name}.self"), channels, channels, 3),
            others_conv: Conv3dLayer::zeroed(
                params,
                &format!("{name}.others"),
                channels,
                channels,
                3,
            ),
        }
    }
}

/// Element-wise mean across the set.
pub fn mean_pool_aggregate<T: Scalar>(tape: &mut Tape<T>, set: &[NodeId]) -> Result<NodeId> {
    if set.is_empty() {
        return Err(Error::invalid("aggregation set must not be empty"));
    }
    let stacked = tape.stack0(set);
    let total = tape.sum_axis0(stacked);
    Ok(tape.scale(total, T::one() / T::of_usize(set.len())))
}

/// Attention-score aggregation with one shared activation per element:
/// scores softmax across the set weight the sum.
pub fn attsets_aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    set: &[NodeId],
    score: &Conv3dLayer,
) -> Result<NodeId> {
    if set.is_empty() {
        return Err(Error::invalid("aggregation set must not be empty"));
    }
    let scores: Vec<NodeId> = set.iter().map(|&c| score.apply(tape, bind, c)).collect();
    weighted_sum(tape, set, &scores)
}

/// Activated set of the attentional aggregation module: each element gets
/// its own self activation plus the cross activations of every other element.
pub fn aam_activate<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    set: &[NodeId],
    weights: &AamWeights,
) -> Result<Vec<NodeId>> {
    if set.is_empty() {
        return Err(Error::invalid("aggregation set must not be empty"));
    }
    let selves: Vec<NodeId> = set
        .iter()
        .map(|&c| weights.self_conv.apply(tape, bind, c))
        .collect();
    let others: Vec<NodeId> = set
        .iter()
        .map(|&c| weights.others_conv.apply(tape, bind, c))
        .collect();
    // Sum over m != n computed as (sum over all m) - own term.
    let mut activated = Vec::with_capacity(set.len());
    if set.len() == 1 {
        activated.push(selves[0]);
        return Ok(activated);
    }
    let stacked = tape.stack0(&others);
    let total = tape.sum_axis0(stacked);
    for n in 0..set.len() {
        let rest = tape.sub(total, others[n]);
        activated.push(tape.add(selves[n], rest));
    }
    Ok(activated)
}

/// Full attentional aggregation: softmax of the activated set across the set
/// axis, then the weighted sum of the inputs.
pub fn aam_aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    set: &[NodeId],
    weights: &AamWeights,
) -> Result<NodeId> {
    let activated = aam_activate(tape, bind, set, weights)?;
    weighted_sum(tape, set, &activated)
}

/// sum_n set_n * softmax(scores)_n with the softmax across the set axis,
/// independently per voxel and channel.
fn weighted_sum<T: Scalar>(
    tape: &mut Tape<T>,
    set: &[NodeId],
    scores: &[NodeId],
) -> Result<NodeId> {
    let stacked_scores = tape.stack0(scores);
    let attention = tape.softmax(stacked_scores, 0);
    let stacked_set = tape.stack0(set);
    let weighted = tape.mul(stacked_set, attention);
    Ok(tape.sum_axis0(weighted))
}

/// One aggregation point of the model.
pub enum AggModule {
    MeanPool,
    AttSets { score: Conv3dLayer },
    Aam(AamWeights),
}

impl AggModule {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: AggregatorKind,
        channels: usize,
    ) -> Self {
        match kind {
            AggregatorKind::MeanPool => AggModule::MeanPool,
            AggregatorKind::AttSets => AggModule::AttSets {
                score: Conv3dLayer::new(params, rng, &format!("{name}.score"), channels, channels, 3, 1),
            },
            AggregatorKind::Aam => AggModule::Aam(AamWeights::new(params, rng, name, channels)),
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        set: &[NodeId],
    ) -> Result<NodeId> {
        match self {
            AggModule::MeanPool => mean_pool_aggregate(tape, set),
            AggModule::AttSets { score } => attsets_aggregate(tape, bind, set, score),
            AggModule::Aam(w) => aam_aggregate(tape, bind, set, w),
        }
    }
}

//! Soft-argmax readout: reduce the volume to one channel, softmax over the
//! plane axis, and take the expectation against the plane disparities.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::geometry::DisparityHypotheses;
use crate::nn::{Binding, Conv3dLayer, Params};
use crate::scalar::Scalar;

pub struct OutputModule {
    conv: Conv3dLayer,
}

impl OutputModule {
    pub fn new<T: Scalar>(params: &mut Params<T>, rng: &mut ChaCha8Rng, in_channels: usize) -> Self {
        OutputModule {
            conv: Conv3dLayer::new(params, rng, "out.conv", in_channels, 1, 3, 1),
        }
    }

    /// The weight and bias ids of the channel-reduction convolution.
    pub fn conv_param_ids(&self) -> [crate::nn::ParamId; 2] {
        [self.conv.w, self.conv.b]
    }

    /// Volume [C, D, H, W] to probability volume [D, H, W] plus the
    /// disparity map [H, W].
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        volume: NodeId,
        planes: &DisparityHypotheses<T>,
    ) -> (NodeId, NodeId) {
        let logits = self.conv.apply(tape, bind, volume);
        let shape = tape.value(logits).shape().to_vec();
        debug_assert_eq!(shape[0], 1);
        let squeezed = tape.reshape(logits, &shape[1..]);
        let p = tape.softmax(squeezed, 0);
        let d = tape.depth_expectation(p, Arc::new(planes.values()));
        (p, d)
    }
}

//! Residual cost-volume refinement: the filtered volume, the photometric and
//! geometric consistency volumes, the reconstruction errors and the visual
//! hull are concatenated and passed through a 3-D encoder-decoder whose
//! zero-initialized output makes the refinement start as the identity.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::nn::{Binding, Conv3dLayer, NormLayer, Params};
use crate::scalar::Scalar;

use super::crm::Hourglass3d;

pub struct RefineNet {
    stem: Conv3dLayer,
    stem_norm: NormLayer,
    body: Hourglass3d,
}

impl RefineNet {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        width: usize,
    ) -> Self {
        RefineNet {
            stem: Conv3dLayer::new(params, rng, "refine.stem", in_channels, width, 3, 1),
            stem_norm: NormLayer::new(params, "refine.stem_n", width),
            body: Hourglass3d::new(params, rng, "refine.body", width),
        }
    }

    /// Concatenates the inputs along channels and returns the refined volume
    /// c_tilde + residual.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        c_tilde: NodeId,
        guidance: &[NodeId],
    ) -> NodeId {
        let mut inputs = vec![c_tilde];
        inputs.extend_from_slice(guidance);
        let cat = tape.concat(&inputs, 0);
        let mut x = self.stem.apply(tape, bind, cat);
        x = self.stem_norm.apply(tape, bind, x);
        x = tape.relu(x);
        let residual = self.body.apply(tape, bind, x);
        tape.add(c_tilde, residual)
    }
}

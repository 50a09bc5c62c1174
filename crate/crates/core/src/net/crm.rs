//! Cost regularization: stacked 3-D encoder-decoders over the matching cost
//! volume, chained residually so intermediate volumes feed the auxiliary
//! supervision.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::nn::{Binding, Conv3dLayer, NormLayer, Params};
use crate::scalar::Scalar;

use super::NetworkConfig;

/// One 3-D encoder-decoder with two downsampling levels, skip connections
/// and a zero-initialized output convolution so the stack starts as the
/// identity.
pub struct Hourglass3d {
    enc1a: Conv3dLayer,
    n1a: NormLayer,
    enc1b: Conv3dLayer,
    n1b: NormLayer,
    enc2a: Conv3dLayer,
    n2a: NormLayer,
    enc2b: Conv3dLayer,
    n2b: NormLayer,
    dec1: Conv3dLayer,
    nd1: NormLayer,
    dec0: Conv3dLayer,
    nd0: NormLayer,
    out: Conv3dLayer,
}

impl Hourglass3d {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
    ) -> Self {
        let wide = 2 * width;
        Hourglass3d {
            enc1a: Conv3dLayer::new(params, rng, &format!("{name}.enc1a"), width, wide, 3, 2),
            n1a: NormLayer::new(params, &format!("{name}.n1a"), wide),
            enc1b: Conv3dLayer::new(params, rng, &format!("{name}.enc1b"), wide, wide, 3, 1),
            n1b: NormLayer::new(params, &format!("{name}.n1b"), wide),
            enc2a: Conv3dLayer::new(params, rng, &format!("{name}.enc2a"), wide, wide, 3, 2),
            n2a: NormLayer::new(params, &format!("{name}.n2a"), wide),
            enc2b: Conv3dLayer::new(params, rng, &format!("{name}.enc2b"), wide, wide, 3, 1),
            n2b: NormLayer::new(params, &format!("{name}.n2b"), wide),
            dec1: Conv3dLayer::new(params, rng, &format!("{name}.dec1"), wide, wide, 3, 1),
            nd1: NormLayer::new(params, &format!("{name}.nd1"), wide),
            dec0: Conv3dLayer::new(params, rng, &format!("{name}.dec0"), wide, width, 3, 1),
            nd0: NormLayer::new(params, &format!("{name}.nd0"), width),
            out: Conv3dLayer::zeroed(params, &format!("{name}.out"), width, width, 3),
        }
    }

    /// Input [width, D, H, W] with D, H, W divisible by 4.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        let shape = tape.value(x).shape().to_vec();
        assert!(
            shape[1] % 4 == 0 && shape[2] % 4 == 0 && shape[3] % 4 == 0,
            "volume dims {:?} must be divisible by 4 for the encoder-decoder",
            &shape[1..]
        );
        let mut e1 = self.enc1a.apply(tape, bind, x);
        e1 = self.n1a.apply(tape, bind, e1);
        e1 = tape.relu(e1);
        let mut t = self.enc1b.apply(tape, bind, e1);
        t = self.n1b.apply(tape, bind, t);
        let e1 = tape.relu(t);

        let mut e2 = self.enc2a.apply(tape, bind, e1);
        e2 = self.n2a.apply(tape, bind, e2);
        e2 = tape.relu(e2);
        let mut t = self.enc2b.apply(tape, bind, e2);
        t = self.n2b.apply(tape, bind, t);
        let e2 = tape.relu(t);

        let mut d1 = tape.upsample3d2x(e2);
        d1 = self.dec1.apply(tape, bind, d1);
        d1 = self.nd1.apply(tape, bind, d1);
        d1 = tape.add(d1, e1);
        d1 = tape.relu(d1);

        let mut d0 = tape.upsample3d2x(d1);
        d0 = self.dec0.apply(tape, bind, d0);
        d0 = self.nd0.apply(tape, bind, d0);
        d0 = tape.add(d0, x);
        d0 = tape.relu(d0);

        self.out.apply(tape, bind, d0)
    }
}

pub struct CrmNet {
    stem_a: Conv3dLayer,
    stem_na: NormLayer,
    stem_b: Conv3dLayer,
    stem_nb: NormLayer,
    stacks: Vec<Hourglass3d>,
}

impl CrmNet {
    pub fn new<T: Scalar>(params: &mut Params<T>, rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Self {
        let width = cfg.base_width;
        let stem_a = Conv3dLayer::new(
            params,
            rng,
            "crm.stem_a",
            2 * cfg.feature_channels,
            width,
            3,
            1,
        );
        let stem_na = NormLayer::new(params, "crm.stem_na", width);
        let stem_b = Conv3dLayer::new(params, rng, "crm.stem_b", width, width, 3, 1);
        let stem_nb = NormLayer::new(params, "crm.stem_nb", width);
        let stacks = (0..cfg.crm_stacks)
            .map(|i| Hourglass3d::new(params, rng, &format!("crm.stack{i}"), width))
            .collect();
        CrmNet {
            stem_a,
            stem_na,
            stem_b,
            stem_nb,
            stacks,
        }
    }

    /// Filters the raw cost volume. Returns the final filtered volume and
    /// one intermediate volume per stacked encoder-decoder.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        cost: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let mut v = self.stem_a.apply(tape, bind, cost);
        v = self.stem_na.apply(tape, bind, v);
        v = tape.relu(v);
        v = self.stem_b.apply(tape, bind, v);
        v = self.stem_nb.apply(tape, bind, v);
        v = tape.relu(v);
        let mut intermediates = Vec::with_capacity(self.stacks.len());
        for hg in &self.stacks {
            let residual = hg.apply(tape, bind, v);
            v = tape.add(v, residual);
            intermediates.push(v);
        }
        (v, intermediates)
    }

    pub fn stack_count(&self) -> usize {
        self.stacks.len()
    }
}

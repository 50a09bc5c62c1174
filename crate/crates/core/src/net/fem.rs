//! Feature extraction: a small 2-D CNN with residual blocks and spatial
//! pyramid pooling, producing quarter-resolution high-level features plus an
//! early low-level tap for the refinement guidance.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::nn::{Binding, Conv2dLayer, NormLayer, Params};
use crate::scalar::Scalar;

use super::NetworkConfig;

struct ResBlock2d {
    conv_a: Conv2dLayer,
    norm_a: NormLayer,
    conv_b: Conv2dLayer,
    norm_b: NormLayer,
    /// Projection shortcut when stride or channel count changes.
    proj: Option<Conv2dLayer>,
}

impl ResBlock2d {
    fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv_a = Conv2dLayer::new(params, rng, &format!("{name}.a"), cin, cout, 3, stride);
        let norm_a = NormLayer::new(params, &format!("{name}.na"), cout);
        let conv_b = Conv2dLayer::new(params, rng, &format!("{name}.b"), cout, cout, 3, 1);
        let norm_b = NormLayer::new(params, &format!("{name}.nb"), cout);
        let proj = if stride != 1 || cin != cout {
            Some(Conv2dLayer::new(
                params,
                rng,
                &format!("{name}.proj"),
                cin,
                cout,
                1,
                stride,
            ))
        } else {
            None
        };
        ResBlock2d {
            conv_a,
            norm_a,
            conv_b,
            norm_b,
            proj,
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        let mut h = self.conv_a.apply(tape, bind, x);
        h = self.norm_a.apply(tape, bind, h);
        h = tape.relu(h);
        h = self.conv_b.apply(tape, bind, h);
        h = self.norm_b.apply(tape, bind, h);
        let skip = match &self.proj {
            Some(p) => p.apply(tape, bind, x),
            None => x,
        };
        let s = tape.add(h, skip);
        tape.relu(s)
    }
}

pub struct FemNet {
    conv0: Conv2dLayer,
    norm0: NormLayer,
    conv1: Conv2dLayer,
    norm1: NormLayer,
    conv2: Conv2dLayer,
    norm2: NormLayer,
    blocks: Vec<ResBlock2d>,
    spp_convs: Vec<(usize, Conv2dLayer, NormLayer)>,
    fuse_a: Conv2dLayer,
    fuse_norm: NormLayer,
    fuse_b: Conv2dLayer,
}

impl FemNet {
    pub fn new<T: Scalar>(params: &mut Params<T>, rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Self {
        let base = cfg.base_width;
        let low = cfg.low_level_channels;
        let conv0 = Conv2dLayer::new(params, rng, "fem.conv0", 3, base, 3, 2);
        let norm0 = NormLayer::new(params, "fem.norm0", base);
        let conv1 = Conv2dLayer::new(params, rng, "fem.conv1", base, base, 3, 1);
        let norm1 = NormLayer::new(params, "fem.norm1", base);
        let conv2 = Conv2dLayer::new(params, rng, "fem.conv2", base, base, 3, 1);
        let norm2 = NormLayer::new(params, "fem.norm2", base);
        // Four cascaded residual blocks; the first downsamples to 1/4
        // resolution, the second is the low-level tap.
        let blocks = vec![
            ResBlock2d::new(params, rng, "fem.res1", base, low, 2),
            ResBlock2d::new(params, rng, "fem.res2", low, low, 1),
            ResBlock2d::new(params, rng, "fem.res3", low, low, 1),
            ResBlock2d::new(params, rng, "fem.res4", low, low, 1),
        ];
        let branch_ch = (low / 4).max(1);
        let spp_convs = cfg
            .spp_pool_sizes
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                (
                    p,
                    Conv2dLayer::new(params, rng, &format!("fem.spp{i}"), low, branch_ch, 1, 1),
                    NormLayer::new(params, &format!("fem.sppn{i}"), branch_ch),
                )
            })
            .collect::<Vec<_>>();
        let cat_ch = low + branch_ch * spp_convs.len();
        let fuse_a = Conv2dLayer::new(params, rng, "fem.fuse_a", cat_ch, low, 3, 1);
        let fuse_norm = NormLayer::new(params, "fem.fuse_n", low);
        let fuse_b = Conv2dLayer::new(
            params,
            rng,
            "fem.fuse_b",
            low,
            cfg.feature_channels,
            1,
            1,
        );
        FemNet {
            conv0,
            norm0,
            conv1,
            norm1,
            conv2,
            norm2,
            blocks,
            spp_convs,
            fuse_a,
            fuse_norm,
            fuse_b,
        }
    }

    /// Runs the extractor on a [3, H, W] image node (H, W multiples of 4).
    /// Returns the fused high-level features and the low-level tap, both at
    /// quarter resolution.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        image: NodeId,
    ) -> (NodeId, NodeId) {
        let mut x = self.conv0.apply(tape, bind, image);
        x = self.norm0.apply(tape, bind, x);
        x = tape.relu(x);
        x = self.conv1.apply(tape, bind, x);
        x = self.norm1.apply(tape, bind, x);
        x = tape.relu(x);
        x = self.conv2.apply(tape, bind, x);
        x = self.norm2.apply(tape, bind, x);
        x = tape.relu(x);

        let b1 = self.blocks[0].apply(tape, bind, x);
        let low_tap = self.blocks[1].apply(tape, bind, b1);
        let b3 = self.blocks[2].apply(tape, bind, low_tap);
        let b4 = self.blocks[3].apply(tape, bind, b3);

        let shape = tape.value(b4).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let mut cat = vec![b4];
        for (pool, conv, norm) in &self.spp_convs {
            // Clamp oversized pools to the map extent (global pooling).
            let k = (*pool).min(h).min(w);
            let pooled = tape.avg_pool2d(b4, k);
            let mut br = conv.apply(tape, bind, pooled);
            br = norm.apply(tape, bind, br);
            br = tape.relu(br);
            br = tape.upsample2d(br, h, w);
            cat.push(br);
        }
        let joined = tape.concat(&cat, 0);
        let mut f = self.fuse_a.apply(tape, bind, joined);
        f = self.fuse_norm.apply(tape, bind, f);
        f = tape.relu(f);
        let f_high = self.fuse_b.apply(tape, bind, f);
        (f_high, low_tap)
    }
}

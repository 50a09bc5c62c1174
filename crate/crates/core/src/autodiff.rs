//! Reverse-mode automatic differentiation over dynamically shaped tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients. Values are stored in
//! standard layout throughout, so kernels can work on raw slices.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::kernels;
use crate::sampling;
use crate::scalar::Scalar;
use crate::sweep::{Correspondence, SweepCoords};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Recorded operation; parents are node ids, constants are baked in.
enum Op<T: Scalar> {
    Leaf,
    StopGrad,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// Value = parent + baked constant; gradient passes through unchanged.
    AddConst(NodeId),
    MulConst(NodeId, Arc<ArrayD<T>>),
    Abs(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Reshape(NodeId),
    Concat { xs: Vec<NodeId>, axis: usize },
    Stack0(Vec<NodeId>),
    SumAxis0(NodeId),
    Softmax { x: NodeId, axis: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    Conv3d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    ChannelNorm { x: NodeId, gain: NodeId, bias: NodeId, stats: Vec<(T, T)> },
    AvgPool2d { x: NodeId, k: usize },
    UpBilinear2d(NodeId),
    UpNearest3d2x(NodeId),
    TileDepth(NodeId),
    DepthExpectation { p: NodeId, disp: Arc<Vec<T>> },
    PlaneSweep { feat: NodeId, coords: Arc<SweepCoords<T>> },
    SampleFeat { feat: NodeId, coords: Arc<Correspondence<T>> },
    SampleMapAt { map: NodeId, coords: NodeId },
    SampleFeatAt { feat: NodeId, coords: NodeId },
    RescaleSample { map: NodeId, coords: NodeId, cx: T, cy: T, c0: T },
    ProjectCoords { d: NodeId, proj: Arc<crate::geometry::PixelProjector<T>> },
    MaskedL1 { pred: NodeId, gt: Arc<ArrayD<T>>, mask: Arc<ArrayD<T>>, inv_count: T },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads<T: Scalar> {
    by_node: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.by_node[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<T>> {
        self.by_node[id.0].take()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a constant (no gradient).
    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a differentiable leaf (parameter or checked input).
    pub fn var(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.clone();
        let _ = x;
        self.push(value, Op::StopGrad, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v * s);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, s), needs)
    }

    /// Add a constant array of the same shape.
    pub fn add_const(&mut self, x: NodeId, c: &ArrayD<T>) -> NodeId {
        assert_eq!(self.nodes[x.0].value.shape(), c.shape());
        let value = &self.nodes[x.0].value + c;
        let needs = self.needs(x);
        self.push(value, Op::AddConst(x), needs)
    }

    /// Elementwise multiply by a constant array (masking).
    pub fn mul_const(&mut self, x: NodeId, c: Arc<ArrayD<T>>) -> NodeId {
        assert_eq!(self.nodes[x.0].value.shape(), c.shape());
        let value = &self.nodes[x.0].value * &*c;
        let needs = self.needs(x);
        self.push(value, Op::MulConst(x, c), needs)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.abs());
        let needs = self.needs(x);
        self.push(value, Op::Abs(x), needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let value = self.nodes[x.0]
            .value
            .mapv(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu(x, slope), needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        assert!(!xs.is_empty());
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.nodes[x.0].value.shape();
            assert_eq!(s.len(), first.len());
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat extent mismatch away from axis");
                }
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); shape.iter().product()];
        let mut offset = 0;
        for &x in xs {
            let v = &self.nodes[x.0].value;
            let extent = v.shape()[axis];
            let src = v.as_slice().expect("standard layout");
            for o in 0..outer {
                let dst_start = (o * total + offset) * inner;
                let src_start = o * extent * inner;
                out[dst_start..dst_start + extent * inner]
                    .copy_from_slice(&src[src_start..src_start + extent * inner]);
            }
            offset += extent;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            needs,
        )
    }

    /// Stack along a new leading axis.
    pub fn stack0(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let inner_shape = self.nodes[xs[0].0].value.shape().to_vec();
        let inner: usize = inner_shape.iter().product();
        let mut out = Vec::with_capacity(xs.len() * inner);
        for &x in xs {
            assert_eq!(self.nodes[x.0].value.shape(), &inner_shape[..]);
            out.extend_from_slice(self.nodes[x.0].value.as_slice().unwrap());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&inner_shape);
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(value, Op::Stack0(xs.to_vec()), needs)
    }

    pub fn sum_axis0(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        assert!(!shape.is_empty());
        let n = shape[0];
        let inner: usize = shape[1..].iter().product();
        let src = v.as_slice().unwrap();
        let mut out = vec![T::zero(); inner];
        for i in 0..n {
            for (o, &s) in out.iter_mut().zip(&src[i * inner..(i + 1) * inner]) {
                *o += s;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape[1..]), out).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::SumAxis0(x), needs)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = v.as_slice().unwrap();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut m = src[at(0)];
                for j in 1..n {
                    m = m.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::Softmax { x, axis }, needs)
    }

    /// Same-padded 2-D convolution; x is [Cin, H, W], w is [Cout, Cin, k, k].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[1], "conv2d input channel mismatch");
        assert_eq!(ws[2], ws[3]);
        assert_eq!(ws[2] % 2, 1, "conv kernels must be odd for same padding");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let (oh, ow) = (kernels::conv_out(h, k, stride), kernels::conv_out(wd, k, stride));
        let mut out = vec![T::zero(); cout * oh * ow];
        kernels::conv2d_forward(
            self.nodes[x.0].value.as_slice().unwrap(),
            self.nodes[w.0].value.as_slice().unwrap(),
            self.nodes[b.0].value.as_slice().unwrap(),
            cin,
            h,
            wd,
            cout,
            k,
            stride,
            &mut out,
        );
        let value = ArrayD::from_shape_vec(IxDyn(&[cout, oh, ow]), out).unwrap();
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv2d { x, w, b, stride }, needs)
    }

    /// Same-padded 3-D convolution; x is [Cin, D, H, W], w is [Cout, Cin, k, k, k].
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 5);
        assert_eq!(xs[0], ws[1], "conv3d input channel mismatch");
        assert_eq!(ws[2] % 2, 1);
        let (cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let od = kernels::conv_out(d, k, stride);
        let oh = kernels::conv_out(h, k, stride);
        let ow = kernels::conv_out(wd, k, stride);
        let mut out = vec![T::zero(); cout * od * oh * ow];
        kernels::conv3d_forward(
            self.nodes[x.0].value.as_slice().unwrap(),
            self.nodes[w.0].value.as_slice().unwrap(),
            self.nodes[b.0].value.as_slice().unwrap(),
            cin,
            d,
            h,
            wd,
            cout,
            k,
            stride,
            &mut out,
        );
        let value = ArrayD::from_shape_vec(IxDyn(&[cout, od, oh, ow]), out).unwrap();
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv3d { x, w, b, stride }, needs)
    }

    /// Per-channel normalization over spatial dims with learnable affine.
    pub fn channel_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let c = shape[0];
        let spatial: usize = shape[1..].iter().product();
        assert_eq!(self.nodes[gain.0].value.len(), c);
        assert_eq!(self.nodes[bias.0].value.len(), c);
        let mut out = vec![T::zero(); c * spatial];
        let mut stats = Vec::new();
        kernels::channel_norm_forward(
            self.nodes[x.0].value.as_slice().unwrap(),
            self.nodes[gain.0].value.as_slice().unwrap(),
            self.nodes[bias.0].value.as_slice().unwrap(),
            c,
            spatial,
            T::of(1e-5),
            &mut out,
            &mut stats,
        );
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            value,
            Op::ChannelNorm {
                x,
                gain,
                bias,
                stats,
            },
            needs,
        )
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> NodeId {
        let s = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(s.len(), 3);
        assert!(k >= 1);
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
        let mut out = vec![T::zero(); c * oh * ow];
        kernels::avg_pool2d_forward(
            self.nodes[x.0].value.as_slice().unwrap(),
            c,
            h,
            w,
            k,
            &mut out,
        );
        let value = ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::AvgPool2d { x, k }, needs)
    }

    pub fn upsample2d(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let s = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); c * oh * ow];
        kernels::upsample2d_forward(
            self.nodes[x.0].value.as_slice().unwrap(),
            c,
            h,
            w,
            oh,
            ow,
            &mut out,
        );
        let value = ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::UpBilinear2d(x), needs)
    }

    pub fn upsample3d2x(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); c * 8 * d * h * w];
        kernels::upsample3d2x_forward(
            self.nodes[x.0].value.as_slice().unwrap(),
            c,
            d,
            h,
            w,
            &mut out,
        );
        let value = ArrayD::from_shape_vec(IxDyn(&[c, 2 * d, 2 * h, 2 * w]), out).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::UpNearest3d2x(x), needs)
    }

    /// Tile a [C, H, W] map along a new plane axis: [C, D, H, W].
    pub fn tile_depth(&mut self, x: NodeId, d: usize) -> NodeId {
        let s = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.nodes[x.0].value.as_slice().unwrap();
        let mut out = vec![T::zero(); c * d * h * w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for i in 0..d {
                out[(ch * d + i) * h * w..(ch * d + i + 1) * h * w].copy_from_slice(plane);
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, d, h, w]), out).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::TileDepth(x), needs)
    }

    /// Soft-argmax readout: expectation of a [D, H, W] probability volume
    /// against the plane disparities.
    pub fn depth_expectation(&mut self, p: NodeId, disp: Arc<Vec<T>>) -> NodeId {
        let s = self.nodes[p.0].value.shape().to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0], disp.len());
        let (d, h, w) = (s[0], s[1], s[2]);
        let src = self.nodes[p.0].value.as_slice().unwrap();
        let mut out = vec![T::zero(); h * w];
        for i in 0..d {
            let di = disp[i];
            for (o, &pv) in out.iter_mut().zip(&src[i * h * w..(i + 1) * h * w]) {
                *o += pv * di;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[h, w]), out).unwrap();
        let needs = self.needs(p);
        self.push(value, Op::DepthExpectation { p, disp }, needs)
    }

    /// Plane-sweep warp of a [C, h, w] source feature map onto the reference
    /// plane stack, producing [C, D, H, W]. Differentiable in the features.
    pub fn plane_sweep(&mut self, feat: NodeId, coords: Arc<SweepCoords<T>>) -> NodeId {
        let s = self.nodes[feat.0].value.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, fh, fw) = (s[0], s[1], s[2]);
        assert_eq!((fh, fw), coords.source_dims());
        let d = coords.plane_count();
        let (oh, ow) = coords.out_dims();
        let src = self.nodes[feat.0].value.as_slice().unwrap();
        let mut out = vec![T::zero(); c * d * oh * ow];
        for i in 0..d {
            for y in 0..oh {
                for x in 0..ow {
                    let (sx, sy, _) = coords.coords(x, y, i);
                    for ch in 0..c {
                        out[((ch * d + i) * oh + y) * ow + x] = sampling::sample_plane(
                            &src[ch * fh * fw..(ch + 1) * fh * fw],
                            fh,
                            fw,
                            sx,
                            sy,
                        );
                    }
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, d, oh, ow]), out).unwrap();
        let needs = self.needs(feat);
        self.push(value, Op::PlaneSweep { feat, coords }, needs)
    }

    /// Sample a [C, h, w] feature map at a fixed correspondence grid,
    /// producing [C, H, W]. Differentiable in the features only.
    pub fn sample_feat(&mut self, feat: NodeId, coords: Arc<Correspondence<T>>) -> NodeId {
        let s = self.nodes[feat.0].value.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, fh, fw) = (s[0], s[1], s[2]);
        let (oh, ow) = coords.dim();
        let src = self.nodes[feat.0].value.as_slice().unwrap();
        let mut out = vec![T::zero(); c * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = (coords.xs[[y, x]], coords.ys[[y, x]]);
                for ch in 0..c {
                    out[(ch * oh + y) * ow + x] = sampling::sample_plane(
                        &src[ch * fh * fw..(ch + 1) * fh * fw],
                        fh,
                        fw,
                        sx,
                        sy,
                    );
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();
        let needs = self.needs(feat);
        self.push(value, Op::SampleFeat { feat, coords }, needs)
    }

    /// Sample a [h, w] map at coordinates given by a [2, H, W] node
    /// (channel 0 = x, channel 1 = y). Differentiable in both inputs.
    pub fn sample_map_at(&mut self, map: NodeId, coords: NodeId) -> NodeId {
        let ms = self.nodes[map.0].value.shape().to_vec();
        let cs = self.nodes[coords.0].value.shape().to_vec();
        assert_eq!(ms.len(), 2);
        assert_eq!(cs.len(), 3);
        assert_eq!(cs[0], 2);
        let (mh, mw) = (ms[0], ms[1]);
        let (oh, ow) = (cs[1], cs[2]);
        let msrc = self.nodes[map.0].value.as_slice().unwrap();
        let csrc = self.nodes[coords.0].value.as_slice().unwrap();
        let mut out = vec![T::zero(); oh * ow];
        for i in 0..oh * ow {
            out[i] = sampling::sample_plane(msrc, mh, mw, csrc[i], csrc[oh * ow + i]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[oh, ow]), out).unwrap();
        let needs = self.needs(map) || self.needs(coords);
        self.push(value, Op::SampleMapAt { map, coords }, needs)
    }

    /// Sample a [C, h, w] feature map at coordinates given by a [2, H, W]
    /// node. Differentiable in both the features and the coordinates.
    pub fn sample_feat_at(&mut self, feat: NodeId, coords: NodeId) -> NodeId {
        let s = self.nodes[feat.0].value.shape().to_vec();
        let cs = self.nodes[coords.0].value.shape().to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(cs.len(), 3);
        assert_eq!(cs[0], 2);
        let (c, fh, fw) = (s[0], s[1], s[2]);
        let (oh, ow) = (cs[1], cs[2]);
        let fsrc = self.nodes[feat.0].value.as_slice().unwrap();
        let csrc = self.nodes[coords.0].value.as_slice().unwrap();
        let mut out = vec![T::zero(); c * oh * ow];
        for i in 0..oh * ow {
            let (x, y) = (csrc[i], csrc[oh * ow + i]);
            for ch in 0..c {
                out[ch * oh * ow + i] =
                    sampling::sample_plane(&fsrc[ch * fh * fw..(ch + 1) * fh * fw], fh, fw, x, y);
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();
        let needs = self.needs(feat) || self.needs(coords);
        self.push(value, Op::SampleFeatAt { feat, coords }, needs)
    }

    /// Sample a [h, w] disparity map at coordinates [2, H, W] and divide by
    /// the affine rescale divisor evaluated at those coordinates. Pixels with
    /// divisor at or below the Z epsilon read zero with zero gradient.
    pub fn rescale_sample(
        &mut self,
        map: NodeId,
        coords: NodeId,
        plane: &crate::geometry::RescalePlane<T>,
    ) -> NodeId {
        let ms = self.nodes[map.0].value.shape().to_vec();
        let cs = self.nodes[coords.0].value.shape().to_vec();
        assert_eq!(ms.len(), 2);
        assert_eq!(cs[0], 2);
        let (mh, mw) = (ms[0], ms[1]);
        let (oh, ow) = (cs[1], cs[2]);
        let (cx, cy, c0) = plane.coefficients();
        let msrc = self.nodes[map.0].value.as_slice().unwrap();
        let csrc = self.nodes[coords.0].value.as_slice().unwrap();
        let eps = T::of(crate::geometry::MIN_Z_EPS);
        let mut out = vec![T::zero(); oh * ow];
        for i in 0..oh * ow {
            let (x, y) = (csrc[i], csrc[oh * ow + i]);
            let v = cx * x + cy * y + c0;
            if v > eps {
                out[i] = sampling::sample_plane(msrc, mh, mw, x, y) / v;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[oh, ow]), out).unwrap();
        let needs = self.needs(map) || self.needs(coords);
        self.push(
            value,
            Op::RescaleSample {
                map,
                coords,
                cx,
                cy,
                c0,
            },
            needs,
        )
    }

    /// Project every pixel at the disparity given by node `d` ([H, W]) into
    /// the source view, producing coordinates [2, H, W]. Invalid projections
    /// are pushed far out of bounds, where sampling reads zero with zero
    /// gradient.
    pub fn project_coords(
        &mut self,
        d: NodeId,
        proj: Arc<crate::geometry::PixelProjector<T>>,
    ) -> NodeId {
        let s = self.nodes[d.0].value.shape().to_vec();
        assert_eq!(s.len(), 2);
        let (h, w) = (s[0], s[1]);
        let src = self.nodes[d.0].value.as_slice().unwrap();
        let far = T::of(-1e9);
        let mut out = vec![far; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let dv = src[y * w + x];
                if !(dv.as_f64() > 0.0) {
                    continue;
                }
                let p = proj.project(T::of_usize(x), T::of_usize(y), dv);
                if p.valid {
                    out[y * w + x] = p.x;
                    out[h * w + y * w + x] = p.y;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[2, h, w]), out).unwrap();
        let needs = self.needs(d);
        self.push(value, Op::ProjectCoords { d, proj }, needs)
    }

    /// Mean absolute error over masked entries; returns a scalar node. When
    /// no entries are valid the loss is defined as zero.
    pub fn masked_l1(&mut self, pred: NodeId, gt: Arc<ArrayD<T>>, mask: Arc<ArrayD<T>>) -> NodeId {
        assert_eq!(self.nodes[pred.0].value.shape(), gt.shape());
        assert_eq!(gt.shape(), mask.shape());
        let p = self.nodes[pred.0].value.as_slice().unwrap();
        let g = gt.as_slice().unwrap();
        let m = mask.as_slice().unwrap();
        let mut total = T::zero();
        let mut count = 0usize;
        for i in 0..p.len() {
            if m[i] > T::zero() {
                total += (p[i] - g[i]).abs();
                count += 1;
            }
        }
        let inv_count = if count > 0 {
            T::one() / T::of_usize(count)
        } else {
            T::zero()
        };
        let value = ArrayD::from_shape_vec(IxDyn(&[]), vec![total * inv_count]).unwrap();
        let needs = self.needs(pred);
        self.push(
            value,
            Op::MaskedL1 {
                pred,
                gt,
                mask,
                inv_count,
            },
            needs,
        )
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Grads<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            T::one(),
        ));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<T>>], id: NodeId, delta: ArrayD<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_slice(&self, grads: &mut [Option<ArrayD<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(ArrayD::from_elem(
                self.nodes[id.0].value.raw_dim(),
                T::zero(),
            ));
        }
        f(slot.as_mut().unwrap().as_slice_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_parents(&self, i: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[b.0].value;
                let gb = g * &self.nodes[a.0].value;
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.mapv(|v| v * s));
            }
            Op::AddConst(x) => self.acc(grads, *x, g.clone()),
            Op::MulConst(x, c) => self.acc(grads, *x, g * &**c),
            Op::Abs(x) => {
                let sign = self.nodes[x.0].value.mapv(|v| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *x, g * &sign);
            }
            Op::Relu(x) => {
                let m = self.nodes[x.0]
                    .value
                    .mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                self.acc(grads, *x, g * &m);
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let m = self.nodes[x.0]
                    .value
                    .mapv(|v| if v > T::zero() { T::one() } else { slope });
                self.acc(grads, *x, g * &m);
            }
            Op::Reshape(x) => {
                let shaped = g
                    .clone()
                    .into_shape_with_order(self.nodes[x.0].value.raw_dim())
                    .unwrap();
                self.acc(grads, *x, shaped);
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let axis = *axis;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let gsrc = g.as_slice().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let extent = self.nodes[x.0].value.shape()[axis];
                    if self.nodes[x.0].needs_grad {
                        let mut part =
                            vec![T::zero(); self.nodes[x.0].value.len()];
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            let dst_start = o * extent * inner;
                            part[dst_start..dst_start + extent * inner]
                                .copy_from_slice(&gsrc[src_start..src_start + extent * inner]);
                        }
                        let arr = ArrayD::from_shape_vec(
                            self.nodes[x.0].value.raw_dim(),
                            part,
                        )
                        .unwrap();
                        self.acc(grads, x, arr);
                    }
                    offset += extent;
                }
            }
            Op::Stack0(xs) => {
                let inner: usize = self.nodes[xs[0].0].value.len();
                let gsrc = g.as_slice().unwrap();
                for (j, &x) in xs.iter().enumerate() {
                    if self.nodes[x.0].needs_grad {
                        let part = gsrc[j * inner..(j + 1) * inner].to_vec();
                        let arr =
                            ArrayD::from_shape_vec(self.nodes[x.0].value.raw_dim(), part).unwrap();
                        self.acc(grads, x, arr);
                    }
                }
            }
            Op::SumAxis0(x) => {
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let n = xshape[0];
                let inner: usize = xshape[1..].iter().product();
                let gsrc = g.as_slice().unwrap();
                self.acc_slice(grads, *x, |gx| {
                    for j in 0..n {
                        for (o, &s) in gx[j * inner..(j + 1) * inner].iter_mut().zip(gsrc) {
                            *o += s;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let shape = y.shape().to_vec();
                let axis = *axis;
                let n = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let ysrc = y.as_slice().unwrap();
                let gsrc = g.as_slice().unwrap();
                self.acc_slice(grads, *x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + ii;
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot += gsrc[at(j)] * ysrc[at(j)];
                            }
                            for j in 0..n {
                                gx[at(j)] += ysrc[at(j)] * (gsrc[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                self.conv_backward_dispatch(
                    grads,
                    (*x, *w, *b),
                    g,
                    move |xv, wv, gout, gx, gw, gb| {
                        kernels::conv2d_backward(
                            xv, wv, cin, h, wd, cout, k, *stride, gout, gx, gw, gb,
                        );
                    },
                );
            }
            Op::Conv3d { x, w, b, stride } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[0], ws[2]);
                self.conv_backward_dispatch(
                    grads,
                    (*x, *w, *b),
                    g,
                    move |xv, wv, gout, gx, gw, gb| {
                        kernels::conv3d_backward(
                            xv, wv, cin, d, h, wd, cout, k, *stride, gout, gx, gw, gb,
                        );
                    },
                );
            }
            Op::ChannelNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let c = shape[0];
                let spatial: usize = shape[1..].iter().product();
                let xv = self.nodes[x.0].value.as_slice().unwrap();
                let gainv = self.nodes[gain.0].value.as_slice().unwrap();
                let gout = g.as_slice().unwrap();
                let mut gx = if self.nodes[x.0].needs_grad {
                    Some(vec![T::zero(); xv.len()])
                } else {
                    None
                };
                let mut ggain = if self.nodes[gain.0].needs_grad {
                    Some(vec![T::zero(); c])
                } else {
                    None
                };
                let mut gbias = if self.nodes[bias.0].needs_grad {
                    Some(vec![T::zero(); c])
                } else {
                    None
                };
                kernels::channel_norm_backward(
                    xv,
                    gainv,
                    stats,
                    c,
                    spatial,
                    gout,
                    gx.as_deref_mut(),
                    ggain.as_deref_mut(),
                    gbias.as_deref_mut(),
                );
                if let Some(v) = gx {
                    let arr = ArrayD::from_shape_vec(self.nodes[x.0].value.raw_dim(), v).unwrap();
                    self.acc(grads, *x, arr);
                }
                if let Some(v) = ggain {
                    let arr =
                        ArrayD::from_shape_vec(self.nodes[gain.0].value.raw_dim(), v).unwrap();
                    self.acc(grads, *gain, arr);
                }
                if let Some(v) = gbias {
                    let arr =
                        ArrayD::from_shape_vec(self.nodes[bias.0].value.raw_dim(), v).unwrap();
                    self.acc(grads, *bias, arr);
                }
            }
            Op::AvgPool2d { x, k } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let gsrc = g.as_slice().unwrap();
                let k = *k;
                self.acc_slice(grads, *x, |gx| {
                    kernels::avg_pool2d_backward(gsrc, s[0], s[1], s[2], k, gx);
                });
            }
            Op::UpBilinear2d(x) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let os = self.nodes[i].value.shape().to_vec();
                let gsrc = g.as_slice().unwrap();
                self.acc_slice(grads, *x, |gx| {
                    kernels::upsample2d_backward(gsrc, s[0], s[1], s[2], os[1], os[2], gx);
                });
            }
            Op::UpNearest3d2x(x) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let gsrc = g.as_slice().unwrap();
                self.acc_slice(grads, *x, |gx| {
                    kernels::upsample3d2x_backward(gsrc, s[0], s[1], s[2], s[3], gx);
                });
            }
            Op::TileDepth(x) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let os = self.nodes[i].value.shape().to_vec();
                let d = os[1];
                let gsrc = g.as_slice().unwrap();
                self.acc_slice(grads, *x, |gx| {
                    for ch in 0..c {
                        for j in 0..d {
                            let plane = &gsrc[(ch * d + j) * h * w..(ch * d + j + 1) * h * w];
                            for (o, &s) in
                                gx[ch * h * w..(ch + 1) * h * w].iter_mut().zip(plane)
                            {
                                *o += s;
                            }
                        }
                    }
                });
            }
            Op::DepthExpectation { p, disp } => {
                let s = self.nodes[p.0].value.shape().to_vec();
                let (d, h, w) = (s[0], s[1], s[2]);
                let gsrc = g.as_slice().unwrap();
                let disp = disp.clone();
                self.acc_slice(grads, *p, |gp| {
                    for j in 0..d {
                        let dj = disp[j];
                        for (o, &gv) in gp[j * h * w..(j + 1) * h * w].iter_mut().zip(gsrc) {
                            *o += gv * dj;
                        }
                    }
                });
            }
            Op::PlaneSweep { feat, coords } => {
                let s = self.nodes[feat.0].value.shape().to_vec();
                let (c, fh, fw) = (s[0], s[1], s[2]);
                let d = coords.plane_count();
                let (oh, ow) = coords.out_dims();
                let gsrc = g.as_slice().unwrap();
                let coords = coords.clone();
                self.acc_slice(grads, *feat, |gf| {
                    for j in 0..d {
                        for y in 0..oh {
                            for x in 0..ow {
                                let (sx, sy, _) = coords.coords(x, y, j);
                                for ch in 0..c {
                                    let gv = gsrc[((ch * d + j) * oh + y) * ow + x];
                                    if gv != T::zero() {
                                        sampling::scatter_plane_grad(
                                            &mut gf[ch * fh * fw..(ch + 1) * fh * fw],
                                            fh,
                                            fw,
                                            sx,
                                            sy,
                                            gv,
                                        );
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SampleFeat { feat, coords } => {
                let s = self.nodes[feat.0].value.shape().to_vec();
                let (c, fh, fw) = (s[0], s[1], s[2]);
                let (oh, ow) = coords.dim();
                let gsrc = g.as_slice().unwrap();
                let coords = coords.clone();
                self.acc_slice(grads, *feat, |gf| {
                    for y in 0..oh {
                        for x in 0..ow {
                            let (sx, sy) = (coords.xs[[y, x]], coords.ys[[y, x]]);
                            for ch in 0..c {
                                let gv = gsrc[(ch * oh + y) * ow + x];
                                if gv != T::zero() {
                                    sampling::scatter_plane_grad(
                                        &mut gf[ch * fh * fw..(ch + 1) * fh * fw],
                                        fh,
                                        fw,
                                        sx,
                                        sy,
                                        gv,
                                    );
                                }
                            }
                        }
                    }
                });
            }
            Op::SampleMapAt { map, coords } => {
                let ms = self.nodes[map.0].value.shape().to_vec();
                let (mh, mw) = (ms[0], ms[1]);
                let cs = self.nodes[coords.0].value.shape().to_vec();
                let (oh, ow) = (cs[1], cs[2]);
                let msrc = self.nodes[map.0].value.as_slice().unwrap();
                let csrc = self.nodes[coords.0].value.as_slice().unwrap();
                let gsrc = g.as_slice().unwrap();
                self.acc_slice(grads, *map, |gm| {
                    for idx in 0..oh * ow {
                        if gsrc[idx] != T::zero() {
                            sampling::scatter_plane_grad(
                                gm,
                                mh,
                                mw,
                                csrc[idx],
                                csrc[oh * ow + idx],
                                gsrc[idx],
                            );
                        }
                    }
                });
                self.acc_slice(grads, *coords, |gc| {
                    for idx in 0..oh * ow {
                        if gsrc[idx] != T::zero() {
                            let (dx, dy) = sampling::coord_grads(
                                msrc,
                                mh,
                                mw,
                                csrc[idx],
                                csrc[oh * ow + idx],
                            );
                            gc[idx] += gsrc[idx] * dx;
                            gc[oh * ow + idx] += gsrc[idx] * dy;
                        }
                    }
                });
            }
            Op::SampleFeatAt { feat, coords } => {
                let s = self.nodes[feat.0].value.shape().to_vec();
                let (c, fh, fw) = (s[0], s[1], s[2]);
                let cs = self.nodes[coords.0].value.shape().to_vec();
                let (oh, ow) = (cs[1], cs[2]);
                let fsrc = self.nodes[feat.0].value.as_slice().unwrap();
                let csrc = self.nodes[coords.0].value.as_slice().unwrap();
                let gsrc = g.as_slice().unwrap();
                self.acc_slice(grads, *feat, |gf| {
                    for i in 0..oh * ow {
                        let (x, y) = (csrc[i], csrc[oh * ow + i]);
                        for ch in 0..c {
                            let gv = gsrc[ch * oh * ow + i];
                            if gv != T::zero() {
                                sampling::scatter_plane_grad(
                                    &mut gf[ch * fh * fw..(ch + 1) * fh * fw],
                                    fh,
                                    fw,
                                    x,
                                    y,
                                    gv,
                                );
                            }
                        }
                    }
                });
                self.acc_slice(grads, *coords, |gc| {
                    for i in 0..oh * ow {
                        let (x, y) = (csrc[i], csrc[oh * ow + i]);
                        for ch in 0..c {
                            let gv = gsrc[ch * oh * ow + i];
                            if gv != T::zero() {
                                let (dx, dy) = sampling::coord_grads(
                                    &fsrc[ch * fh * fw..(ch + 1) * fh * fw],
                                    fh,
                                    fw,
                                    x,
                                    y,
                                );
                                gc[i] += gv * dx;
                                gc[oh * ow + i] += gv * dy;
                            }
                        }
                    }
                });
            }
            Op::RescaleSample {
                map,
                coords,
                cx,
                cy,
                c0,
            } => {
                let ms = self.nodes[map.0].value.shape().to_vec();
                let (mh, mw) = (ms[0], ms[1]);
                let cs = self.nodes[coords.0].value.shape().to_vec();
                let (oh, ow) = (cs[1], cs[2]);
                let msrc = self.nodes[map.0].value.as_slice().unwrap();
                let csrc = self.nodes[coords.0].value.as_slice().unwrap();
                let gsrc = g.as_slice().unwrap();
                let (cx, cy, c0) = (*cx, *cy, *c0);
                let eps = T::of(crate::geometry::MIN_Z_EPS);
                self.acc_slice(grads, *map, |gm| {
                    for i in 0..oh * ow {
                        let (x, y) = (csrc[i], csrc[oh * ow + i]);
                        let v = cx * x + cy * y + c0;
                        if v > eps && gsrc[i] != T::zero() {
                            sampling::scatter_plane_grad(gm, mh, mw, x, y, gsrc[i] / v);
                        }
                    }
                });
                self.acc_slice(grads, *coords, |gc| {
                    for i in 0..oh * ow {
                        let (x, y) = (csrc[i], csrc[oh * ow + i]);
                        let v = cx * x + cy * y + c0;
                        if v <= eps || gsrc[i] == T::zero() {
                            continue;
                        }
                        let s = sampling::sample_plane(msrc, mh, mw, x, y);
                        let (dsx, dsy) = sampling::coord_grads(msrc, mh, mw, x, y);
                        let inv2 = T::one() / (v * v);
                        gc[i] += gsrc[i] * (dsx * v - s * cx) * inv2;
                        gc[oh * ow + i] += gsrc[i] * (dsy * v - s * cy) * inv2;
                    }
                });
            }
            Op::ProjectCoords { d, proj } => {
                let s = self.nodes[d.0].value.shape().to_vec();
                let (h, w) = (s[0], s[1]);
                let dv = self.nodes[d.0].value.as_slice().unwrap();
                let gsrc = g.as_slice().unwrap();
                let proj = proj.clone();
                self.acc_slice(grads, *d, |gd| {
                    for y in 0..h {
                        for x in 0..w {
                            let i = y * w + x;
                            let dval = dv[i];
                            if !(dval.as_f64() > 0.0) {
                                continue;
                            }
                            let base = proj.base(T::of_usize(x), T::of_usize(y));
                            let (cx, cy) = proj.coord_grad(base, dval);
                            gd[i] += gsrc[i] * cx + gsrc[h * w + i] * cy;
                        }
                    }
                });
            }
            Op::MaskedL1 {
                pred,
                gt,
                mask,
                inv_count,
            } => {
                let pv = self.nodes[pred.0].value.as_slice().unwrap();
                let gv = gt.as_slice().unwrap();
                let mv = mask.as_slice().unwrap();
                let gscalar = g.as_slice().unwrap()[0];
                let inv_count = *inv_count;
                self.acc_slice(grads, *pred, |gp| {
                    for idx in 0..pv.len() {
                        if mv[idx] > T::zero() {
                            let diff = pv[idx] - gv[idx];
                            let sign = if diff > T::zero() {
                                T::one()
                            } else if diff < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            gp[idx] += gscalar * inv_count * sign;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn conv_backward_dispatch(
        &self,
        grads: &mut [Option<ArrayD<T>>],
        (x, w, b): (NodeId, NodeId, NodeId),
        g: &ArrayD<T>,
        run: impl FnOnce(
            &[T],
            &[T],
            &[T],
            Option<&mut [T]>,
            Option<&mut [T]>,
            Option<&mut [T]>,
        ),
    ) {
        let xv = self.nodes[x.0].value.as_slice().unwrap();
        let wv = self.nodes[w.0].value.as_slice().unwrap();
        let gout = g.as_slice().unwrap();
        let mut gx = if self.nodes[x.0].needs_grad {
            Some(vec![T::zero(); xv.len()])
        } else {
            None
        };
        let mut gw = if self.nodes[w.0].needs_grad {
            Some(vec![T::zero(); wv.len()])
        } else {
            None
        };
        let mut gb = if self.nodes[b.0].needs_grad {
            Some(vec![T::zero(); self.nodes[b.0].value.len()])
        } else {
            None
        };
        run(
            xv,
            wv,
            gout,
            gx.as_deref_mut(),
            gw.as_deref_mut(),
            gb.as_deref_mut(),
        );
        if let Some(v) = gx {
            let arr = ArrayD::from_shape_vec(self.nodes[x.0].value.raw_dim(), v).unwrap();
            self.acc(grads, x, arr);
        }
        if let Some(v) = gw {
            let arr = ArrayD::from_shape_vec(self.nodes[w.0].value.raw_dim(), v).unwrap();
            self.acc(grads, w, arr);
        }
        if let Some(v) = gb {
            let arr = ArrayD::from_shape_vec(self.nodes[b.0].value.raw_dim(), v).unwrap();
            self.acc(grads, b, arr);
        }
    }
}

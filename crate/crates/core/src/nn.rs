//! Learnable parameter store and the convolution / normalization layers the
//! networks are assembled from.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Index-based constructor for harness code that drives layers through
    /// [`Binding::from_nodes`].
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// All learnable parameters of a model, keyed by dotted module path.
/// Registration order is deterministic, so optimizer state and checkpoints
/// can index by position.
pub struct Params<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn set_by_name(&mut self, name: &str, value: ArrayD<T>) -> crate::Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| crate::Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.values[idx].shape() != value.shape() {
            return Err(crate::Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, checkpoint holds {:?}",
                self.values[idx].shape(),
                value.shape()
            )));
        }
        self.values[idx] = value;
        Ok(())
    }

    /// Push every parameter onto a tape. `trainable(name)` controls whether
    /// the leaf participates in gradient computation.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        let nodes = self
            .names
            .iter()
            .zip(self.values.iter())
            .map(|(n, v)| {
                if trainable(n) {
                    tape.var(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Binding { nodes }
    }

    pub fn bind_all(&self, tape: &mut Tape<T>) -> Binding {
        self.bind(tape, |_| true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Binding {
        self.bind(tape, |_| false)
    }

    /// Frozen binding with one parameter replaced by an existing node, used
    /// by the gradient checks to probe a single tensor.
    pub fn bind_with_override(
        &self,
        tape: &mut Tape<T>,
        name: &str,
        node: NodeId,
    ) -> Binding {
        let nodes = self
            .names
            .iter()
            .zip(self.values.iter())
            .map(|(n, v)| {
                if n == name {
                    node
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Binding { nodes }
    }
}

/// Node ids of one tape binding of a parameter set.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Binding over externally created nodes, for harness code that drives
    /// layers without a parameter store.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Binding { nodes }
    }
}

/// He-style uniform initialization over [-b, b] with b = sqrt(6 / fan_in).
pub fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::zero())
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            he_uniform(rng, &[cout, cin, k, k], cin * k * k),
        );
        let b = params.add(format!("{name}.b"), zeros(&[cout]));
        Conv2dLayer { w, b, stride }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        tape.conv2d(x, bind.node(self.w), bind.node(self.b), self.stride)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv3dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv3dLayer {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            he_uniform(rng, &[cout, cin, k, k, k], cin * k * k * k),
        );
        let b = params.add(format!("{name}.b"), zeros(&[cout]));
        Conv3dLayer { w, b, stride }
    }

    /// Zero-initialized variant for residual output layers that must start
    /// as the identity.
    pub fn zeroed<T: Scalar>(
        params: &mut Params<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let w = params.add(format!("{name}.w"), zeros(&[cout, cin, k, k, k]));
        let b = params.add(format!("{name}.b"), zeros(&[cout]));
        Conv3dLayer { w, b, stride: 1 }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        tape.conv3d(x, bind.node(self.w), bind.node(self.b), self.stride)
    }
}

/// Per-channel normalization with learnable gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct NormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormLayer {
    pub fn new<T: Scalar>(params: &mut Params<T>, name: &str, channels: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), ones(&[channels]));
        let bias = params.add(format!("{name}.bias"), zeros(&[channels]));
        NormLayer { gain, bias }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        tape.channel_norm(x, bind.node(self.gain), bind.node(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn params_register_and_lookup() {
        let mut p = Params::<f64>::new();
        let a = p.add("layer.w", zeros(&[2, 3]));
        let b = p.add("layer.b", ones(&[2]));
        assert_eq!(p.name(a), "layer.w");
        assert_eq!(p.value(b).len(), 2);
        assert_eq!(p.len(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut p = Params::<f64>::new();
        p.add("x", zeros(&[1]));
        p.add("x", zeros(&[1]));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a: ArrayD<f64> = he_uniform(&mut r1, &[4, 4], 16);
        let b: ArrayD<f64> = he_uniform(&mut r2, &[4, 4], 16);
        assert_eq!(a, b);
    }
}

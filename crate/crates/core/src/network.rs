//! Plain and densely connected MLPs and ConvNets.
//!
//! Hidden layers are numbered `1..=depth` and layer `0` is the input. In a
//! plain network layer `l` reads only layer `l-1`; in a dense network it reads
//! every earlier layer including the input, and its pre-activation is the sum
//! of one linear (or convolution) contribution per source plus a bias. That
//! sum is the same as one weight block applied to the concatenation of all
//! sources. The classifier reads the last hidden layer only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::ops;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mlp,
    Conv,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Mlp => "mlp",
            Family::Conv => "conv",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Family::Mlp),
            "conv" => Ok(Family::Conv),
            other => Err(format!("unknown network family '{other}'")),
        }
    }
}

/// Convolution kernel side length.
pub const KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    pub dense: bool,
    /// Number of hidden layers.
    pub depth: usize,
    /// MLP hidden width.
    pub hidden_units: usize,
    /// Output channels of every conv layer.
    pub channels_per_layer: usize,
    pub activation: Activation,
    /// Per-example input shape: `[features]` for MLPs, `[channels, h, w]` for
    /// ConvNets.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl NetworkSpec {
    /// MNIST-sized network with the standard widths (128 units, 16 channels).
    pub fn mnist(family: Family, dense: bool, depth: usize, activation: Activation) -> Self {
        let input_shape = match family {
            Family::Mlp => vec![784],
            Family::Conv => vec![1, 28, 28],
        };
        Self {
            family,
            dense,
            depth,
            hidden_units: 128,
            channels_per_layer: 16,
            activation,
            input_shape,
            num_classes: 10,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad("input_shape must have positive dimensions");
        }
        if matches!(self.activation, Activation::Softmax) {
            return bad("softmax is not a hidden-layer activation");
        }
        match self.family {
            Family::Mlp => {
                if self.hidden_units == 0 {
                    return bad("hidden_units must be positive");
                }
            }
            Family::Conv => {
                if self.channels_per_layer == 0 {
                    return bad("channels_per_layer must be positive");
                }
                if self.input_shape.len() != 3 {
                    return bad("conv input_shape must be [channels, height, width]");
                }
            }
        }
        Ok(())
    }

    /// Source layers feeding hidden layer `l`.
    pub fn sources(&self, l: usize) -> Vec<usize> {
        if self.dense {
            (0..l).collect()
        } else {
            vec![l - 1]
        }
    }

    /// Every `(dest, source)` pair with a forward weight, in a fixed order.
    pub fn connections(&self) -> Vec<(usize, usize)> {
        (1..=self.depth)
            .flat_map(|l| self.sources(l).into_iter().map(move |j| (l, j)))
            .collect()
    }

    pub fn is_connected(&self, dest: usize, source: usize) -> bool {
        dest >= 1 && dest <= self.depth && source < dest && (self.dense || source + 1 == dest)
    }

    /// Per-example shape of layer `l` (`0` is the input).
    pub fn layer_shape(&self, l: usize) -> Vec<usize> {
        if l == 0 {
            return self.input_shape.clone();
        }
        match self.family {
            Family::Mlp => vec![self.hidden_units],
            Family::Conv => vec![
                self.channels_per_layer,
                self.input_shape[1],
                self.input_shape[2],
            ],
        }
    }

    fn layer_features(&self, l: usize) -> usize {
        self.layer_shape(l)[0]
    }

    pub fn weight_shape(&self, dest: usize, source: usize) -> Vec<usize> {
        let n_out = self.layer_features(dest);
        let n_in = self.layer_features(source);
        match self.family {
            Family::Mlp => vec![n_out, n_in],
            Family::Conv => vec![n_out, n_in, KERNEL_SIZE, KERNEL_SIZE],
        }
    }

    pub fn classifier_shape(&self) -> [usize; 2] {
        [
            self.num_classes,
            self.layer_shape(self.depth).iter().product(),
        ]
    }

    /// Batched shape of layer `l`.
    pub fn batch_shape(&self, l: usize, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(self.layer_shape(l));
        s
    }
}

/// Glorot-style normal initialization, `std = sqrt(2 / (fan_in + fan_out))`.
pub fn init_stddev(shape: &[usize]) -> f64 {
    let receptive: usize = shape[2..].iter().product();
    let fan_out = shape[0] * receptive;
    let fan_in = shape[1] * receptive;
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Adds `op(h_source)` for the connection into `out`.
pub(crate) fn accumulate_connection<T: Scalar>(
    family: Family,
    out: &mut Tensor<T>,
    source: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<()> {
    match family {
        Family::Mlp => ops::linear_accumulate(out, source, weight),
        Family::Conv => ops::conv2d_accumulate(out, source, weight),
    }
}

/// Adds `op^T(delta)` into `grad_source`, transporting with `weight`.
pub(crate) fn transpose_connection<T: Scalar>(
    family: Family,
    grad_source: &mut Tensor<T>,
    delta: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<()> {
    match family {
        Family::Mlp => ops::linear_input_grad_accumulate(grad_source, delta, weight),
        Family::Conv => ops::conv2d_input_grad_accumulate(grad_source, delta, weight),
    }
}

pub(crate) fn connection_weight_grad<T: Scalar>(
    family: Family,
    delta: &Tensor<T>,
    source: &Tensor<T>,
    weight_shape: &[usize],
) -> Result<Tensor<T>> {
    match family {
        Family::Mlp => ops::linear_weight_grad(delta, source),
        Family::Conv => ops::conv2d_weight_grad(delta, source, weight_shape),
    }
}

/// Named access to every trainable tensor of a parameter container.
pub trait ParamTree<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;
}

/// Checks that two containers have identical names and shapes, in order.
pub fn check_same_layout<T: Scalar, A: ParamTree<T>, B: ParamTree<T>>(a: &A, b: &B) -> Result<()> {
    let ta = a.tensors();
    let tb = b.tensors();
    if ta.len() != tb.len() {
        return Err(Error::KeyMismatch(format!(
            "{} tensors vs {} tensors",
            ta.len(),
            tb.len()
        )));
    }
    for ((na, xa), (nb, xb)) in ta.iter().zip(&tb) {
        if na != nb {
            return Err(Error::KeyMismatch(format!("'{na}' vs '{nb}'")));
        }
        if xa.shape() != xb.shape() {
            return Err(Error::KeyMismatch(format!(
                "'{na}' has shape {:?} vs {:?}",
                xa.shape(),
                xb.shape()
            )));
        }
    }
    Ok(())
}

/// Forward parameters: one weight per connected `(dest, source)` pair, one
/// bias per hidden layer, and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub weights: BTreeMap<(usize, usize), Tensor<T>>,
    pub biases: BTreeMap<usize, Tensor<T>>,
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

/// Per-parameter update directions, laid out exactly like [`ParameterSet`].
pub type GradientSet<T> = ParameterSet<T>;

impl<T: Scalar> ParameterSet<T> {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut weights = BTreeMap::new();
        for (l, j) in spec.connections() {
            weights.insert((l, j), Tensor::zeros(&spec.weight_shape(l, j))?);
        }
        let mut biases = BTreeMap::new();
        for l in 1..=spec.depth {
            biases.insert(l, Tensor::zeros(&[spec.layer_features(l)])?);
        }
        Ok(Self {
            weights,
            biases,
            classifier_weight: Tensor::zeros(&spec.classifier_shape())?,
            classifier_bias: Tensor::zeros(&[spec.num_classes])?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|(k, v)| (*k, v.zeros_like())).collect(),
            biases: self.biases.iter().map(|(k, v)| (*k, v.zeros_like())).collect(),
            classifier_weight: self.classifier_weight.zeros_like(),
            classifier_bias: self.classifier_bias.zeros_like(),
        }
    }

    pub fn weight(&self, dest: usize, source: usize) -> Result<&Tensor<T>> {
        self.weights
            .get(&(dest, source))
            .ok_or(Error::MissingConnection {
                kind: "forward weight",
                dest,
                src: source,
            })
    }

    pub fn bias(&self, l: usize) -> Result<&Tensor<T>> {
        self.biases.get(&l).ok_or(Error::MissingConnection {
            kind: "bias",
            dest: l,
            src: l,
        })
    }

    /// Number of weight matrices/kernels including the classifier.
    pub fn num_weight_tensors(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Fails unless the parameter layout is exactly what `spec` prescribes.
    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        check_same_layout(self, &ParameterSet::<T>::zeros(spec)?)
    }
}

impl<T: Scalar> ParamTree<T> for ParameterSet<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .weights
            .iter()
            .map(|((l, j), t)| (format!("w.{l}.{j}"), t))
            .collect();
        out.extend(self.biases.iter().map(|(l, t)| (format!("b.{l}"), t)));
        out.push(("classifier.w".into(), &self.classifier_weight));
        out.push(("classifier.b".into(), &self.classifier_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = self
            .weights
            .iter_mut()
            .map(|((l, j), t)| (format!("w.{l}.{j}"), t))
            .collect();
        out.extend(self.biases.iter_mut().map(|(l, t)| (format!("b.{l}"), t)));
        out.push(("classifier.w".into(), &mut self.classifier_weight));
        out.push(("classifier.b".into(), &mut self.classifier_bias));
        out
    }
}

/// Allocates and initializes all forward parameters from `spec.init_seed`.
/// Weights are Gaussian with [`init_stddev`]; biases start at zero.
pub fn build_network<T: Scalar>(spec: &NetworkSpec) -> Result<ParameterSet<T>> {
    let mut params = ParameterSet::zeros(spec)?;
    let mut rng = RngStream::new(spec.init_seed);
    for (key, w) in params.weights.iter_mut() {
        let shape = spec.weight_shape(key.0, key.1);
        *w = rng.normal(&shape, init_stddev(&shape))?;
    }
    let shape = spec.classifier_shape();
    params.classifier_weight = rng.normal(&shape, init_stddev(&shape))?;
    Ok(params)
}

/// Everything a learning rule needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    /// `pre_activations[l - 1]` is the argument of the activation at hidden
    /// layer `l`.
    pub pre_activations: Vec<Tensor<T>>,
    /// `activations[0]` is the input batch, `activations[l]` is `h_l`.
    pub activations: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn pre(&self, l: usize) -> &Tensor<T> {
        &self.pre_activations[l - 1]
    }

    pub fn h(&self, l: usize) -> &Tensor<T> {
        &self.activations[l]
    }

    pub fn depth(&self) -> usize {
        self.pre_activations.len()
    }

    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

/// Reshapes a batch to `[batch, input_shape...]`, accepting any layout with
/// the right number of features per example.
pub fn shape_input<T: Scalar>(spec: &NetworkSpec, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let features: usize = spec.input_shape.iter().product();
    if batch.row_len() != features {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: batch.shape().to_vec(),
            right: spec.input_shape.clone(),
        });
    }
    batch.clone().reshape(&spec.batch_shape(0, batch.rows()))
}

/// Pre-activation of hidden layer `l` given the recorded source activations.
pub(crate) fn layer_pre_activation<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    activations: &[Tensor<T>],
    l: usize,
) -> Result<Tensor<T>> {
    let batch = activations[0].rows();
    let mut pre = Tensor::zeros(&spec.batch_shape(l, batch))?;
    for j in spec.sources(l) {
        accumulate_connection(spec.family, &mut pre, &activations[j], params.weight(l, j)?)?;
    }
    ops::add_bias(&mut pre, params.bias(l)?)?;
    Ok(pre)
}

pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    batch: &Tensor<T>,
) -> Result<ActivationTrace<T>> {
    spec.validate()?;
    let input = shape_input(spec, batch)?;
    let mut activations = Vec::with_capacity(spec.depth + 1);
    let mut pre_activations = Vec::with_capacity(spec.depth);
    activations.push(input);
    for l in 1..=spec.depth {
        let pre = layer_pre_activation(spec, params, &activations, l)?;
        activations.push(spec.activation.apply(&pre));
        pre_activations.push(pre);
    }
    let logits = ops::linear_forward(
        &activations[spec.depth],
        &params.classifier_weight,
        &params.classifier_bias,
    )?;
    Ok(ActivationTrace {
        pre_activations,
        activations,
        logits,
    })
}

/// Logits only, without keeping the trace.
pub fn predict<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(forward(spec, params, batch)?.logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(family: Family, dense: bool, depth: usize) -> NetworkSpec {
        let mut s = NetworkSpec::mnist(family, dense, depth, Activation::Sigmoid);
        match family {
            Family::Mlp => {
                s.input_shape = vec![5];
                s.hidden_units = 4;
            }
            Family::Conv => {
                s.input_shape = vec![2, 4, 3];
                s.channels_per_layer = 3;
            }
        }
        s.num_classes = 3;
        s.init_seed = 11;
        s
    }

    #[test]
    fn weight_counts() {
        let dense = NetworkSpec::mnist(Family::Mlp, true, 3, Activation::Sigmoid);
        let p: ParameterSet<f64> = build_network(&dense).unwrap();
        assert_eq!(p.weights.len(), 6);
        assert_eq!(p.num_weight_tensors(), 7);
        assert_eq!(p.weight(3, 0).unwrap().shape(), &[128, 784]);
        assert_eq!(p.weight(3, 2).unwrap().shape(), &[128, 128]);

        let plain = NetworkSpec::mnist(Family::Mlp, false, 3, Activation::Sigmoid);
        let p: ParameterSet<f64> = build_network(&plain).unwrap();
        assert_eq!(p.weights.len(), 3);
        assert!(p.weights.keys().all(|&(l, j)| j + 1 == l));
    }

    #[test]
    fn conv_dense_weight_shapes() {
        let spec = NetworkSpec::mnist(Family::Conv, true, 3, Activation::Relu);
        let p: ParameterSet<f32> = build_network(&spec).unwrap();
        assert_eq!(p.weight(1, 0).unwrap().shape(), &[16, 1, 3, 3]);
        assert_eq!(p.weight(3, 1).unwrap().shape(), &[16, 16, 3, 3]);
        assert_eq!(p.classifier_weight.shape(), &[10, 16 * 28 * 28]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small(Family::Mlp, false, 2);
        s.depth = 0;
        assert!(matches!(build_network::<f64>(&s), Err(Error::InvalidSpec(_))));
        let mut s = small(Family::Mlp, false, 2);
        s.hidden_units = 0;
        assert!(build_network::<f64>(&s).is_err());
        let mut s = small(Family::Conv, false, 2);
        s.input_shape = vec![4];
        assert!(build_network::<f64>(&s).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let s = small(Family::Conv, true, 3);
        let a: ParameterSet<f64> = build_network(&s).unwrap();
        let b: ParameterSet<f64> = build_network(&s).unwrap();
        assert_eq!(a, b);
        let mut s2 = s.clone();
        s2.init_seed += 1;
        assert_ne!(a, build_network::<f64>(&s2).unwrap());
    }

    #[test]
    fn zero_params_sigmoid_gives_half_everywhere() {
        let s = small(Family::Mlp, true, 3);
        let p = ParameterSet::<f64>::zeros(&s).unwrap();
        let x = RngStream::new(1).normal(&[2, 5], 1.0).unwrap();
        let trace = forward(&s, &p, &x).unwrap();
        for l in 1..=3 {
            assert!(trace.h(l).data().iter().all(|&v| v == 0.5));
        }
        assert!(trace.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let s = small(Family::Mlp, false, 2);
        let p: ParameterSet<f64> = build_network(&s).unwrap();
        let x = Tensor::zeros(&[2, 6]).unwrap();
        assert!(matches!(forward(&s, &p, &x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn trace_activations_are_activation_of_pre() {
        for family in [Family::Mlp, Family::Conv] {
            let s = small(family, true, 3);
            let p: ParameterSet<f64> = build_network(&s).unwrap();
            let n: usize = s.input_shape.iter().product();
            let x = RngStream::new(2).normal(&[3, n], 1.0).unwrap();
            let trace = forward(&s, &p, &x).unwrap();
            for l in 1..=3 {
                assert_eq!(trace.h(l), &s.activation.apply(trace.pre(l)));
                assert_eq!(trace.h(l).shape(), &s.batch_shape(l, 3)[..]);
            }
            assert_eq!(forward(&s, &p, &x).unwrap(), trace);
        }
    }

    #[test]
    fn param_tree_names_are_ordered_and_complete() {
        let s = small(Family::Mlp, true, 2);
        let p: ParameterSet<f64> = build_network(&s).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["w.1.0", "w.2.0", "w.2.1", "b.1", "b.2", "classifier.w", "classifier.b"]
        );
        p.check_spec(&s).unwrap();
        let plain = small(Family::Mlp, false, 2);
        assert!(p.check_spec(&plain).is_err());
    }
}

//! Difference target propagation over plain and dense layer graphs.
//!
//! Every forward connection `(j, l)` between hidden layers `l < j` gets its
//! own decoder `g_{j->l}(h) = act(V h + c)` mapping layer `j` back to layer
//! `l`. The top hidden layer's target is a gradient step on the output loss;
//! lower targets use the difference correction
//!
//! ```text
//! target_l = h_l - sum_{j > l} (g_{j->l}(h_j) - g_{j->l}(target_j))
//! ```
//!
//! so decoder error cancels exactly when a layer's target equals its
//! activation.

use std::collections::BTreeMap;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::loss::softmax_xent_per_example_grad;
use crate::network::{
    accumulate_connection, connection_weight_grad, init_stddev, ActivationTrace, Family,
    GradientSet, NetworkSpec, ParamTree, ParameterSet,
};
use crate::ops;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::check_trace;

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Decoder parameters keyed by `(from, to)` with `from > to >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSet<T> {
    pub decoders: BTreeMap<(usize, usize), Decoder<T>>,
    pub activation: Activation,
}

/// Hidden-to-hidden pairs that need a decoder, in a fixed order.
pub(crate) fn decoder_pairs(spec: &NetworkSpec) -> Vec<(usize, usize)> {
    spec.connections()
        .into_iter()
        .filter(|&(_, j)| j >= 1)
        .collect()
}

impl<T: Scalar> DecoderSet<T> {
    fn build(spec: &NetworkSpec, mut init: impl FnMut(&[usize]) -> Result<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let mut decoders = BTreeMap::new();
        for (from, to) in decoder_pairs(spec) {
            // inverse direction of the forward weight W_{from,to}
            let shape = spec.weight_shape(to, from);
            let weight = init(&shape)?;
            let bias = Tensor::zeros(&[shape[0]])?;
            decoders.insert((from, to), Decoder { weight, bias });
        }
        Ok(Self {
            decoders,
            activation: spec.activation,
        })
    }

    pub fn random(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed);
        Self::build(spec, |shape| rng.normal(shape, init_stddev(shape)))
    }

    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        Self::build(spec, Tensor::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            decoders: self
                .decoders
                .iter()
                .map(|(k, d)| {
                    (
                        *k,
                        Decoder {
                            weight: d.weight.zeros_like(),
                            bias: d.bias.zeros_like(),
                        },
                    )
                })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn get(&self, from: usize, to: usize) -> Result<&Decoder<T>> {
        self.decoders.get(&(from, to)).ok_or(Error::MissingConnection {
            kind: "decoder",
            dest: to,
            src: from,
        })
    }

    /// `g_{from->to}(h)`.
    pub fn decode(&self, family: Family, from: usize, to: usize, h: &Tensor<T>) -> Result<Tensor<T>> {
        let (pre, _) = self.decode_pre(family, from, to, h)?;
        Ok(self.activation.apply(&pre))
    }

    fn decode_pre(
        &self,
        family: Family,
        from: usize,
        to: usize,
        h: &Tensor<T>,
    ) -> Result<(Tensor<T>, &Decoder<T>)> {
        let d = self.get(from, to)?;
        let mut shape = vec![h.rows()];
        match family {
            Family::Mlp => shape.push(d.weight.shape()[0]),
            Family::Conv => shape.extend([d.weight.shape()[0], h.shape()[2], h.shape()[3]]),
        }
        let mut pre = Tensor::zeros(&shape)?;
        accumulate_connection(family, &mut pre, h, &d.weight)?;
        ops::add_bias(&mut pre, &d.bias)?;
        Ok((pre, d))
    }

    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        for (from, to) in decoder_pairs(spec) {
            let d = self.get(from, to)?;
            let want = spec.weight_shape(to, from);
            if d.weight.shape() != &want[..] {
                return Err(Error::ShapeMismatch {
                    op: "decoder",
                    left: d.weight.shape().to_vec(),
                    right: want,
                });
            }
        }
        if self.decoders.len() != decoder_pairs(spec).len() {
            return Err(Error::KeyMismatch("decoder set has extra entries".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> ParamTree<T> for DecoderSet<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(self.decoders.len() * 2);
        for ((from, to), d) in &self.decoders {
            out.push((format!("dec.w.{from}.{to}"), &d.weight));
            out.push((format!("dec.b.{from}.{to}"), &d.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(self.decoders.len() * 2);
        for ((from, to), d) in &mut self.decoders {
            out.push((format!("dec.w.{from}.{to}"), &mut d.weight));
            out.push((format!("dec.b.{from}.{to}"), &mut d.bias));
        }
        out
    }
}

/// Target activations for every hidden layer and for the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet<T> {
    /// `targets[&l]` for `l = 1..=depth`.
    pub targets: BTreeMap<usize, Tensor<T>>,
    pub output: Tensor<T>,
    /// Step size used to form the output and top-layer targets.
    pub step: T,
}

impl<T: Scalar> TargetSet<T> {
    pub fn get(&self, l: usize) -> Result<&Tensor<T>> {
        self.targets.get(&l).ok_or(Error::MissingConnection {
            kind: "target",
            dest: l,
            src: l,
        })
    }
}

/// Propagates given top-layer and output targets down through the decoders.
pub fn dtp_targets_from_top<T: Scalar>(
    spec: &NetworkSpec,
    decoders: &DecoderSet<T>,
    trace: &ActivationTrace<T>,
    top: Tensor<T>,
    output: Tensor<T>,
    step: T,
) -> Result<TargetSet<T>> {
    check_trace(spec, trace)?;
    decoders.check_spec(spec)?;
    trace.h(spec.depth).same_shape(&top, "dtp_targets")?;
    trace.logits.same_shape(&output, "dtp_targets")?;

    let mut targets = BTreeMap::new();
    targets.insert(spec.depth, top);
    for l in (1..spec.depth).rev() {
        let mut target = trace.h(l).clone();
        for j in (l + 1)..=spec.depth {
            if !spec.is_connected(j, l) {
                continue;
            }
            let from_h = decoders.decode(spec.family, j, l, trace.h(j))?;
            let from_target = decoders.decode(spec.family, j, l, &targets[&j])?;
            // exactly zero when targets[j] == h_j
            let correction = from_h.sub(&from_target)?;
            target.axpy(-T::one(), &correction)?;
        }
        targets.insert(l, target);
    }
    Ok(TargetSet {
        targets,
        output,
        step,
    })
}

/// Targets for one batch.
///
/// The top hidden layer moves against the per-example output-loss gradient,
/// `target_L = h_L - step * dloss_i/dh_L`; the logits target is formed the
/// same way. Lower layers follow the difference correction.
pub fn dtp_targets<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    decoders: &DecoderSet<T>,
    trace: &ActivationTrace<T>,
    labels: &[usize],
    target_step: T,
) -> Result<TargetSet<T>> {
    params.check_spec(spec)?;
    check_trace(spec, trace)?;
    let out_grad = softmax_xent_per_example_grad(&trace.logits, labels)?;
    let mut dh_top = trace.h(spec.depth).zeros_like();
    ops::linear_input_grad_accumulate(&mut dh_top, &out_grad, &params.classifier_weight)?;

    let mut top = trace.h(spec.depth).clone();
    top.axpy(-target_step, &dh_top)?;
    let mut output = trace.logits.clone();
    output.axpy(-target_step, &out_grad)?;
    dtp_targets_from_top(spec, decoders, trace, top, output, target_step)
}

/// Gradients of the local layer losses `mean_b ||h_l - target_l||^2`.
///
/// Each layer's loss is differentiated through its own weights and bias only,
/// with the recorded source activations held fixed. The classifier minimizes
/// `mean_b ||logits - target_out||^2 / (2 step)`, whose gradient is the true
/// output-loss gradient when the output target came from [`dtp_targets`].
pub fn dtp_forward_grads<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    trace: &ActivationTrace<T>,
    targets: &TargetSet<T>,
) -> Result<GradientSet<T>> {
    params.check_spec(spec)?;
    check_trace(spec, trace)?;
    let batch = T::lit(trace.batch_size() as f64);
    let mut grads = params.zeros_like();
    for l in 1..=spec.depth {
        let target = targets.get(l)?;
        let err = trace.h(l).sub(target)?;
        let mut delta = err.mul(&spec.activation.derivative(trace.pre(l)))?;
        delta.scale(T::lit(2.0) / batch);
        for j in spec.sources(l) {
            let shape = spec.weight_shape(l, j);
            let g = connection_weight_grad(spec.family, &delta, trace.h(j), &shape)?;
            grads.weights.insert((l, j), g);
        }
        grads.biases.insert(l, ops::bias_grad(&delta)?);
    }

    let mut out_delta = trace.logits.sub(&targets.output)?;
    if targets.step == T::zero() {
        out_delta = out_delta.zeros_like();
    } else {
        out_delta.scale(T::one() / (targets.step * batch));
    }
    grads.classifier_weight = ops::linear_weight_grad(&out_delta, trace.h(spec.depth))?;
    grads.classifier_bias = ops::bias_grad(&out_delta)?;
    Ok(grads)
}

/// Gradients of the noisy reconstruction losses with respect to the decoders.
///
/// For each pair `(j, l)`: corrupt `c = h_l + noise`, push `c` through the
/// forward connection `W_{j,l}` while holding layer `j`'s other inputs at
/// their recorded values, decode, and penalize `mean_b ||g(f) - c||^2`.
/// Noise is drawn from `rng` pair by pair in key order.
pub fn dtp_decoder_grads<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    decoders: &DecoderSet<T>,
    trace: &ActivationTrace<T>,
    noise_std: f64,
    rng: &mut RngStream,
) -> Result<DecoderSet<T>> {
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise_std must be non-negative, got {noise_std}"
        )));
    }
    params.check_spec(spec)?;
    check_trace(spec, trace)?;
    decoders.check_spec(spec)?;
    let batch = T::lit(trace.batch_size() as f64);
    let mut grads = decoders.zeros_like();
    for (&(from, to), grad) in grads.decoders.iter_mut() {
        let h_to = trace.h(to);
        let noise: Tensor<T> = rng.noise(h_to.shape(), noise_std)?;
        let corrupted = h_to.add(&noise)?;

        // pre_from - W h_to + W c = pre_from + W noise
        let mut pre = trace.pre(from).clone();
        if noise_std > 0.0 {
            accumulate_connection(spec.family, &mut pre, &noise, params.weight(from, to)?)?;
        }
        let f = spec.activation.apply(&pre);

        let (dec_pre, _) = decoders.decode_pre(spec.family, from, to, &f)?;
        let recon = decoders.activation.apply(&dec_pre);
        let err = recon.sub(&corrupted)?;
        let mut delta = err.mul(&decoders.activation.derivative(&dec_pre))?;
        delta.scale(T::lit(2.0) / batch);
        grad.weight = connection_weight_grad(spec.family, &delta, &f, grad.weight.shape())?;
        grad.bias = ops::bias_grad(&delta)?;
    }
    Ok(grads)
}

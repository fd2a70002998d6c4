use crate::error::{Error, Result};
use crate::loss::softmax_xent;
use crate::network::{
    connection_weight_grad, transpose_connection, ActivationTrace, Family, GradientSet,
    NetworkSpec, ParameterSet,
};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{check_trace, FeedbackSet};

/// How error signals travel from a layer back to its sources.
#[derive(Debug, Clone, Copy)]
pub enum Transport<'a, T> {
    /// Transposed forward weights (backpropagation).
    Exact,
    /// Fixed random matrices (feedback alignment).
    Feedback(&'a FeedbackSet<T>),
}

fn transport_into<T: Scalar>(
    family: Family,
    transport: Transport<'_, T>,
    params: &ParameterSet<T>,
    grad_source: &mut Tensor<T>,
    delta: &Tensor<T>,
    dest: usize,
    source: usize,
) -> Result<()> {
    match transport {
        Transport::Exact => {
            transpose_connection(family, grad_source, delta, params.weight(dest, source)?)
        }
        Transport::Feedback(fb) => {
            let b = fb.get(dest, source)?;
            match family {
                Family::Mlp => ops::linear_feedback_accumulate(grad_source, delta, b),
                Family::Conv => ops::conv2d_input_grad_accumulate(grad_source, delta, b),
            }
        }
    }
}

/// Reverse accumulation over the layer DAG.
///
/// Returns the gradient set and the hidden deltas `delta_l = dL/dpre_l`
/// (index `l - 1`). Each layer's delta is complete before it is used, because
/// every successor of `l` has a larger index and is visited first.
fn reverse_accumulate<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    trace: &ActivationTrace<T>,
    output_grad: &Tensor<T>,
    transport: Transport<'_, T>,
) -> Result<(GradientSet<T>, Vec<Tensor<T>>)> {
    params.check_spec(spec)?;
    check_trace(spec, trace)?;
    if let Transport::Feedback(fb) = transport {
        fb.check_spec(spec)?;
    }
    trace.logits.same_shape(output_grad, "backward")?;

    let depth = spec.depth;
    let batch = trace.batch_size();
    let mut grads = params.zeros_like();
    grads.classifier_weight = ops::linear_weight_grad(output_grad, trace.h(depth))?;
    grads.classifier_bias = ops::bias_grad(output_grad)?;

    let mut upstream: Vec<Option<Tensor<T>>> = vec![None; depth + 1];
    let mut top = Tensor::zeros(&spec.batch_shape(depth, batch))?;
    match transport {
        Transport::Exact => {
            ops::linear_input_grad_accumulate(&mut top, output_grad, &params.classifier_weight)?
        }
        Transport::Feedback(fb) => {
            ops::linear_feedback_accumulate(&mut top, output_grad, fb.classifier())?
        }
    }
    upstream[depth] = Some(top);

    let mut deltas = vec![None; depth];
    for l in (1..=depth).rev() {
        let dh = upstream[l].take().ok_or(Error::MissingConnection {
            kind: "upstream signal",
            dest: l,
            src: l,
        })?;
        let delta = dh.mul(&spec.activation.derivative(trace.pre(l)))?;
        for j in spec.sources(l) {
            let shape = spec.weight_shape(l, j);
            let g = connection_weight_grad(spec.family, &delta, trace.h(j), &shape)?;
            grads.weights.insert((l, j), g);
            if j >= 1 {
                let slot = upstream[j]
                    .get_or_insert_with(|| trace.h(j).zeros_like());
                transport_into(spec.family, transport, params, slot, &delta, l, j)?;
            }
        }
        grads.biases.insert(l, ops::bias_grad(&delta)?);
        deltas[l - 1] = Some(delta);
    }
    let deltas = deltas.into_iter().map(|d| d.expect("every layer visited")).collect();
    Ok((grads, deltas))
}

/// Backpropagation given `dL/dlogits` directly (any output loss).
pub fn bp_backward_from_output<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    trace: &ActivationTrace<T>,
    output_grad: &Tensor<T>,
) -> Result<GradientSet<T>> {
    Ok(reverse_accumulate(spec, params, trace, output_grad, Transport::Exact)?.0)
}

/// Batch-mean softmax cross-entropy gradients by exact backpropagation.
pub fn bp_backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    trace: &ActivationTrace<T>,
    labels: &[usize],
) -> Result<GradientSet<T>> {
    let (_, output_grad) = softmax_xent(&trace.logits, labels)?;
    bp_backward_from_output(spec, params, trace, &output_grad)
}

/// Feedback alignment given `dL/dlogits` directly.
///
/// Identical to [`bp_backward_from_output`] except that transport between
/// layers (including from the logits into the last hidden layer) uses the
/// fixed feedback matrices. Weight gradients keep the exact local form
/// `delta_l * h_j^T`.
pub fn fa_backward_from_output<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    feedback: &FeedbackSet<T>,
    trace: &ActivationTrace<T>,
    output_grad: &Tensor<T>,
) -> Result<GradientSet<T>> {
    Ok(reverse_accumulate(spec, params, trace, output_grad, Transport::Feedback(feedback))?.0)
}

pub fn fa_backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    feedback: &FeedbackSet<T>,
    trace: &ActivationTrace<T>,
    labels: &[usize],
) -> Result<GradientSet<T>> {
    let (_, output_grad) = softmax_xent(&trace.logits, labels)?;
    fa_backward_from_output(spec, params, feedback, trace, &output_grad)
}

/// Hidden-layer deltas `dL/dpre_l` for `l = 1..=depth` under either transport.
pub fn hidden_deltas<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    trace: &ActivationTrace<T>,
    output_grad: &Tensor<T>,
    transport: Transport<'_, T>,
) -> Result<Vec<Tensor<T>>> {
    Ok(reverse_accumulate(spec, params, trace, output_grad, transport)?.1)
}

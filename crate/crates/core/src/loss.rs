use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch-mean softmax cross-entropy and its gradient with respect to the
/// logits, `(softmax - onehot) / batch`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [batch, classes] = logits.dims2("softmax_xent")?;
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let inv_batch = T::one() / T::lit(batch as f64);
    let mut grad = logits.clone();
    let mut loss = T::zero();
    for (row, &label) in grad.data_mut().chunks_mut(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        // -log softmax[label] = log(total) - (z_label - max)
        loss += total.ln() - row[label].ln();
        for v in row.iter_mut() {
            *v = *v / total * inv_batch;
        }
        row[label] -= inv_batch;
    }
    Ok((loss * inv_batch, grad))
}

/// Per-example variant: `(softmax - onehot)` without the batch average.
pub fn softmax_xent_per_example_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let (_, mut grad) = softmax_xent(logits, labels)?;
    grad.scale(T::lit(labels.len() as f64));
    Ok(grad)
}

/// Batch-mean of `0.5 * ||output - target||^2` and its gradient.
pub fn mse<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let diff = output.sub(target)?;
    let inv_batch = T::one() / T::lit(output.rows() as f64);
    let loss = diff.dot(&diff)? * T::lit(0.5) * inv_batch;
    let mut grad = diff;
    grad.scale(inv_batch);
    Ok((loss, grad))
}

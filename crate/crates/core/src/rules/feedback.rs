use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{init_stddev, NetworkSpec, ParameterSet};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed backward matrices for feedback alignment, one per forward weight.
///
/// For MLP connections `(dest, source)` the matrix has the transposed shape
/// `[n_source, n_dest]`; for conv connections it is a kernel shaped like the
/// forward kernel and is applied through the transposed convolution. The
/// set exposes no mutable access, so nothing can train it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSet<T> {
    feedback: BTreeMap<(usize, usize), Tensor<T>>,
    classifier: Tensor<T>,
    seed: u64,
}

fn feedback_shape(spec: &NetworkSpec, dest: usize, source: usize) -> Vec<usize> {
    let w = spec.weight_shape(dest, source);
    match spec.family {
        crate::network::Family::Mlp => vec![w[1], w[0]],
        crate::network::Family::Conv => w,
    }
}

fn classifier_feedback_shape(spec: &NetworkSpec) -> Vec<usize> {
    let [classes, features] = spec.classifier_shape();
    vec![features, classes]
}

impl<T: Scalar> FeedbackSet<T> {
    /// Gaussian feedback drawn with the forward initialization scale.
    pub fn random(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::new(seed);
        let mut feedback = BTreeMap::new();
        for (l, j) in spec.connections() {
            let w_shape = spec.weight_shape(l, j);
            let b = rng.normal(&feedback_shape(spec, l, j), init_stddev(&w_shape))?;
            feedback.insert((l, j), b);
        }
        let cls = spec.classifier_shape();
        let classifier = rng.normal(&classifier_feedback_shape(spec), init_stddev(&cls))?;
        Ok(Self {
            feedback,
            classifier,
            seed,
        })
    }

    /// Feedback equal to the true transposes; FA then reduces to BP.
    pub fn from_transposes(spec: &NetworkSpec, params: &ParameterSet<T>) -> Result<Self> {
        params.check_spec(spec)?;
        let mut feedback = BTreeMap::new();
        for (&(l, j), w) in &params.weights {
            let b = match spec.family {
                crate::network::Family::Mlp => w.transpose()?,
                crate::network::Family::Conv => w.clone(),
            };
            feedback.insert((l, j), b);
        }
        Ok(Self {
            feedback,
            classifier: params.classifier_weight.transpose()?,
            seed: 0,
        })
    }

    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let mut feedback = BTreeMap::new();
        for (l, j) in spec.connections() {
            feedback.insert((l, j), Tensor::zeros(&feedback_shape(spec, l, j))?);
        }
        Ok(Self {
            feedback,
            classifier: Tensor::zeros(&classifier_feedback_shape(spec))?,
            seed: 0,
        })
    }

    /// Assembles a set from explicit matrices, validating it against `spec`.
    pub fn from_parts(
        spec: &NetworkSpec,
        feedback: BTreeMap<(usize, usize), Tensor<T>>,
        classifier: Tensor<T>,
        seed: u64,
    ) -> Result<Self> {
        let set = Self {
            feedback,
            classifier,
            seed,
        };
        set.check_spec(spec)?;
        Ok(set)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, dest: usize, source: usize) -> Result<&Tensor<T>> {
        self.feedback
            .get(&(dest, source))
            .ok_or(Error::MissingConnection {
                kind: "feedback matrix",
                dest,
                src: source,
            })
    }

    pub fn classifier(&self) -> &Tensor<T> {
        &self.classifier
    }

    pub fn len(&self) -> usize {
        self.feedback.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        for (l, j) in spec.connections() {
            let b = self.get(l, j)?;
            let want = feedback_shape(spec, l, j);
            if b.shape() != &want[..] {
                return Err(Error::ShapeMismatch {
                    op: "feedback",
                    left: b.shape().to_vec(),
                    right: want,
                });
            }
        }
        if let Some(&(l, j)) = self.feedback.keys().find(|&&(l, j)| !spec.is_connected(l, j)) {
            return Err(Error::KeyMismatch(format!(
                "feedback for unconnected pair {l} <- {j}"
            )));
        }
        let want = classifier_feedback_shape(spec);
        if self.classifier.shape() != &want[..] {
            return Err(Error::ShapeMismatch {
                op: "feedback",
                left: self.classifier.shape().to_vec(),
                right: want,
            });
        }
        Ok(())
    }
}

/// Read-only view, for checkpoints.
impl<T: Scalar> FeedbackSet<T> {
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .feedback
            .iter()
            .map(|((l, j), t)| (format!("fb.{l}.{j}"), t))
            .collect();
        out.push(("fb.classifier".into(), &self.classifier));
        out
    }
}

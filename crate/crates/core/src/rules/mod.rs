//! Credit-assignment rules.
//!
//! * [`bp_backward`]: exact reverse accumulation over the (dense) layer graph.
//! * [`fa_backward`]: the same recursion with every transposed forward weight
//!   replaced by a fixed random [`FeedbackSet`] matrix.
//! * [`dtp_targets`], [`dtp_forward_grads`], [`dtp_decoder_grads`]: difference
//!   target propagation with learned per-connection decoders.

mod backprop;
mod dtp;
mod feedback;

use serde::{Deserialize, Serialize};

pub use backprop::{
    bp_backward, bp_backward_from_output, fa_backward, fa_backward_from_output, hidden_deltas,
    Transport,
};
pub use dtp::{
    dtp_decoder_grads, dtp_forward_grads, dtp_targets, dtp_targets_from_top, Decoder, DecoderSet,
    TargetSet,
};
pub use feedback::FeedbackSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Bp,
    Fa,
    Dtp,
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rule::Bp => "bp",
            Rule::Fa => "fa",
            Rule::Dtp => "dtp",
        })
    }
}

impl std::str::FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bp" => Ok(Rule::Bp),
            "fa" => Ok(Rule::Fa),
            "dtp" => Ok(Rule::Dtp),
            other => Err(format!("unknown learning rule '{other}'")),
        }
    }
}

use crate::error::{Error, Result};
use crate::network::{ActivationTrace, NetworkSpec};
use crate::scalar::Scalar;

/// Rejects a trace that was not produced by a forward pass of `spec`.
pub(crate) fn check_trace<T: Scalar>(spec: &NetworkSpec, trace: &ActivationTrace<T>) -> Result<()> {
    let stale = |what: String| Err(Error::KeyMismatch(format!("stale trace: {what}")));
    if trace.depth() != spec.depth || trace.activations.len() != spec.depth + 1 {
        return stale(format!("depth {} vs spec depth {}", trace.depth(), spec.depth));
    }
    let batch = trace.batch_size();
    for l in 0..=spec.depth {
        let want = spec.batch_shape(l, batch);
        if trace.h(l).shape() != &want[..] {
            return stale(format!("layer {l} has shape {:?}, expected {want:?}", trace.h(l).shape()));
        }
        if l > 0 && trace.pre(l).shape() != &want[..] {
            return stale(format!("pre-activation {l} has shape {:?}", trace.pre(l).shape()));
        }
    }
    if trace.logits.shape() != [batch, spec.num_classes] {
        return stale(format!("logits have shape {:?}", trace.logits.shape()));
    }
    Ok(())
}

//! SGD training loop with validation early stopping.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::loss::softmax_xent;
use crate::network::{build_network, check_same_layout, forward, predict, NetworkSpec, ParamTree, ParameterSet};
use crate::rng::{mix_seed, RngStream};
use crate::rules::{
    bp_backward_from_output, dtp_decoder_grads, dtp_forward_grads, dtp_targets, fa_backward_from_output,
    DecoderSet, FeedbackSet, Rule,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SEED_FEEDBACK: u64 = 1;
const SEED_DECODERS: u64 = 2;
const SEED_NOISE: u64 = 3;
const SEED_BATCHES: u64 = 4;

/// Rows per forward pass during evaluation; only affects memory.
const EVAL_CHUNK: usize = 1000;

fn default_weight_decay() -> f64 {
    1e-5
}
fn default_batch_size() -> usize {
    128
}
fn default_eval_interval() -> usize {
    1000
}
fn default_patience() -> usize {
    10
}
fn default_target_step() -> f64 {
    0.5
}
fn default_noise_std() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub rule: Rule,
    pub network: NetworkSpec,
    pub learning_rate: f64,
    /// DTP decoder step size; defaults to `learning_rate`.
    #[serde(default)]
    pub decoder_learning_rate: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_iterations: usize,
    /// No early stop before this many SGD steps.
    pub early_stop_start: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Non-improving evaluations (after `early_stop_start`) tolerated.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Drives feedback, decoders, DTP noise and batch order. Weight init uses
    /// `network.init_seed`.
    #[serde(default)]
    pub seed: u64,
    /// DTP step from the top hidden activation toward lower output loss.
    #[serde(default = "default_target_step")]
    pub target_step: f64,
    /// Standard deviation of the DTP decoder-training corruption.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

impl TrainConfig {
    pub fn new(
        rule: Rule,
        network: NetworkSpec,
        learning_rate: f64,
        max_iterations: usize,
        early_stop_start: usize,
    ) -> Self {
        Self {
            rule,
            network,
            learning_rate,
            decoder_learning_rate: None,
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            max_iterations,
            early_stop_start,
            eval_interval: default_eval_interval(),
            patience: default_patience(),
            seed: 0,
            target_step: default_target_step(),
            noise_std: default_noise_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and > 0, got {}", self.learning_rate));
        }
        if let Some(d) = self.decoder_learning_rate {
            if !finite_nonneg(d) {
                return bad(format!("decoder_learning_rate must be finite and >= 0, got {d}"));
            }
        }
        if !finite_nonneg(self.weight_decay) {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if !finite_nonneg(self.target_step) || !finite_nonneg(self.noise_std) {
            return bad("target_step and noise_std must be finite and >= 0".into());
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.patience == 0 {
            return bad("batch_size, eval_interval and patience must be at least 1".into());
        }
        if self.early_stop_start > self.max_iterations {
            return bad(format!(
                "early_stop_start {} exceeds max_iterations {}",
                self.early_stop_start, self.max_iterations
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    /// Mean mini-batch loss since the previous evaluation; absent at step 0.
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub history: Vec<EvalPoint>,
    pub best_iteration: usize,
    pub best_val_accuracy: f64,
    /// Test accuracy of the parameters saved at `best_iteration`.
    pub test_accuracy: f64,
    pub stopped_at: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub record: RunRecord,
    pub best_params: ParameterSet<T>,
    pub final_params: ParameterSet<T>,
}

/// `theta -= lr * (grad + weight_decay * theta)` over matching trees.
pub fn sgd_step<T: Scalar, P: ParamTree<T>>(params: &mut P, grads: &P, lr: f64, weight_decay: f64) -> Result<()> {
    check_same_layout(params, grads)?;
    let lr = T::lit(lr);
    let wd = T::lit(weight_decay);
    for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (p, &g) in p.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * (g + wd * *p);
        }
    }
    Ok(())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose argmax logit equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct = (0..labels.len())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn evaluate<T: Scalar>(spec: &NetworkSpec, params: &ParameterSet<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let logits = predict(spec, params, &data.images.slice_rows(start, end)?)?;
        correct += (start..end)
            .filter(|&i| argmax(logits.row(i - start)) == data.labels[i])
            .count();
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Rule-specific state carried across steps.
enum RuleState<T> {
    Bp,
    Fa(FeedbackSet<T>),
    Dtp { decoders: DecoderSet<T>, noise: RngStream },
}

impl<T: Scalar> RuleState<T> {
    fn new(config: &TrainConfig) -> Result<Self> {
        let spec = &config.network;
        Ok(match config.rule {
            Rule::Bp => RuleState::Bp,
            Rule::Fa => RuleState::Fa(FeedbackSet::random(spec, mix_seed(config.seed, SEED_FEEDBACK))?),
            Rule::Dtp => RuleState::Dtp {
                decoders: DecoderSet::random(spec, mix_seed(config.seed, SEED_DECODERS))?,
                noise: RngStream::new(mix_seed(config.seed, SEED_NOISE)),
            },
        })
    }

    /// One SGD step on a batch; returns the batch loss before the update.
    fn step(
        &mut self,
        config: &TrainConfig,
        params: &mut ParameterSet<T>,
        images: &Tensor<T>,
        labels: &[usize],
    ) -> Result<f64> {
        let spec = &config.network;
        let trace = forward(spec, params, images)?;
        let (loss, out_grad) = softmax_xent(&trace.logits, labels)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Ok(loss);
        }
        let grads = match self {
            RuleState::Bp => bp_backward_from_output(spec, params, &trace, &out_grad)?,
            RuleState::Fa(fb) => fa_backward_from_output(spec, params, fb, &trace, &out_grad)?,
            RuleState::Dtp { decoders, noise } => {
                let dgrads = dtp_decoder_grads(spec, params, decoders, &trace, config.noise_std, noise)?;
                let dlr = config.decoder_learning_rate.unwrap_or(config.learning_rate);
                sgd_step(decoders, &dgrads, dlr, config.weight_decay)?;
                let targets = dtp_targets(spec, params, decoders, &trace, labels, T::lit(config.target_step))?;
                dtp_forward_grads(spec, params, &trace, &targets)?
            }
        };
        sgd_step(params, &grads, config.learning_rate, config.weight_decay)?;
        Ok(loss)
    }
}

/// Cycles through epochs of seeded shuffled batches.
struct BatchStream<'a, T> {
    data: &'a Dataset<T>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'a, T: Scalar> BatchStream<'a, T> {
    fn new(data: &'a Dataset<T>, batch_size: usize, seed: u64) -> Result<Self> {
        let first = data.batches(batch_size, mix_seed(seed, 0))?.order().to_vec();
        Ok(Self {
            data,
            batch_size,
            seed,
            epoch: 0,
            order: first,
            pos: 0,
        })
    }

    fn next_batch(&mut self) -> Result<(Tensor<T>, Vec<usize>)> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.order = self
                .data
                .batches(self.batch_size, mix_seed(self.seed, self.epoch))?
                .order()
                .to_vec();
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self.data.images.select_rows(idx)?;
        Ok((images, idx.iter().map(|&i| self.data.labels[i]).collect()))
    }
}

/// Trains one configuration and reports test accuracy at the best validation
/// checkpoint.
pub fn train_run<T: Scalar>(config: &TrainConfig, data: &Splits<T>) -> Result<RunRecord> {
    Ok(train_run_observed(config, data, |_, _| {})?.record)
}

/// [`train_run`] with a callback invoked after every evaluation.
pub fn train_run_observed<T: Scalar>(
    config: &TrainConfig,
    data: &Splits<T>,
    mut observer: impl FnMut(&EvalPoint, &ParameterSet<T>),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let spec = &config.network;
    let mut params: ParameterSet<T> = build_network(spec)?;
    let mut state = RuleState::new(config)?;
    let mut batches = BatchStream::new(&data.train, config.batch_size, mix_seed(config.seed, SEED_BATCHES))?;

    let mut history = Vec::new();
    let initial = EvalPoint {
        iteration: 0,
        train_loss: None,
        val_accuracy: evaluate(spec, &params, &data.val)?,
    };
    observer(&initial, &params);
    let mut best_val = initial.val_accuracy;
    let mut best_iteration = 0;
    let mut best_params = params.clone();
    history.push(initial);

    let mut stale = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stopped_at = 0;
    let mut diverged = false;
    for it in 1..=config.max_iterations {
        let (images, labels) = batches.next_batch()?;
        let loss = state.step(config, &mut params, &images, &labels)?;
        stopped_at = it;
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        loss_sum += loss;
        loss_count += 1;

        if it % config.eval_interval != 0 && it != config.max_iterations {
            continue;
        }
        let point = EvalPoint {
            iteration: it,
            train_loss: Some(loss_sum / loss_count as f64),
            val_accuracy: evaluate(spec, &params, &data.val)?,
        };
        loss_sum = 0.0;
        loss_count = 0;
        observer(&point, &params);
        if point.val_accuracy > best_val {
            best_val = point.val_accuracy;
            best_iteration = it;
            best_params = params.clone();
            stale = 0;
        } else if it >= config.early_stop_start {
            stale += 1;
        }
        history.push(point);
        if it >= config.early_stop_start && stale >= config.patience {
            break;
        }
    }

    let test_accuracy = evaluate(spec, &best_params, &data.test)?;
    Ok(TrainOutcome {
        record: RunRecord {
            config: config.clone(),
            history,
            best_iteration,
            best_val_accuracy: best_val,
            test_accuracy,
            stopped_at,
            diverged,
        },
        best_params,
        final_params: params,
    })
}

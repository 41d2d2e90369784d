//! Minibatch SGD with momentum, L2 weight decay, a step learning-rate
//! schedule and mask-gated updates.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::network::Network;

/// Rows per inference chunk in [`evaluate`].
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch counts after which the learning rate is multiplied by
    /// `lr_drop_factor`; a drop at `e` affects epochs `e, e+1, …` (0-based).
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Seed of the minibatch shuffling order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.1,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![40],
            lr_drop_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            ));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!(
                "lr_drop_factor must be positive, got {}",
                self.lr_drop_factor
            ));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_drop_epochs {:?} must be strictly increasing",
                self.lr_drop_epochs
            ));
        }
        if let Some(&e) = self
            .lr_drop_epochs
            .iter()
            .find(|&&e| e < 1 || e > self.epochs)
        {
            return bad(format!("lr drop epoch {e} outside [1, {}]", self.epochs));
        }
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Example-weighted mean training loss over the epoch.
    pub loss: f64,
    /// Accuracy on the minibatches as they were seen during the epoch.
    pub train_accuracy: f64,
    /// Held-out accuracy at the end of the epoch, when an evaluation set
    /// was supplied.
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }
}

/// One momentum SGD update from the gradients held in the parameter
/// tensors:
///
/// ```text
/// v ← momentum·v + (g + weight_decay·w)
/// w ← w − lr·v
/// ```
///
/// after which weights and buffers are forced to zero wherever the mask is
/// zero. Weight decay applies to biases too; biases are never masked.
pub fn sgd_step(net: &mut Network, cfg: &TrainConfig, lr: f64) -> Result<()> {
    for (layer, p) in net.param_layers().enumerate() {
        let finite = |g: Option<&[f64]>| g.is_none_or(|g| g.iter().all(|v| v.is_finite()));
        if !finite(p.weight.grad()) || !finite(p.bias.grad()) {
            return Err(Error::Training {
                layer,
                msg: "non-finite gradient".into(),
            });
        }
    }
    let (momentum, decay) = (cfg.momentum, cfg.weight_decay);
    for p in net.param_layers_mut() {
        let (weights, grad) = p.weight.values_and_grad_mut();
        let velocity = &mut p.weight_velocity;
        for (i, w) in weights.iter_mut().enumerate() {
            if !p.mask[i] {
                *w = 0.0;
                velocity[i] = 0.0;
                continue;
            }
            let g = grad.map_or(0.0, |g| g[i]);
            velocity[i] = momentum * velocity[i] + (g + decay * *w);
            *w -= lr * velocity[i];
        }
        let (biases, grad) = p.bias.values_and_grad_mut();
        let velocity = &mut p.bias_velocity;
        for (i, b) in biases.iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[i]);
            velocity[i] = momentum * velocity[i] + (g + decay * *b);
            *b -= lr * velocity[i];
        }
    }
    Ok(())
}

/// SplitMix64 finalizer; derives independent per-epoch shuffle seeds.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    train_with_eval(net, data, None, cfg)
}

/// Trains for `cfg.epochs` epochs of shuffled minibatches, optionally
/// evaluating on `eval` after each epoch.
pub fn train_with_eval(
    net: &mut Network,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in batches(data, cfg.batch_size, Some(mix_seed(cfg.seed, epoch as u64))) {
            tape.clear();
            net.zero_grad();
            let pass = net.forward(&mut tape, &batch.inputs)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
            loss_sum += tape.scalar(loss)? * batch.labels.len() as f64;
            let classes = tape.shape(pass.logits)[1];
            correct += count_correct(tape.value(pass.logits), &batch.labels, classes);
            let grads = tape.backward(loss)?;
            net.accumulate_grads(&pass, &grads)?;
            sgd_step(net, cfg, lr)?;
        }
        tape.clear();
        net.zero_grad();
        log.epochs.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            test_accuracy: eval.map(|d| evaluate(net, d)).transpose()?,
        });
        log::debug!(
            "epoch {epoch}: lr {lr} loss {:.5}",
            loss_sum / data.len() as f64
        );
    }
    Ok(log)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &[f64], labels: &[usize], classes: usize) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

/// Fraction of examples whose arg-max logit equals the label. Records no
/// tape and leaves the network untouched.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (inputs, labels) = data.gather(chunk);
        let logits = net.predict(&inputs)?;
        let classes = logits.shape()[1];
        correct += count_correct(logits.values(), &labels, classes);
    }
    Ok(correct as f64 / data.len() as f64)
}

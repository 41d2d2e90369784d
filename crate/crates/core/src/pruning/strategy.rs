use serde::{Deserialize, Serialize};

use crate::data::DataSplits;
use crate::error::{Error, Result};
use crate::network::{Architecture, Mask, Network};
use crate::trainer::{evaluate, train_with_eval, TrainConfig, TrainLog};

use super::{
    average_abs_gradient, saliency_from_gradients, select_mask, Criterion, CriterionKind,
    SaliencyMap, SaliencyOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Train, prune, rewind, repeat.
    TrainingBased,
    /// Prune once on the untrained network, then train.
    InitializationBased,
}

/// One of the four timing × criterion combinations plus its schedule.
/// `timing` decides which schedule fields are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    /// Overrides the derived id (`Train-w`, `Init-wg`, …).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub timing: Timing,
    pub criterion: Criterion,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub per_iteration_fraction: f64,
    #[serde(default)]
    pub target_sparsities: Vec<f64>,
}

impl StrategySpec {
    pub fn training_based(
        criterion: Criterion,
        iterations: usize,
        per_iteration_fraction: f64,
    ) -> Self {
        StrategySpec {
            name: None,
            timing: Timing::TrainingBased,
            criterion,
            iterations,
            per_iteration_fraction,
            target_sparsities: Vec::new(),
        }
    }

    pub fn initialization_based(criterion: Criterion, target_sparsities: Vec<f64>) -> Self {
        StrategySpec {
            name: None,
            timing: Timing::InitializationBased,
            criterion,
            iterations: 0,
            per_iteration_fraction: 0.0,
            target_sparsities,
        }
    }

    pub fn id(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let timing = match self.timing {
            Timing::TrainingBased => "Train",
            Timing::InitializationBased => "Init",
        };
        match self.criterion.kind {
            CriterionKind::Magnitude => format!("{timing}-w"),
            CriterionKind::GradientSensitive if self.criterion.lambda == 1.0 => {
                format!("{timing}-wg")
            }
            CriterionKind::GradientSensitive => format!("{timing}-wg-l{}", self.criterion.lambda),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.criterion.validate()?;
        let id = self.id();
        let in_unit = |f: f64| f > 0.0 && f < 1.0;
        match self.timing {
            Timing::TrainingBased => {
                if self.iterations == 0 {
                    return Err(Error::Config(format!("{id}: iterations must be positive")));
                }
                if !in_unit(self.per_iteration_fraction) {
                    return Err(Error::Config(format!(
                        "{id}: per_iteration_fraction must lie in (0, 1), got {}",
                        self.per_iteration_fraction
                    )));
                }
            }
            Timing::InitializationBased => {
                if self.target_sparsities.is_empty() {
                    return Err(Error::Config(format!("{id}: target_sparsities is empty")));
                }
                if let Some(s) = self.target_sparsities.iter().find(|&&s| !in_unit(s)) {
                    return Err(Error::Config(format!(
                        "{id}: target sparsity {s} outside (0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Weights, average absolute gradients and their products for the
/// surviving weights of one layer, in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub layer: usize,
    pub weights: Vec<f64>,
    pub gradients: Vec<f64>,
    pub products: Vec<f64>,
}

impl LayerSnapshot {
    fn capture(net: &Network, layer: usize, mask: &Mask, g: &[f64]) -> Self {
        let offset: usize = net.layer_sizes()[..layer].iter().sum();
        let mut snap = LayerSnapshot {
            layer,
            weights: Vec::new(),
            gradients: Vec::new(),
            products: Vec::new(),
        };
        let weights = net.weights(layer).values();
        for (i, (&w, &kept)) in weights.iter().zip(&mask.layers()[layer]).enumerate() {
            if kept {
                let g = g[offset + i];
                snap.weights.push(w);
                snap.gradients.push(g);
                snap.products.push(w * g);
            }
        }
        snap
    }
}

/// Outcome of one pruning level: the trained network's metrics under
/// `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Iteration (training-based, 0 = dense) or target index
    /// (initialization-based).
    pub index: usize,
    pub surviving: usize,
    pub total: usize,
    pub layer_remaining: Vec<usize>,
    pub sparsity: f64,
    pub remaining_fraction: f64,
    /// Test accuracy after the final epoch.
    pub test_accuracy: f64,
    pub train_log: TrainLog,
    pub mask: Mask,
    /// Histogram layer before pruning: trained weights (training-based) or
    /// initial weights (initialization-based), survivors only.
    pub snapshot: Option<LayerSnapshot>,
    /// Scores that produced the next mask (training-based) or this mask
    /// (initialization-based). Absent after the last training-based round.
    pub saliency: Option<SaliencyMap>,
}

impl IterationRecord {
    fn new(index: usize, mask: Mask, train_log: TrainLog, test_accuracy: f64) -> Self {
        let surviving = mask.surviving();
        let total = mask.total();
        let remaining_fraction = surviving as f64 / total as f64;
        IterationRecord {
            index,
            surviving,
            total,
            layer_remaining: mask.layer_surviving(),
            sparsity: 1.0 - remaining_fraction,
            remaining_fraction,
            test_accuracy,
            train_log,
            mask,
            snapshot: None,
            saliency: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub saliency: SaliencyOptions,
    /// Layer captured in [`IterationRecord::snapshot`]; `None` skips
    /// snapshots (and the gradient pass magnitude criteria would otherwise
    /// need for them).
    pub histogram_layer: Option<usize>,
}

fn check_histogram_layer(net: &Network, opts: &RunOptions) -> Result<()> {
    match opts.histogram_layer {
        Some(l) if l >= net.num_param_layers() => Err(Error::Input(format!(
            "histogram layer {l} out of range for {} parameterized layers",
            net.num_param_layers()
        ))),
        _ => Ok(()),
    }
}

fn train_and_score(
    net: &mut Network,
    cfg: &TrainConfig,
    data: &DataSplits,
) -> Result<(TrainLog, f64)> {
    let log = train_with_eval(net, &data.train, Some(&data.test), cfg)?;
    let acc = match log.final_test_accuracy() {
        Some(acc) => acc,
        None => evaluate(net, &data.test)?,
    };
    Ok((log, acc))
}

/// Average absolute gradients when the criterion or a snapshot needs them.
fn gradients_if_needed(
    net: &Network,
    spec: &StrategySpec,
    data: &DataSplits,
    opts: &RunOptions,
) -> Result<Option<Vec<f64>>> {
    if spec.criterion.needs_gradients() || opts.histogram_layer.is_some() {
        average_abs_gradient(net, &data.train, &opts.saliency).map(Some)
    } else {
        Ok(None)
    }
}

fn cell_config(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

/// Iterative train → prune → rewind from a network built with `seed`.
/// Returns `iterations + 1` records; record `t` is the network trained
/// after `t` pruning rounds.
pub fn run_training_based(
    spec: &StrategySpec,
    arch: &Architecture,
    cfg: &TrainConfig,
    data: &DataSplits,
    seed: u64,
    opts: &RunOptions,
) -> Result<Vec<IterationRecord>> {
    let net = Network::build(arch, seed)?;
    run_training_based_from(net, spec, &cell_config(cfg, seed), data, opts)
}

/// [`run_training_based`] on a caller-built network; `cfg.seed` drives the
/// minibatch order.
pub fn run_training_based_from(
    mut net: Network,
    spec: &StrategySpec,
    cfg: &TrainConfig,
    data: &DataSplits,
    opts: &RunOptions,
) -> Result<Vec<IterationRecord>> {
    if spec.timing != Timing::TrainingBased {
        return Err(Error::Usage(format!(
            "{} is not a training-based strategy",
            spec.id()
        )));
    }
    spec.validate()?;
    cfg.validate()?;
    check_histogram_layer(&net, opts)?;
    let mut records = Vec::with_capacity(spec.iterations + 1);
    for t in 0..=spec.iterations {
        let (log, acc) = train_and_score(&mut net, cfg, data)?;
        let mask = net.mask();
        let g = gradients_if_needed(&net, spec, data, opts)?;
        let mut record = IterationRecord::new(t, mask.clone(), log, acc);
        if let (Some(layer), Some(g)) = (opts.histogram_layer, g.as_deref()) {
            record.snapshot = Some(LayerSnapshot::capture(&net, layer, &mask, g));
        }
        log::info!(
            "{} iteration {t}: remaining {:.6} accuracy {:.4}",
            spec.id(),
            record.remaining_fraction,
            acc
        );
        if t < spec.iterations {
            let scores = saliency_from_gradients(&net, &spec.criterion, g.as_deref())?;
            let next = select_mask(&mask, &scores, spec.per_iteration_fraction)?;
            net.apply_mask(&next, false)?;
            net.rewind();
            record.saliency = Some(scores);
        }
        records.push(record);
    }
    Ok(records)
}

/// One-shot pruning of the freshly initialized network to each target
/// sparsity, followed by full training.
pub fn run_init_based(
    spec: &StrategySpec,
    arch: &Architecture,
    cfg: &TrainConfig,
    data: &DataSplits,
    seed: u64,
    opts: &RunOptions,
) -> Result<Vec<IterationRecord>> {
    if spec.timing != Timing::InitializationBased {
        return Err(Error::Usage(format!(
            "{} is not an initialization-based strategy",
            spec.id()
        )));
    }
    spec.validate()?;
    let cfg = cell_config(cfg, seed);
    cfg.validate()?;
    let initial = Network::build(arch, seed)?;
    check_histogram_layer(&initial, opts)?;
    // Every target starts from the same draw, so one saliency pass serves all.
    let g = gradients_if_needed(&initial, spec, data, opts)?;
    let scores = saliency_from_gradients(&initial, &spec.criterion, g.as_deref())?;
    let dense = initial.mask();
    let mut records = Vec::with_capacity(spec.target_sparsities.len());
    for (index, &target) in spec.target_sparsities.iter().enumerate() {
        let mask = select_mask(&dense, &scores, target)?;
        let mut net = initial.clone();
        net.apply_mask(&mask, false)?;
        let snapshot = match (opts.histogram_layer, g.as_deref()) {
            (Some(layer), Some(g)) => Some(LayerSnapshot::capture(&net, layer, &mask, g)),
            _ => None,
        };
        let (log, acc) = train_and_score(&mut net, &cfg, data)?;
        let mut record = IterationRecord::new(index, mask, log, acc);
        record.snapshot = snapshot;
        record.saliency = Some(scores.clone());
        log::info!(
            "{} target {target}: remaining {:.6} accuracy {:.4}",
            spec.id(),
            record.remaining_fraction,
            acc
        );
        records.push(record);
    }
    Ok(records)
}

/// Dispatches on `spec.timing`.
pub fn run_strategy(
    spec: &StrategySpec,
    arch: &Architecture,
    cfg: &TrainConfig,
    data: &DataSplits,
    seed: u64,
    opts: &RunOptions,
) -> Result<Vec<IterationRecord>> {
    match spec.timing {
        Timing::TrainingBased => run_training_based(spec, arch, cfg, data, seed, opts),
        Timing::InitializationBased => run_init_based(spec, arch, cfg, data, seed, opts),
    }
}

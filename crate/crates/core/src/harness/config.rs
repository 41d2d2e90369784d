use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10_binary, load_idx, synthetic_clusters, DataSplits};
use crate::error::{Error, Result};
use crate::network::Architecture;
use crate::pruning::{Reduction, SaliencyOptions, StrategySpec};
use crate::trainer::TrainConfig;

/// Where the train and test splits come from. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
    /// Both splits share the cluster centers; the first `per_class`
    /// examples of each class train, the next `test_per_class` test.
    SyntheticClusters {
        num_classes: usize,
        per_class: usize,
        test_per_class: usize,
        dims: usize,
        spread: f64,
        seed: u64,
    },
}

impl DatasetSource {
    /// Loads both splits and normalizes them with train-split statistics.
    pub fn load(&self) -> Result<DataSplits> {
        let splits = match self {
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => DataSplits::new(
                load_idx(train_images, train_labels)?,
                load_idx(test_images, test_labels)?,
            )?,
            DatasetSource::Cifar10 { train, test } => {
                DataSplits::new(load_cifar10_binary(train)?, load_cifar10_binary(test)?)?
            }
            &DatasetSource::SyntheticClusters {
                num_classes,
                per_class,
                test_per_class,
                dims,
                spread,
                seed,
            } => {
                if test_per_class == 0 {
                    return Err(Error::Config(
                        "synthetic_clusters needs test_per_class ≥ 1".into(),
                    ));
                }
                let all = synthetic_clusters(
                    num_classes,
                    per_class + test_per_class,
                    dims,
                    spread,
                    seed,
                )?;
                let stride = per_class + test_per_class;
                let (mut train, mut test) = (Vec::new(), Vec::new());
                for class in 0..num_classes {
                    let base = class * stride;
                    train.extend(base..base + per_class);
                    test.extend(base + per_class..base + stride);
                }
                DataSplits::new(all.subset(&train)?, all.subset(&test)?)?
            }
        };
        splits.normalized()
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => [train_images, train_labels, test_images, test_labels]
                .into_iter()
                .for_each(fix),
            DatasetSource::Cifar10 { train, test } => {
                train.iter_mut().chain(test.iter_mut()).for_each(fix)
            }
            DatasetSource::SyntheticClusters { .. } => {}
        }
    }
}

fn default_bins() -> usize {
    50
}

fn default_microbatch() -> usize {
    1
}

/// Declarative description of a strategy × seed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    pub strategies: Vec<StrategySpec>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Parameterized-layer ordinal for histograms; defaults to the last
    /// one before the classifier head.
    #[serde(default)]
    pub histogram_layer: Option<usize>,
    /// Set to false to skip histogram snapshots and their gradient passes.
    #[serde(default = "default_true")]
    pub histograms: bool,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default = "default_microbatch")]
    pub saliency_microbatch: usize,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Reads a JSON config, resolving relative paths against its directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn saliency_options(&self) -> SaliencyOptions {
        SaliencyOptions {
            microbatch: self.saliency_microbatch,
            reduction: self.reduction,
        }
    }

    /// Parameterized-layer ordinal of the histogram layer.
    pub fn resolved_histogram_layer(&self) -> usize {
        let count = self
            .architecture
            .layers
            .iter()
            .filter(|l| l.is_parameterized())
            .count();
        self.histogram_layer.unwrap_or(count.saturating_sub(2))
    }

    /// Everything that can be checked without touching the dataset.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.architecture.shapes()?;
        let params = self
            .architecture
            .layers
            .iter()
            .filter(|l| l.is_parameterized())
            .count();
        if params == 0 {
            return Err(Error::Config("architecture has no prunable layer".into()));
        }
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("seed {dup} listed twice")));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        let mut ids = HashSet::new();
        for spec in &self.strategies {
            spec.validate()?;
            let id = spec.id();
            if !ids.insert(id.clone()) {
                return Err(Error::Config(format!("strategy id {id} is not unique")));
            }
            if id.is_empty()
                || id.contains(|c: char| c == '/' || c == '\\' || c == ',' || c.is_whitespace())
            {
                return Err(Error::Config(format!(
                    "strategy id {id:?} is not usable as a file name"
                )));
            }
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be positive".into()));
        }
        if self.resolved_histogram_layer() >= params {
            return Err(Error::Config(format!(
                "histogram_layer {} out of range for {params} parameterized layers",
                self.resolved_histogram_layer()
            )));
        }
        if self.saliency_microbatch == 0 {
            return Err(Error::Config("saliency_microbatch must be positive".into()));
        }
        debug_assert!(shapes.last().is_some_and(|s| s.len() == 1));
        Ok(())
    }

    /// Checks that `data` fits the architecture's input and output sizes.
    pub fn validate_data(&self, data: &DataSplits) -> Result<()> {
        if data.train.sample_shape().iter().product::<usize>()
            != self.architecture.input_shape.iter().product::<usize>()
        {
            return Err(Error::Config(format!(
                "dataset samples {:?} do not fit architecture input {:?}",
                data.train.sample_shape(),
                self.architecture.input_shape
            )));
        }
        let outputs = self.architecture.shapes()?.last().map_or(0, |s| s[0]);
        if data.train.num_classes() > outputs {
            return Err(Error::Config(format!(
                "{} classes but the network has {outputs} outputs",
                data.train.num_classes()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        r#"{
            "architecture": {"input_shape": [4], "layers": [
                {"kind": "dense", "in": 4, "out": 6}, {"kind": "relu"},
                {"kind": "dense", "in": 6, "out": 3}]},
            "dataset": {"source": "synthetic_clusters", "num_classes": 3, "per_class": 10,
                        "test_per_class": 4, "dims": 4, "spread": 0.3, "seed": 2},
            "train": {"epochs": 2, "batch_size": 8, "lr_drop_epochs": []},
            "strategies": [
                {"timing": "training_based", "criterion": {"kind": "magnitude"},
                 "iterations": 2, "per_iteration_fraction": 0.5}
            ],
            "seeds": [0, 1],
            "output_dir": "out"
        }"#
        .to_string()
    }

    #[test]
    fn parses_with_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, sample_json()).unwrap();
        let cfg = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.histogram_bins, 50);
        assert_eq!(cfg.resolved_histogram_layer(), 0);
        assert_eq!(cfg.reduction, Reduction::Sequential);
        assert_eq!(cfg.train.momentum, 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_grids() {
        let base: ExperimentConfig = serde_json::from_str(&sample_json()).unwrap();
        let mut dup = base.clone();
        dup.seeds = vec![1, 1];
        assert!(matches!(dup.validate(), Err(Error::Config(_))));
        let mut none = base.clone();
        none.seeds.clear();
        assert!(none.validate().is_err());
        let mut twice = base.clone();
        twice.strategies.push(twice.strategies[0].clone());
        assert!(twice.validate().is_err());
        let mut layer = base.clone();
        layer.histogram_layer = Some(2);
        assert!(layer.validate().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(
            &sample_json().replace("\"seeds\"", "\"sedes\"")
        )
        .is_err());
    }

    #[test]
    fn synthetic_splits_share_centers() {
        let cfg: ExperimentConfig = serde_json::from_str(&sample_json()).unwrap();
        let data = cfg.dataset.load().unwrap();
        assert_eq!((data.train.len(), data.test.len()), (30, 12));
        assert!(data.train.is_normalized() && data.test.is_normalized());
        cfg.validate_data(&data).unwrap();
    }
}

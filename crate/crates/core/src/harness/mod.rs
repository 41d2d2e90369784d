//! Config-driven strategy × seed grids and their CSV artifacts.
//!
//! Layout of an output directory:
//!
//! ```text
//! raw/<strategy>__seed<seed>.csv          one row per trained network
//! logs/<strategy>__seed<seed>.csv         per-epoch loss and accuracy
//! histograms/<strategy>__seed<seed>__i<index>.csv
//! accuracy_curve.csv                      mean/std accuracy per level
//! layerwise_counts.csv                    mean survivors per layer
//! layerwise_ratio.csv                     gradient-sensitive / magnitude
//! thresholds.csv                          largest pruned score per layer
//! failures.csv                            only when a cell failed
//! ```
//!
//! Standard deviations are population deviations over seeds.

mod config;
mod emit;
mod histogram;
pub mod selfcheck;

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pruning::{run_strategy, IterationRecord, RunOptions, StrategySpec};

pub use config::{DatasetSource, ExperimentConfig};
pub use emit::{
    accuracy_curve, cell_stem, layerwise_counts, layerwise_ratio, mean_std, pruned_threshold,
    read_raw, read_raw_dir, write_aggregates, write_histograms, write_raw, CurveRow, LayerCountRow,
    RatioRow, RunRecord, ACCURACY_CURVE, FAILURES, HISTOGRAM_DIR, LAYERWISE_COUNTS,
    LAYERWISE_RATIO, LOG_DIR, RAW_DIR, THRESHOLDS,
};
pub use histogram::Histogram;

/// Outcome of one (strategy, seed) cell.
#[derive(Debug)]
pub struct CellResult {
    pub strategy: StrategySpec,
    pub seed: u64,
    pub outcome: std::result::Result<Vec<IterationRecord>, String>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    /// Levels present for only one strategy of a layerwise-ratio pair.
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn all_succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_ok())
    }

    /// Records of the cell `(strategy id, seed)`, if it succeeded.
    pub fn records(&self, strategy: &str, seed: u64) -> Option<&[IterationRecord]> {
        self.cells
            .iter()
            .find(|c| c.strategy.id() == strategy && c.seed == seed)
            .and_then(|c| c.outcome.as_deref().ok())
    }
}

/// Runs every cell of `cfg` on the rayon pool and writes the artifacts to
/// `cfg.output_dir`. Configuration and data problems abort before any
/// training; a failing cell is recorded and the others continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    cfg.validate_data(&data)?;
    emit::ensure_dir(&cfg.output_dir)?;
    let opts = RunOptions {
        saliency: cfg.saliency_options(),
        histogram_layer: cfg.histograms.then(|| cfg.resolved_histogram_layer()),
    };
    let grid: Vec<(&StrategySpec, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let cells: Vec<CellResult> = grid
        .par_iter()
        .map(|&(spec, seed)| {
            log::info!("starting {} seed {seed}", spec.id());
            let outcome = run_strategy(spec, &cfg.architecture, &cfg.train, &data, seed, &opts)
                .map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::error!("{} seed {seed} failed: {e}", spec.id());
            }
            CellResult {
                strategy: spec.clone(),
                seed,
                outcome,
            }
        })
        .collect();

    let dir = &cfg.output_dir;
    let mut raw = Vec::new();
    let mut thresholds = Vec::new();
    let mut failures = Vec::new();
    for cell in &cells {
        let id = cell.strategy.id();
        match &cell.outcome {
            Ok(records) => {
                let files = emit::CellFiles {
                    strategy: &id,
                    timing: cell.strategy.timing,
                    criterion: cell.strategy.criterion.kind,
                    seed: cell.seed,
                    records,
                };
                raw.extend(emit::write_cell(
                    dir,
                    &files,
                    cfg.histogram_bins,
                    &mut thresholds,
                )?);
            }
            Err(e) => failures.push((id, cell.seed, e.clone())),
        }
    }
    emit::write_thresholds(dir, &thresholds)?;
    if !failures.is_empty() {
        emit::write_failures(dir, &failures)?;
    }
    let warnings = if raw.is_empty() {
        Vec::new()
    } else {
        write_aggregates(dir, &raw)?
    };
    Ok(ExperimentReport { cells, warnings })
}

/// Recomputes the aggregate CSVs of `dir` from its raw records.
pub fn aggregate_dir(dir: &Path) -> Result<Vec<String>> {
    let records = read_raw_dir(dir)?;
    if records.is_empty() {
        return Err(Error::Input(format!(
            "{} holds no raw records",
            dir.display()
        )));
    }
    write_aggregates(dir, &records)
}

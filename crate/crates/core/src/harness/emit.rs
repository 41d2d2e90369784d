use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pruning::{CriterionKind, IterationRecord, LayerSnapshot, Timing};

use super::histogram::Histogram;

/// Subdirectory of per-cell record CSVs.
pub const RAW_DIR: &str = "raw";
pub const HISTOGRAM_DIR: &str = "histograms";
pub const LOG_DIR: &str = "logs";
pub const ACCURACY_CURVE: &str = "accuracy_curve.csv";
pub const LAYERWISE_COUNTS: &str = "layerwise_counts.csv";
pub const LAYERWISE_RATIO: &str = "layerwise_ratio.csv";
pub const THRESHOLDS: &str = "thresholds.csv";
pub const FAILURES: &str = "failures.csv";

/// Scalar metrics of one trained network in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub strategy: String,
    pub timing: Timing,
    pub criterion: CriterionKind,
    pub seed: u64,
    pub index: usize,
    pub surviving: usize,
    pub total: usize,
    pub sparsity: f64,
    pub remaining_fraction: f64,
    pub test_accuracy: f64,
    pub layer_remaining: Vec<usize>,
}

impl RunRecord {
    pub fn from_iteration(
        strategy: &str,
        timing: Timing,
        criterion: CriterionKind,
        seed: u64,
        r: &IterationRecord,
    ) -> Self {
        RunRecord {
            strategy: strategy.to_string(),
            timing,
            criterion,
            seed,
            index: r.index,
            surviving: r.surviving,
            total: r.total,
            sparsity: r.sparsity,
            remaining_fraction: r.remaining_fraction,
            test_accuracy: r.test_accuracy,
            layer_remaining: r.layer_remaining.clone(),
        }
    }
}

fn timing_name(t: Timing) -> &'static str {
    match t {
        Timing::TrainingBased => "training_based",
        Timing::InitializationBased => "initialization_based",
    }
}

fn criterion_name(c: CriterionKind) -> &'static str {
    match c {
        CriterionKind::Magnitude => "magnitude",
        CriterionKind::GradientSensitive => "gradient_sensitive",
    }
}

fn parse_timing(s: &str) -> Option<Timing> {
    [Timing::TrainingBased, Timing::InitializationBased]
        .into_iter()
        .find(|&t| timing_name(t) == s)
}

fn parse_criterion(s: &str) -> Option<CriterionKind> {
    [CriterionKind::Magnitude, CriterionKind::GradientSensitive]
        .into_iter()
        .find(|&c| criterion_name(c) == s)
}

/// Shortest representation that parses back to the same `f64`.
fn num(x: f64) -> String {
    format!("{x}")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn cell_stem(strategy: &str, seed: u64) -> String {
    format!("{strategy}__seed{seed}")
}

const RAW_FIXED: [&str; 10] = [
    "strategy",
    "timing",
    "criterion",
    "seed",
    "index",
    "surviving",
    "total",
    "sparsity",
    "remaining_fraction",
    "test_accuracy",
];

/// Writes one cell's records; per-layer counts follow the fixed columns
/// as `remaining_l0, remaining_l1, …`.
pub fn write_raw(path: &Path, records: &[RunRecord]) -> Result<()> {
    let layers = records.first().map_or(0, |r| r.layer_remaining.len());
    let mut w = writer(path)?;
    let mut header: Vec<String> = RAW_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..layers).map(|l| format!("remaining_l{l}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.strategy.clone(),
            timing_name(r.timing).to_string(),
            criterion_name(r.criterion).to_string(),
            r.seed.to_string(),
            r.index.to_string(),
            r.surviving.to_string(),
            r.total.to_string(),
            num(r.sparsity),
            num(r.remaining_fraction),
            num(r.test_accuracy),
        ];
        row.extend(r.layer_remaining.iter().map(usize::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < RAW_FIXED.len() || header.iter().zip(RAW_FIXED).any(|(a, b)| a != b) {
        return Err(Error::Input(format!(
            "{} does not have the raw record header",
            path.display()
        )));
    }
    let bad =
        |line: usize, what: &str| Error::Input(format!("{}:{line}: bad {what}", path.display()));
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |k: usize| row.get(k).unwrap_or("");
        let int = |k: usize| {
            field(k)
                .parse::<usize>()
                .map_err(|_| bad(line, RAW_FIXED[k]))
        };
        let real = |k: usize| field(k).parse::<f64>().map_err(|_| bad(line, RAW_FIXED[k]));
        out.push(RunRecord {
            strategy: field(0).to_string(),
            timing: parse_timing(field(1)).ok_or_else(|| bad(line, "timing"))?,
            criterion: parse_criterion(field(2)).ok_or_else(|| bad(line, "criterion"))?,
            seed: field(3).parse().map_err(|_| bad(line, "seed"))?,
            index: int(4)?,
            surviving: int(5)?,
            total: int(6)?,
            sparsity: real(7)?,
            remaining_fraction: real(8)?,
            test_accuracy: real(9)?,
            layer_remaining: (RAW_FIXED.len()..row.len())
                .map(|k| field(k).parse().map_err(|_| bad(line, "layer count")))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Reads every `raw/*.csv` under `dir`.
pub fn read_raw_dir(dir: &Path) -> Result<Vec<RunRecord>> {
    let raw = dir.join(RAW_DIR);
    let entries = fs::read_dir(&raw).map_err(|e| Error::io(&raw, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&raw, err)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "csv"));
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_raw(&p)?);
    }
    Ok(records)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub strategy: String,
    pub remaining_fraction: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub runs: usize,
}

/// Records grouped by strategy (ascending) and remaining fraction
/// (descending), each group in (seed, index) order.
fn grouped(records: &[RunRecord]) -> BTreeMap<(String, std::cmp::Reverse<u64>), Vec<&RunRecord>> {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.strategy, a.seed, a.index).cmp(&(&b.strategy, b.seed, b.index)));
    let mut groups: BTreeMap<_, Vec<&RunRecord>> = BTreeMap::new();
    for r in sorted {
        // Nonnegative floats order like their bit patterns.
        let key = (
            r.strategy.clone(),
            std::cmp::Reverse(r.remaining_fraction.to_bits()),
        );
        groups.entry(key).or_default().push(r);
    }
    groups
}

pub fn accuracy_curve(records: &[RunRecord]) -> Vec<CurveRow> {
    grouped(records)
        .into_iter()
        .map(|((strategy, level), group)| {
            let accs: Vec<f64> = group.iter().map(|r| r.test_accuracy).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            CurveRow {
                strategy,
                remaining_fraction: f64::from_bits(level.0),
                mean_acc,
                std_acc,
                runs: accs.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCountRow {
    pub strategy: String,
    pub remaining_fraction: f64,
    pub layer: usize,
    pub mean_remaining: f64,
    pub std_remaining: f64,
    pub runs: usize,
}

pub fn layerwise_counts(records: &[RunRecord]) -> Vec<LayerCountRow> {
    let mut rows = Vec::new();
    for ((strategy, level), group) in grouped(records) {
        let layers = group[0].layer_remaining.len();
        for layer in 0..layers {
            let counts: Vec<f64> = group
                .iter()
                .map(|r| r.layer_remaining.get(layer).copied().unwrap_or(0) as f64)
                .collect();
            let (mean_remaining, std_remaining) = mean_std(&counts);
            rows.push(LayerCountRow {
                strategy: strategy.clone(),
                remaining_fraction: f64::from_bits(level.0),
                layer,
                mean_remaining,
                std_remaining,
                runs: counts.len(),
            });
        }
    }
    rows
}

/// Gradient-sensitive over magnitude survivors for one layer and level;
/// `ratio` is `None` when the magnitude count is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub numerator: String,
    pub denominator: String,
    pub remaining_fraction: f64,
    pub layer: usize,
    pub numerator_remaining: f64,
    pub denominator_remaining: f64,
    pub ratio: Option<f64>,
}

/// Pairs every gradient-sensitive strategy with every magnitude strategy
/// of the same timing. Returns the rows plus one warning per level present
/// in only one strategy of a pair.
pub fn layerwise_ratio(records: &[RunRecord]) -> (Vec<RatioRow>, Vec<String>) {
    let counts = layerwise_counts(records);
    let mut kinds: BTreeMap<&str, (Timing, CriterionKind)> = BTreeMap::new();
    for r in records {
        kinds.insert(&r.strategy, (r.timing, r.criterion));
    }
    let lookup = |s: &str, level: f64, layer: usize| {
        counts
            .iter()
            .find(|c| c.strategy == s && c.remaining_fraction == level && c.layer == layer)
            .map(|c| c.mean_remaining)
    };
    let levels = |s: &str| {
        let mut l: Vec<f64> = counts
            .iter()
            .filter(|c| c.strategy == s)
            .map(|c| c.remaining_fraction)
            .collect();
        l.dedup();
        l
    };
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (&num_id, &(t_num, c_num)) in &kinds {
        if c_num != CriterionKind::GradientSensitive {
            continue;
        }
        for (&den_id, &(t_den, c_den)) in &kinds {
            if c_den != CriterionKind::Magnitude || t_den != t_num {
                continue;
            }
            let (ln, ld) = (levels(num_id), levels(den_id));
            for &level in ln.iter().filter(|l| !ld.contains(l)) {
                warnings.push(format!(
                    "{num_id} level {level} has no {den_id} counterpart"
                ));
            }
            for &level in ld.iter().filter(|l| !ln.contains(l)) {
                warnings.push(format!(
                    "{den_id} level {level} has no {num_id} counterpart"
                ));
            }
            for &level in ln.iter().filter(|l| ld.contains(l)) {
                let layers = counts
                    .iter()
                    .filter(|c| c.strategy == num_id && c.remaining_fraction == level)
                    .count();
                for layer in 0..layers {
                    let n = lookup(num_id, level, layer).unwrap_or(0.0);
                    let d = lookup(den_id, level, layer).unwrap_or(0.0);
                    rows.push(RatioRow {
                        numerator: num_id.to_string(),
                        denominator: den_id.to_string(),
                        remaining_fraction: level,
                        layer,
                        numerator_remaining: n,
                        denominator_remaining: d,
                        ratio: (d != 0.0).then(|| n / d),
                    });
                }
            }
        }
    }
    for w in &warnings {
        log::warn!("layerwise ratio: {w}");
    }
    (rows, warnings)
}

/// Writes the accuracy curve, layerwise counts and layerwise ratio CSVs
/// into `dir`. Returns the unmatched-level warnings.
pub fn write_aggregates(dir: &Path, records: &[RunRecord]) -> Result<Vec<String>> {
    if records.is_empty() {
        return Err(Error::Input("no records to aggregate".into()));
    }
    let path = dir.join(ACCURACY_CURVE);
    let mut w = writer(&path)?;
    w.write_record([
        "strategy",
        "remaining_fraction",
        "sparsity",
        "mean_acc",
        "std_acc",
        "runs",
    ])?;
    for r in accuracy_curve(records) {
        w.write_record([
            r.strategy,
            num(r.remaining_fraction),
            num(1.0 - r.remaining_fraction),
            num(r.mean_acc),
            num(r.std_acc),
            r.runs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(LAYERWISE_COUNTS);
    let mut w = writer(&path)?;
    w.write_record([
        "strategy",
        "remaining_fraction",
        "layer",
        "remaining",
        "std_remaining",
        "runs",
    ])?;
    for r in layerwise_counts(records) {
        w.write_record([
            r.strategy,
            num(r.remaining_fraction),
            r.layer.to_string(),
            num(r.mean_remaining),
            num(r.std_remaining),
            r.runs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(LAYERWISE_RATIO);
    let mut w = writer(&path)?;
    w.write_record([
        "numerator",
        "denominator",
        "remaining_fraction",
        "layer",
        "numerator_remaining",
        "denominator_remaining",
        "ratio",
        "ratio_defined",
    ])?;
    let (rows, warnings) = layerwise_ratio(records);
    for r in rows {
        w.write_record([
            r.numerator,
            r.denominator,
            num(r.remaining_fraction),
            r.layer.to_string(),
            num(r.numerator_remaining),
            num(r.denominator_remaining),
            r.ratio.map(num).unwrap_or_default(),
            r.ratio.is_some().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(warnings)
}

/// Weight, gradient and product histograms of one snapshot.
pub fn write_histograms(path: &Path, snap: &LayerSnapshot, bins: usize) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "quantity",
        "layer",
        "bin",
        "lower",
        "upper",
        "count",
        "range_min",
        "range_max",
    ])?;
    for (name, values) in [
        ("weights", &snap.weights),
        ("gradients", &snap.gradients),
        ("products", &snap.products),
    ] {
        let h = Histogram::new(values, bins)?;
        let (lo, hi) = h
            .range
            .map_or((String::new(), String::new()), |(a, b)| (num(a), num(b)));
        for (i, &count) in h.counts.iter().enumerate() {
            let (lower, upper) = h
                .edges(i)
                .map_or((String::new(), String::new()), |(a, b)| (num(a), num(b)));
            w.write_record([
                name.to_string(),
                snap.layer.to_string(),
                i.to_string(),
                lower,
                upper,
                count.to_string(),
                lo.clone(),
                hi.clone(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-epoch training curves of every record of one cell.
pub fn write_epoch_log(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "index",
        "epoch",
        "lr",
        "loss",
        "train_accuracy",
        "test_accuracy",
    ])?;
    for r in records {
        for e in &r.train_log.epochs {
            w.write_record([
                r.index.to_string(),
                e.epoch.to_string(),
                num(e.lr),
                num(e.loss),
                num(e.train_accuracy),
                e.test_accuracy.map(num).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Largest score among the weights of `layer` that `next` removes from
/// `current`, or `None` when the layer lost nothing.
pub fn pruned_threshold(scores: &[f64], current: &[bool], next: &[bool]) -> Option<f64> {
    scores
        .iter()
        .zip(current.iter().zip(next))
        .filter(|(_, (&c, &n))| c && !n)
        .map(|(&s, _)| s)
        .reduce(f64::max)
}

pub(crate) struct CellFiles<'a> {
    pub strategy: &'a str,
    pub timing: Timing,
    pub criterion: CriterionKind,
    pub seed: u64,
    pub records: &'a [IterationRecord],
}

/// Raw records, epoch log, histograms and pruning thresholds of one
/// cell. Threshold rows are appended to `thresholds`.
pub(crate) fn write_cell(
    dir: &Path,
    cell: &CellFiles<'_>,
    bins: usize,
    thresholds: &mut Vec<Vec<String>>,
) -> Result<Vec<RunRecord>> {
    for sub in [RAW_DIR, LOG_DIR, HISTOGRAM_DIR] {
        create_dir(&dir.join(sub))?;
    }
    let stem = cell_stem(cell.strategy, cell.seed);
    let raw: Vec<RunRecord> = cell
        .records
        .iter()
        .map(|r| {
            RunRecord::from_iteration(cell.strategy, cell.timing, cell.criterion, cell.seed, r)
        })
        .collect();
    write_raw(&dir.join(RAW_DIR).join(format!("{stem}.csv")), &raw)?;
    write_epoch_log(&dir.join(LOG_DIR).join(format!("{stem}.csv")), cell.records)?;
    for r in cell.records {
        if let Some(snap) = &r.snapshot {
            let path = dir
                .join(HISTOGRAM_DIR)
                .join(format!("{stem}__i{}.csv", r.index));
            write_histograms(&path, snap, bins)?;
        }
    }
    for (pos, r) in cell.records.iter().enumerate() {
        let Some(scores) = &r.saliency else { continue };
        // Training-based scores produce the next record's mask; one-shot
        // scores produce this record's mask from the dense network.
        let (current, next) = match cell.timing {
            Timing::TrainingBased => match cell.records.get(pos + 1) {
                Some(n) => (r.mask.layers().to_vec(), &n.mask),
                None => continue,
            },
            Timing::InitializationBased => (
                r.mask
                    .layers()
                    .iter()
                    .map(|l| vec![true; l.len()])
                    .collect(),
                &r.mask,
            ),
        };
        for (layer, (cur, nxt)) in current.iter().zip(next.layers()).enumerate() {
            let pruned = cur.iter().zip(nxt).filter(|(&c, &n)| c && !n).count();
            let theta = pruned_threshold(scores.layer(layer), cur, nxt);
            thresholds.push(vec![
                cell.strategy.to_string(),
                cell.seed.to_string(),
                r.index.to_string(),
                layer.to_string(),
                pruned.to_string(),
                theta.map(num).unwrap_or_default(),
            ]);
        }
    }
    Ok(raw)
}

pub(crate) fn write_thresholds(dir: &Path, rows: &[Vec<String>]) -> Result<()> {
    let path = dir.join(THRESHOLDS);
    let mut w = writer(&path)?;
    w.write_record(["strategy", "seed", "index", "layer", "pruned", "threshold"])?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub(crate) fn write_failures(dir: &Path, failures: &[(String, u64, String)]) -> Result<()> {
    let path = dir.join(FAILURES);
    let mut w = writer(&path)?;
    w.write_record(["strategy", "seed", "error"])?;
    for (s, seed, e) in failures {
        w.write_record([s.clone(), seed.to_string(), e.clone()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    create_dir(dir)
}

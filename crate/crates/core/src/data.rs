//! Datasets: IDX and CIFAR-10 binary loaders, seeded synthetic clusters,
//! per-channel normalization and minibatching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const IDX_UBYTE: u8 = 0x08;
pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    normalization: Option<Normalization>,
}

impl Dataset {
    /// `inputs` is `[N, ...]`; every label must be below `num_classes`.
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if inputs.shape().len() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Widens the class count, e.g. to align a test split with its train split.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if num_classes < self.num_classes {
            return Err(Error::Input(format!(
                "cannot shrink class count from {} to {num_classes}",
                self.num_classes
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Shape of one example, without the batch dimension.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.inputs.values()[i * d..(i + 1) * d]
    }

    /// Normalization applied so far, if any.
    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    /// Channel count used by normalization: dimension 1 for `[N, C, H, W]`
    /// data, one shared channel otherwise.
    fn channels(&self) -> usize {
        match self.sample_shape() {
            [c, _, _] => *c,
            _ => 1,
        }
    }

    /// Per-channel mean and population std of the raw inputs. Zero std is
    /// replaced by 1 so constant channels pass through centred.
    pub fn channel_stats(&self) -> Normalization {
        let channels = self.channels();
        let plane = self.sample_len() / channels;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for (i, chunk) in self.inputs.values().chunks(plane).enumerate() {
            let c = i % channels;
            for &v in chunk {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    /// Applies `stats` once. Returns `false` (and changes nothing) when the
    /// dataset is already normalized.
    pub fn normalize(&mut self, stats: &Normalization) -> Result<bool> {
        if self.is_normalized() {
            return Ok(false);
        }
        let channels = self.channels();
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(Error::Input(format!(
                "normalization has {} channels, data has {channels}",
                stats.mean.len()
            )));
        }
        let plane = self.sample_len() / channels;
        for (i, chunk) in self.inputs.values_mut().chunks_mut(plane).enumerate() {
            let c = i % channels;
            for v in chunk {
                *v = (*v - stats.mean[c]) / stats.std[c];
            }
        }
        self.normalization = Some(stats.clone());
        Ok(true)
    }

    /// Copies the listed examples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_len();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(self.example(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let inputs = Tensor::new(shape, values).expect("gathered batch is consistent");
        (inputs, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Input("empty subset".into()));
        }
        let (inputs, labels) = self.gather(indices);
        Ok(Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
        })
    }
}

/// Train and test splits, normalized with statistics of the train split.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    pub fn new(train: Dataset, test: Dataset) -> Result<Self> {
        if train.sample_shape() != test.sample_shape() {
            return Err(Error::Input(format!(
                "train samples {:?} and test samples {:?} differ in shape",
                train.sample_shape(),
                test.sample_shape()
            )));
        }
        let classes = train.num_classes().max(test.num_classes());
        Ok(DataSplits {
            train: train.with_split(Split::Train).with_num_classes(classes)?,
            test: test.with_split(Split::Test).with_num_classes(classes)?,
        })
    }

    pub fn normalized(mut self) -> Result<Self> {
        let stats = self.train.channel_stats();
        self.train.normalize(&stats)?;
        self.test.normalize(&stats)?;
        Ok(self)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses an unsigned-byte IDX header; returns the dimensions and the
/// offset of the payload.
fn parse_idx_header(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(
            path,
            0,
            format!("bad magic {:02x?}", &bytes[..4]),
        ));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(format_err(
            path,
            2,
            format!("unsupported element type 0x{:02x}", bytes[2]),
        ));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(format_err(path, 3, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(path, bytes.len(), "truncated dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: expected {payload} bytes after offset {header}"),
        ));
    }
    if bytes.len() > header + payload {
        return Err(format_err(
            path,
            header + payload,
            "trailing bytes after payload",
        ));
    }
    Ok((dims, header))
}

/// Loads an IDX image file (`0x00000803`-style, any rank ≥ 2) and its IDX
/// label file. Pixels are scaled to `[0, 1]`; 2-d images become
/// `[N, 1, rows, cols]`. Normalization is left to [`DataSplits`].
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read_file(images_path)?;
    let (dims, offset) = parse_idx_header(images_path, &image_bytes)?;
    if dims.len() < 2 {
        return Err(format_err(
            images_path,
            3,
            "image file needs at least 2 dimensions",
        ));
    }
    let label_bytes = read_file(labels_path)?;
    let (label_dims, label_offset) = parse_idx_header(labels_path, &label_bytes)?;
    if label_dims.len() != 1 {
        return Err(format_err(
            labels_path,
            3,
            "label file must be 1-dimensional",
        ));
    }
    if label_dims[0] != dims[0] {
        return Err(Error::Input(format!(
            "{} images but {} labels",
            dims[0], label_dims[0]
        )));
    }
    let labels: Vec<usize> = label_bytes[label_offset..]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let values: Vec<f64> = image_bytes[offset..]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let mut shape = vec![dims[0]];
    if dims.len() == 3 {
        shape.push(1);
    }
    shape.extend_from_slice(&dims[1..]);
    let inputs = Tensor::new(shape, values)?;
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, num_classes, Split::Train)
}

fn idx_bytes(dims: &[usize], payload: &[u8]) -> Result<Vec<u8>> {
    if dims.iter().product::<usize>() != payload.len() || dims.len() > 255 {
        return Err(Error::Input(format!(
            "IDX dims {dims:?} do not match {} payload bytes",
            payload.len()
        )));
    }
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        let d =
            u32::try_from(d).map_err(|_| Error::Input(format!("IDX dimension {d} too large")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    Ok(out)
}

/// Writes an unsigned-byte IDX file with the given dimensions.
pub fn write_idx(path: impl AsRef<Path>, dims: &[usize], payload: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, idx_bytes(dims, payload)?).map_err(|e| Error::io(path, e))
}

/// Loads and concatenates CIFAR-10 binary batches (1 label byte followed by
/// 3072 channel-major pixel bytes per record) into `[N, 3, 32, 32]` scaled
/// to `[0, 1]`.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Input("no CIFAR-10 batch files given".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
            let whole = bytes.len() / CIFAR10_RECORD * CIFAR10_RECORD;
            return Err(format_err(
                path,
                whole,
                format!(
                    "length {} is not a multiple of {CIFAR10_RECORD}",
                    bytes.len()
                ),
            ));
        }
        for (r, record) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
            if record[0] >= 10 {
                return Err(format_err(
                    path,
                    r * CIFAR10_RECORD,
                    format!("label {} >= 10", record[0]),
                ));
            }
            labels.push(record[0] as usize);
            values.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let inputs = Tensor::new(vec![labels.len(), 3, 32, 32], values)?;
    Dataset::new(inputs, labels, 10, Split::Train)
}

/// Gaussian blobs: one center per class drawn uniformly from `[-1, 1]^dims`,
/// examples `center + spread · N(0, I)`, stored class by class.
pub fn synthetic_clusters(
    num_classes: usize,
    per_class: usize,
    dims: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dims == 0 {
        return Err(Error::Input(format!(
            "synthetic clusters need positive sizes, got {num_classes} classes x {per_class} x {dims}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut values = Vec::with_capacity(num_classes * per_class * dims);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                values.push(c + spread * z);
            }
            labels.push(class);
        }
    }
    let inputs = Tensor::new(vec![labels.len(), dims], values)?;
    Dataset::new(inputs, labels, num_classes, Split::Train)
}

/// One minibatch and the dataset indices it was drawn from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let (inputs, labels) = self.data.gather(&indices);
        Some(Batch {
            inputs,
            labels,
            indices,
        })
    }
}

/// The example order of one epoch: identity without a seed, otherwise a
/// seeded Fisher–Yates permutation.
pub fn epoch_order(len: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Splits one epoch into batches of `batch_size` (the last may be short).
///
/// # Panics
/// If `batch_size` is zero.
pub fn batches(data: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Batches<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    Batches {
        data,
        order: epoch_order(data.len(), shuffle_seed),
        batch_size,
        cursor: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn idx_header_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        let pixels = [0u8, 255, 51, 102, 7, 8, 9, 10];
        write_idx(&img, &[2, 2, 2], &pixels).unwrap();
        write_idx(&lbl, &[2], &[3, 1]).unwrap();
        let raw = fs::read(&img).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        assert_eq!(raw.len(), 4 + 12 + 8);

        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[1, 2, 2]);
        assert_eq!(ds.labels(), &[3, 1]);
        assert_eq!(ds.num_classes(), 4);
        assert_eq!(ds.example(0)[1], 1.0);
        assert!(!ds.is_normalized());
    }

    #[test]
    fn idx_round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as u8).collect();
        write_idx(&img, &[3, 4, 5], &pixels).unwrap();
        write_idx(&lbl, &[3], &[0, 2, 1]).unwrap();
        let ds = load_idx(&img, &lbl).unwrap();
        let back: Vec<u8> = ds
            .inputs()
            .values()
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        assert_eq!(back, pixels);
    }

    #[test]
    fn idx_count_mismatch_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        write_idx(&img, &[2, 1, 1], &[1, 2]).unwrap();
        write_idx(&lbl, &[3], &[0, 1, 2]).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(Error::Input(_))));

        fs::write(&img, [1u8, 0, 8, 3, 0]).unwrap();
        match load_idx(&img, &lbl) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut truncated = idx_bytes(&[2, 2, 2], &[0; 8]).unwrap();
        truncated.truncate(18);
        fs::write(&img, &truncated).unwrap();
        match load_idx(&img, &lbl) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 18),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    fn cifar_record(label: u8, lit: Option<(usize, usize, usize)>) -> Vec<u8> {
        let mut rec = vec![0u8; CIFAR10_RECORD];
        rec[0] = label;
        if let Some((c, h, w)) = lit {
            rec[1 + c * 1024 + h * 32 + w] = 255;
        }
        rec
    }

    #[test]
    fn cifar_single_record_and_pixel_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = cifar_record(7, Some((2, 5, 9)));
        bytes.extend(cifar_record(3, None));
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_binary(&[&path]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[7, 3]);
        assert_eq!(ds.inputs().shape(), &[2, 3, 32, 32]);
        let ex = ds.example(0);
        let lit: Vec<usize> = ex
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(lit, vec![(2 * 32 + 5) * 32 + 9]);
    }

    #[test]
    fn cifar_full_batch_and_bad_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        fs::write(&path, vec![1u8; CIFAR10_RECORD * 10_000]).unwrap();
        assert_eq!(load_cifar10_binary(&[&path]).unwrap().len(), 10_000);

        fs::write(&path, vec![1u8; CIFAR10_RECORD + 5]).unwrap();
        assert!(matches!(
            load_cifar10_binary(&[&path]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn synthetic_clusters_properties() {
        let a = synthetic_clusters(3, 4, 5, 0.0, 9).unwrap();
        for class in 0..3 {
            let first = a.example(class * 4).to_vec();
            for i in 1..4 {
                assert_eq!(a.example(class * 4 + i), first.as_slice());
            }
        }
        let b = synthetic_clusters(3, 4, 5, 0.3, 9).unwrap();
        assert_eq!(b, synthetic_clusters(3, 4, 5, 0.3, 9).unwrap());
        assert_ne!(b, synthetic_clusters(3, 4, 5, 0.3, 10).unwrap());
    }

    #[test]
    fn batch_sizes_and_identity_order() {
        let ds = synthetic_clusters(2, 5, 2, 0.1, 0).unwrap();
        let sizes: Vec<usize> = batches(&ds, 3, None).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let order: Vec<usize> = batches(&ds, 3, None).flat_map(|b| b.indices).collect();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn normalization_is_applied_once() {
        let mut ds = synthetic_clusters(2, 10, 3, 1.0, 1).unwrap();
        let stats = ds.channel_stats();
        assert!(ds.normalize(&stats).unwrap());
        let after = ds.clone();
        assert!(!ds.normalize(&stats).unwrap());
        assert_eq!(ds, after);
        let restats = ds.channel_stats();
        assert!(restats.mean[0].abs() < 1e-12);
        assert!((restats.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn splits_share_train_statistics() {
        let train = synthetic_clusters(2, 10, 3, 1.0, 1).unwrap();
        let test = synthetic_clusters(2, 4, 3, 1.0, 2).unwrap();
        let stats = train.channel_stats();
        let splits = DataSplits::new(train, test).unwrap().normalized().unwrap();
        assert_eq!(splits.test.normalization(), Some(&stats));
        assert_eq!(splits.test.split(), Split::Test);
    }

    proptest! {
        #[test]
        fn shuffled_batches_partition_the_epoch(n in 1usize..200, bs in 1usize..17, seed in any::<u64>()) {
            let ds = synthetic_clusters(1, n, 1, 0.0, 0).unwrap();
            let mut seen: Vec<usize> = batches(&ds, bs, Some(seed)).flat_map(|b| b.indices).collect();
            prop_assert_eq!(seen.len(), n);
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let again: Vec<usize> = batches(&ds, bs, Some(seed)).flat_map(|b| b.indices).collect();
            let first: Vec<usize> = batches(&ds, bs, Some(seed)).flat_map(|b| b.indices).collect();
            prop_assert_eq!(again, first);
        }
    }
}

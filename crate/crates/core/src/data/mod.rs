//! Datasets: MNIST ingestion, deterministic splits, epoch batching and
//! small synthetic problems.

pub mod fetch;
pub mod idx;

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub use fetch::{fetch_mnist, FetchOutcome, MnistPaths, DEFAULT_MNIST_BASE_URL};
pub use idx::{load_idx_images, load_idx_labels, IdxImages};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Real(v) => Targets::Real(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Inputs (one row per sample) and their targets.
///
/// A whole dataset is just a large batch, so the same type serves both.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

pub type Dataset = SampleBatch;

impl SampleBatch {
    pub fn new(inputs: Array2<f64>, targets: Targets) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::invalid(format!(
                "{} input rows but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("inputs contain non-finite values".into()));
        }
        match &targets {
            Targets::Classes { labels, num_classes } => {
                if let Some(bad) = labels.iter().find(|&&l| l >= *num_classes) {
                    return Err(Error::invalid(format!("label {bad} >= class count {num_classes}")));
                }
            }
            Targets::Real(v) => {
                if v.iter().any(|y| !y.is_finite()) {
                    return Err(Error::NumericDomain("regression targets must be finite".into()));
                }
            }
        }
        Ok(SampleBatch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> SampleBatch {
        SampleBatch {
            inputs: self.inputs.select(Axis(0), indices),
            targets: self.targets.select(indices),
        }
    }
}

/// Anything that can materialize a subset of its samples as a batch.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn select(&self, indices: &[usize]) -> SampleBatch;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for SampleBatch {
    fn len(&self) -> usize {
        SampleBatch::len(self)
    }

    fn select(&self, indices: &[usize]) -> SampleBatch {
        SampleBatch::select(self, indices)
    }
}

/// IDX images with labels, kept as bytes until selected.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

pub const MNIST_CLASSES: usize = 10;

impl LabeledImages {
    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let images_path = images.as_ref();
        let images = load_idx_images(images_path)?;
        let labels = load_idx_labels(labels)?;
        if images.count != labels.len() {
            return Err(Error::Format {
                path: images_path.to_path_buf(),
                message: format!("{} images but {} labels", images.count, labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= MNIST_CLASSES) {
            return Err(Error::Format {
                path: images_path.to_path_buf(),
                message: format!("label {bad} outside 0..{MNIST_CLASSES}"),
            });
        }
        Ok(LabeledImages { images, labels })
    }
}

impl SampleSource for LabeledImages {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn select(&self, indices: &[usize]) -> SampleBatch {
        let width = self.images.pixels_per_image();
        let mut inputs = Array2::zeros((indices.len(), width));
        for (mut row, &i) in inputs.outer_iter_mut().zip(indices) {
            for (dst, &px) in row.iter_mut().zip(self.images.image(i)) {
                *dst = px as f64 / 255.0;
            }
        }
        SampleBatch {
            inputs,
            targets: Targets::Classes {
                labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
                num_classes: MNIST_CLASSES,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: LabeledImages,
    pub test: LabeledImages,
}

impl Mnist {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let paths = MnistPaths::in_dir(dir);
        Ok(Mnist {
            train: LabeledImages::load(&paths.train_images, &paths.train_labels)?,
            test: LabeledImages::load(&paths.test_images, &paths.test_labels)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub shuffle_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Train and validation come from one seeded shuffle of the training source
/// (train from the front, validation from the back); test is the first
/// `test_count` samples of the separate test source.
pub fn split_indices(train_source_len: usize, test_source_len: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    if spec.train_count + spec.val_count > train_source_len {
        return Err(Error::invalid(format!(
            "train {} + validation {} exceeds {} training samples",
            spec.train_count, spec.val_count, train_source_len
        )));
    }
    if spec.test_count > test_source_len {
        return Err(Error::invalid(format!(
            "test count {} exceeds {} test samples",
            spec.test_count, test_source_len
        )));
    }
    let mut order: Vec<usize> = (0..train_source_len).collect();
    order.shuffle(&mut stream_rng(spec.shuffle_seed, Stream::Split));
    Ok(SplitIndices {
        train: order[..spec.train_count].to_vec(),
        val: order[train_source_len - spec.val_count..].to_vec(),
        test: (0..spec.test_count).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: SampleBatch,
    pub val: SampleBatch,
    pub test: SampleBatch,
}

pub fn split<S: SampleSource, T: SampleSource>(train_source: &S, test_source: &T, spec: &SplitSpec) -> Result<Splits> {
    let idx = split_indices(train_source.len(), test_source.len(), spec)?;
    Ok(Splits {
        train: train_source.select(&idx.train),
        val: train_source.select(&idx.val),
        test: test_source.select(&idx.test),
    })
}

/// One epoch of batches in a seeded order; the last batch may be short.
pub fn batches(dataset: &SampleBatch, batch_size: usize, epoch_seed: u64) -> Result<Vec<SampleBatch>> {
    Ok(batch_indices(dataset.len(), batch_size, epoch_seed)?
        .iter()
        .map(|idx| dataset.select(idx))
        .collect())
}

pub fn batch_indices(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticFn {
    /// `sin x` on `[-π, π]`
    Sine,
    /// `exp(-8 x²)` on `[-1, 1]`
    Peak,
}

impl SyntheticFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            SyntheticFn::Sine => x.sin(),
            SyntheticFn::Peak => (-8.0 * x * x).exp(),
        }
    }

    fn domain(&self) -> (f64, f64) {
        match self {
            SyntheticFn::Sine => (-PI, PI),
            SyntheticFn::Peak => (-1.0, 1.0),
        }
    }
}

impl FromStr for SyntheticFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SyntheticFn::Sine),
            "peak" => Ok(SyntheticFn::Peak),
            other => Err(Error::invalid(format!("unknown synthetic function '{other}' (expected sine|peak)"))),
        }
    }
}

pub fn synthetic_regression(name: SyntheticFn, m: usize, noise_sd: f64, seed: u64) -> Result<SampleBatch> {
    if m == 0 {
        return Err(Error::invalid("synthetic dataset needs m >= 1"));
    }
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(Error::invalid(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let (lo, hi) = name.domain();
    let xs: Vec<f64> = (0..m).map(|_| rng.random_range(lo..=hi)).collect();
    let ys = xs
        .iter()
        .map(|&x| {
            let clean = name.eval(x);
            if noise_sd > 0.0 {
                clean + noise.sample(&mut rng)
            } else {
                clean
            }
        })
        .collect();
    SampleBatch::new(Array2::from_shape_vec((m, 1), xs).expect("shape"), Targets::Real(ys))
}

/// Linearly separable 1-D binary problem: label is `x > 0`, with `x` drawn
/// from `[-1, -margin] ∪ [margin, 1]`.
pub fn synthetic_binary(m: usize, margin: f64, seed: u64) -> Result<SampleBatch> {
    if m == 0 {
        return Err(Error::invalid("synthetic dataset needs m >= 1"));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let mut xs = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let positive = i % 2 == 0;
        let magnitude = rng.random_range(margin..=1.0);
        xs.push(if positive { magnitude } else { -magnitude });
        labels.push(positive as usize);
    }
    SampleBatch::new(
        Array2::from_shape_vec((m, 1), xs).expect("shape"),
        Targets::Classes { labels, num_classes: 2 },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn toy(n: usize) -> SampleBatch {
        let inputs = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        SampleBatch::new(inputs, Targets::Real((0..n).map(|i| i as f64).collect())).unwrap()
    }

    #[test]
    fn batch_sizes_keep_short_tail() {
        let sizes: Vec<usize> = batches(&toy(10), 3, 5).unwrap().iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert!(batches(&toy(10), 0, 5).is_err());
    }

    #[test]
    fn batches_cover_dataset_once_and_repeat_per_seed() {
        let a = batch_indices(10, 3, 42).unwrap();
        let b = batch_indices(10, 3, 42).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(a, batch_indices(10, 3, 43).unwrap());
        // Batches carry matching rows and targets.
        for batch in batches(&toy(10), 4, 1).unwrap() {
            let Targets::Real(t) = &batch.targets else { unreachable!() };
            for (row, y) in batch.inputs.outer_iter().zip(t) {
                assert_eq!(row[0], 2.0 * y);
            }
        }
    }

    #[test]
    fn split_protocol_sizes() {
        let spec = SplitSpec {
            train_count: 50_000,
            val_count: 10_000,
            test_count: 10_000,
            shuffle_seed: 1,
        };
        let idx = split_indices(60_000, 10_000, &spec).unwrap();
        assert_eq!((idx.train.len(), idx.val.len(), idx.test.len()), (50_000, 10_000, 10_000));
        let train: HashSet<_> = idx.train.iter().collect();
        assert!(idx.val.iter().all(|i| !train.contains(i)));
        assert_eq!(idx, split_indices(60_000, 10_000, &spec).unwrap());
    }

    #[test]
    fn split_allows_eval_only_and_rejects_oversubscription() {
        let spec = SplitSpec {
            train_count: 0,
            val_count: 0,
            test_count: 4,
            shuffle_seed: 3,
        };
        let s = split(&toy(10), &toy(5), &spec).unwrap();
        assert!(s.train.is_empty() && s.val.is_empty());
        assert_eq!(s.test.len(), 4);
        let over = SplitSpec {
            train_count: 8,
            val_count: 3,
            ..spec
        };
        assert!(matches!(split(&toy(10), &toy(5), &over), Err(Error::InvalidArgument(_))));
        let over_test = SplitSpec { test_count: 6, ..spec };
        assert!(split(&toy(10), &toy(5), &over_test).is_err());
    }

    #[test]
    fn synthetic_examples() {
        let d = synthetic_regression(SyntheticFn::Sine, 4, 0.0, 9).unwrap();
        let Targets::Real(y) = &d.targets else { unreachable!() };
        for (x, y) in d.inputs.column(0).iter().zip(y) {
            assert_eq!(*y, x.sin());
            assert!((-PI..=PI).contains(x));
        }
        assert_eq!(d, synthetic_regression(SyntheticFn::Sine, 4, 0.0, 9).unwrap());
        let noisy = synthetic_regression(SyntheticFn::Peak, 50, 0.1, 9).unwrap();
        assert_eq!(noisy, synthetic_regression(SyntheticFn::Peak, 50, 0.1, 9).unwrap());
        assert_ne!(noisy, synthetic_regression(SyntheticFn::Peak, 50, 0.1, 10).unwrap());
        assert!("cosine".parse::<SyntheticFn>().is_err());
        assert!(synthetic_regression(SyntheticFn::Sine, 0, 0.0, 1).is_err());
    }

    #[test]
    fn peak_is_one_at_origin() {
        assert_eq!(SyntheticFn::Peak.eval(0.0), 1.0);
        let d = synthetic_regression(SyntheticFn::Peak, 20, 0.0, 2).unwrap();
        let Targets::Real(y) = &d.targets else { unreachable!() };
        for (x, y) in d.inputs.column(0).iter().zip(y) {
            assert_eq!(*y, SyntheticFn::Peak.eval(*x));
            assert!((-1.0..=1.0).contains(x));
        }
    }

    #[test]
    fn synthetic_binary_is_separable() {
        let d = synthetic_binary(30, 0.1, 4).unwrap();
        let Targets::Classes { labels, num_classes } = &d.targets else { unreachable!() };
        assert_eq!(*num_classes, 2);
        for (x, l) in d.inputs.column(0).iter().zip(labels) {
            assert_eq!(*x > 0.0, *l == 1);
            assert!(x.abs() >= 0.1);
        }
    }

    #[test]
    fn labeled_images_scale_pixels() {
        let li = LabeledImages {
            images: IdxImages {
                count: 2,
                rows: 1,
                cols: 2,
                pixels: vec![0, 255, 51, 102],
            },
            labels: vec![7, 2],
        };
        let b = li.select(&[1, 0]);
        assert_eq!(b.inputs.row(0).to_vec(), vec![0.2, 0.4]);
        assert_eq!(b.inputs.row(1).to_vec(), vec![0.0, 1.0]);
        assert_eq!(
            b.targets,
            Targets::Classes {
                labels: vec![2, 7],
                num_classes: 10
            }
        );
    }

    #[test]
    fn batch_validation() {
        let inputs = Array2::zeros((2, 1));
        let bad = Targets::Classes {
            labels: vec![0, 3],
            num_classes: 3,
        };
        assert!(SampleBatch::new(inputs.clone(), bad).is_err());
        assert!(SampleBatch::new(inputs, Targets::Real(vec![1.0])).is_err());
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_deterministic(
            seed in any::<u64>(),
            total in 1usize..200,
            train_frac in 0.0f64..1.0,
            val_frac in 0.0f64..1.0,
        ) {
            let train = (total as f64 * train_frac) as usize;
            let val = ((total - train) as f64 * val_frac) as usize;
            let spec = SplitSpec { train_count: train, val_count: val, test_count: 0, shuffle_seed: seed };
            let a = split_indices(total, 0, &spec).unwrap();
            prop_assert_eq!(&a, &split_indices(total, 0, &spec).unwrap());
            let set: HashSet<_> = a.train.iter().chain(&a.val).collect();
            prop_assert_eq!(set.len(), train + val);
            prop_assert!(set.iter().all(|&&i| i < total));
        }
    }
}

//! Labeled datasets: synthetic point clouds and the CIFAR-10 binary format.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_PIXELS: usize = 32 * 32 * 3;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Angle in radians each spiral arm sweeps from its inner to its outer end.
pub const SPIRAL_SWEEP: f64 = 3.0 * PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    SyntheticSpiral,
    SyntheticMoons,
    Cifar10Binary { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of the Gaussian coordinate noise (synthetic only).
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn spiral(classes: usize, train: usize, test: usize, noise: f64, seed: u64) -> Self {
        Self {
            source: DataSource::SyntheticSpiral,
            classes,
            train,
            test,
            noise,
            seed,
        }
    }

    pub fn moons(train: usize, test: usize, noise: f64, seed: u64) -> Self {
        Self {
            source: DataSource::SyntheticMoons,
            classes: 2,
            train,
            test,
            noise,
            seed,
        }
    }

    /// `train` is the stratified training subset size; `test` likewise for
    /// the test batch.
    pub fn cifar10(path: impl Into<PathBuf>, train: usize, test: usize, seed: u64) -> Self {
        Self {
            source: DataSource::Cifar10Binary { path: path.into() },
            classes: CIFAR_CLASSES,
            train,
            test,
            noise: 0.0,
            seed,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match &self.source {
            DataSource::Cifar10Binary { path } => load_cifar10(path, self.train, self.test, self.seed),
            _ => gen_synthetic(self),
        }
    }
}

/// A labeled split: features `[n, input_dim]` and one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Split {
        Split {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.x.last_dim()
    }
}

/// Per-class counts for `n` samples over `classes`, differing by at most 1.
fn balanced_counts(n: usize, classes: usize) -> Vec<usize> {
    (0..classes).map(|k| n / classes + usize::from(k < n % classes)).collect()
}

fn spiral_point<R: Rng>(class: usize, classes: usize, noise: &Option<Normal<f64>>, rng: &mut R) -> [f64; 2] {
    let t: f64 = rng.random_range(0.0..1.0);
    let r = 0.1 + 0.9 * t;
    let theta = 2.0 * PI * class as f64 / classes as f64 + SPIRAL_SWEEP * t;
    let mut p = [r * theta.cos(), r * theta.sin()];
    if let Some(n) = noise {
        p[0] += n.sample(rng);
        p[1] += n.sample(rng);
    }
    p
}

fn moon_point<R: Rng>(class: usize, noise: &Option<Normal<f64>>, rng: &mut R) -> [f64; 2] {
    let a: f64 = rng.random_range(0.0..PI);
    let mut p = if class == 0 {
        [a.cos(), a.sin()]
    } else {
        [1.0 - a.cos(), 0.5 - a.sin()]
    };
    if let Some(n) = noise {
        p[0] += n.sample(rng);
        p[1] += n.sample(rng);
    }
    p
}

fn synthetic_split<R: Rng>(spec: &DatasetSpec, n: usize, rng: &mut R) -> Result<Split> {
    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for (class, count) in balanced_counts(n, spec.classes).into_iter().enumerate() {
        for _ in 0..count {
            let p = match spec.source {
                DataSource::SyntheticSpiral => spiral_point(class, spec.classes, &noise, rng),
                _ => moon_point(class, &noise, rng),
            };
            rows.push((p, class));
        }
    }
    rows.shuffle(rng);
    let data = rows.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    Ok(Split {
        x: Tensor::new([n, 2], data)?,
        y: rows.into_iter().map(|(_, c)| c).collect(),
    })
}

/// Spiral arms or two interleaved moons in the plane, deterministic from
/// `spec.seed`. Class counts differ by at most one within each split.
pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    match spec.source {
        DataSource::SyntheticSpiral => {}
        DataSource::SyntheticMoons if spec.classes == 2 => {}
        DataSource::SyntheticMoons => {
            return Err(Error::Config("moons data has exactly 2 classes".into()));
        }
        DataSource::Cifar10Binary { .. } => {
            return Err(Error::Config("CIFAR-10 is not synthetic".into()));
        }
    }
    if spec.train == 0 || spec.test == 0 {
        return Err(Error::Config("train and test sizes must be positive".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be >= 0, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = synthetic_split(spec, spec.train, &mut rng)?;
    let test = synthetic_split(spec, spec.test, &mut rng)?;
    Ok(Dataset {
        train,
        test,
        classes: spec.classes,
    })
}

/// One CIFAR-10 record: label and 3072 channel-planar pixel bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Parses the contents of one binary batch file.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
                bytes.len()
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("record {i} has label {}", rec[0]),
                });
            }
            Ok(CifarRecord {
                label: rec[0],
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

pub fn read_cifar_batch(path: &Path) -> Result<Vec<CifarRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_cifar_batch(&bytes, path)
}

/// Indices of a class-stratified subset of `n` records, deterministic from
/// `rng`. Returned in ascending order.
fn stratified_subset<R: Rng>(records: &[CifarRecord], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CIFAR_CLASSES];
    for (i, r) in records.iter().enumerate() {
        by_class[r.label as usize].push(i);
    }
    let mut picked = Vec::with_capacity(n);
    for (pool, want) in by_class.iter_mut().zip(balanced_counts(n, CIFAR_CLASSES)) {
        if pool.len() < want {
            return Err(Error::Config(format!(
                "stratified subset of {n} needs {want} per class, a class has only {}",
                pool.len()
            )));
        }
        pool.shuffle(rng);
        picked.extend_from_slice(&pool[..want]);
    }
    picked.sort_unstable();
    Ok(picked)
}

fn to_split(records: &[CifarRecord], idx: &[usize], mean: &[f64; 3], std: &[f64; 3]) -> Split {
    let mut data = Vec::with_capacity(idx.len() * CIFAR_PIXELS);
    for &i in idx {
        for (p, &b) in records[i].pixels.iter().enumerate() {
            let ch = p / 1024;
            data.push((b as f64 / 255.0 - mean[ch]) / std[ch]);
        }
    }
    Split {
        x: Tensor::new([idx.len(), CIFAR_PIXELS], data).expect("subset is non-empty"),
        y: idx.iter().map(|&i| records[i].label as usize).collect(),
    }
}

/// Loads stratified subsets of the CIFAR-10 binary batches in `dir`.
/// Pixels are scaled to [0, 1] and normalized per channel with statistics
/// of the training subset.
pub fn load_cifar10(dir: &Path, train_subset: usize, test_subset: usize, seed: u64) -> Result<Dataset> {
    if train_subset == 0 || test_subset == 0 {
        return Err(Error::Config("subset sizes must be positive".into()));
    }
    let mut train_records = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        train_records.extend(read_cifar_batch(&dir.join(f))?);
    }
    let test_records = read_cifar_batch(&dir.join(CIFAR_TEST_FILE))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_idx = stratified_subset(&train_records, train_subset, &mut rng)?;
    let test_idx = stratified_subset(&test_records, test_subset, &mut rng)?;

    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for &i in &train_idx {
        for (p, &b) in train_records[i].pixels.iter().enumerate() {
            let v = b as f64 / 255.0;
            sum[p / 1024] += v;
            sq[p / 1024] += v * v;
        }
    }
    let n = (train_idx.len() * 1024) as f64;
    let mean = sum.map(|s| s / n);
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-8);
    }
    Ok(Dataset {
        train: to_split(&train_records, &train_idx, &mean, &std),
        test: to_split(&test_records, &test_idx, &mean, &std),
        classes: CIFAR_CLASSES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_counts_within_one() {
        assert_eq!(balanced_counts(10, 3), vec![4, 3, 3]);
        assert_eq!(balanced_counts(9, 3), vec![3, 3, 3]);
    }

    #[test]
    fn synthetic_is_deterministic_and_seed_dependent() {
        let a = gen_synthetic(&DatasetSpec::spiral(3, 50, 20, 0.05, 1)).unwrap();
        let b = gen_synthetic(&DatasetSpec::spiral(3, 50, 20, 0.05, 1)).unwrap();
        let c = gen_synthetic(&DatasetSpec::spiral(3, 50, 20, 0.05, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train.x, c.train.x);
    }

    #[test]
    fn class_balance() {
        for spec in [
            DatasetSpec::spiral(4, 101, 37, 0.1, 3),
            DatasetSpec::moons(101, 37, 0.1, 3),
        ] {
            let d = gen_synthetic(&spec).unwrap();
            for split in [&d.train, &d.test] {
                let mut counts = vec![0usize; spec.classes];
                split.y.iter().for_each(|&y| counts[y] += 1);
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "{counts:?}");
                assert!(split.y.iter().all(|&y| y < spec.classes));
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_synthetic(&DatasetSpec::spiral(1, 10, 10, 0.0, 0)).is_err());
        let mut moons = DatasetSpec::moons(10, 10, 0.0, 0);
        moons.classes = 3;
        assert!(gen_synthetic(&moons).is_err());
    }

    #[test]
    fn cifar_length_and_label_checks() {
        let p = Path::new("data_batch_1.bin");
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 9;
        assert_eq!(parse_cifar_batch(&bytes, p).unwrap().len(), 2);
        let err = parse_cifar_batch(&bytes[..CIFAR_RECORD + 5], p).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
        bytes[0] = 10;
        assert!(matches!(parse_cifar_batch(&bytes, p), Err(Error::Format { .. })));
    }
}

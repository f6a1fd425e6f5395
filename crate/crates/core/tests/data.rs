use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rskip::data::{
    gen_synthetic, load_cifar10, parse_cifar_batch, read_cifar_batch, Dataset, DatasetSpec, Split, CIFAR_PIXELS,
    CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, SPIRAL_SWEEP,
};
use rskip::train::{train, TrainConfig};
use rskip::{Error, ModelConfig, SkipConstruction, Tensor};

/// `n` records with labels cycling through the ten classes and pixel bytes
/// derived from the record index.
fn fake_batch(n: usize, offset: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for i in 0..n {
        out.push(((i + offset) % 10) as u8);
        out.extend((0..CIFAR_PIXELS).map(|p| ((i * 7 + p * 13 + offset) % 256) as u8));
    }
    out
}

fn write_fake_cifar(dir: &std::path::Path, per_file: usize) {
    for (k, f) in CIFAR_TRAIN_FILES.iter().enumerate() {
        std::fs::write(dir.join(f), fake_batch(per_file, k)).unwrap();
    }
    std::fs::write(dir.join(CIFAR_TEST_FILE), fake_batch(per_file, 99)).unwrap();
}

#[test]
fn parses_ten_thousand_records() {
    let bytes = fake_batch(10_000, 0);
    let mut file = tempfile::NamedTempFile::new().unwrap();
    file.write_all(&bytes).unwrap();
    let records = read_cifar_batch(file.path()).unwrap();
    assert_eq!(records.len(), 10_000);
    for (i, r) in records.iter().enumerate().step_by(997) {
        assert_eq!(r.label as usize, i % 10);
        assert_eq!(r.pixels.len(), CIFAR_PIXELS);
        assert_eq!(r.pixels[5], ((i * 7 + 65) % 256) as u8);
    }
}

#[test]
fn truncated_file_names_the_path() {
    let mut bytes = fake_batch(3, 0);
    bytes.truncate(bytes.len() - 10);
    let mut file = tempfile::NamedTempFile::new().unwrap();
    file.write_all(&bytes).unwrap();
    match read_cifar_batch(file.path()) {
        Err(Error::Format { path, .. }) => assert_eq!(path, file.path()),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn out_of_range_label_is_rejected() {
    let mut bytes = fake_batch(2, 0);
    bytes[CIFAR_RECORD] = 10;
    assert!(matches!(
        parse_cifar_batch(&bytes, std::path::Path::new("x.bin")),
        Err(Error::Format { .. })
    ));
}

#[test]
fn missing_batch_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_cifar10(dir.path(), 10, 10, 0).is_err());
}

#[test]
fn stratified_subsets_are_balanced_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_fake_cifar(dir.path(), 200);
    let a = load_cifar10(dir.path(), 100, 50, 3).unwrap();
    let b = load_cifar10(dir.path(), 100, 50, 3).unwrap();
    assert_eq!(a, b);
    let c = load_cifar10(dir.path(), 100, 50, 4).unwrap();
    assert_ne!(a.train, c.train);
    for (split, n) in [(&a.train, 100), (&a.test, 50)] {
        assert_eq!(split.len(), n);
        assert_eq!(split.x.shape(), [n, CIFAR_PIXELS]);
        for k in 0..10 {
            assert_eq!(split.y.iter().filter(|&&y| y == k).count(), n / 10);
        }
    }
    // Training pixels are normalized per channel.
    for ch in 0..3 {
        let vals: Vec<f64> = a
            .train
            .x
            .data()
            .chunks(CIFAR_PIXELS)
            .flat_map(|row| row[ch * 1024..(ch + 1) * 1024].iter().copied())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "channel {ch}: {mean} {var}");
    }
}

#[test]
fn oversized_subset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_fake_cifar(dir.path(), 20);
    assert!(matches!(load_cifar10(dir.path(), 1000, 10, 0), Err(Error::Config(_))));
}

/// Recovers the arm of a noise-free spiral point from its polar form.
fn spiral_arm(p: &[f64], classes: usize) -> usize {
    let r = p[0].hypot(p[1]);
    let t = (r - 0.1) / 0.9;
    let base = (p[1].atan2(p[0]) - SPIRAL_SWEEP * t).rem_euclid(2.0 * PI);
    ((base / (2.0 * PI / classes as f64)).round() as usize) % classes
}

#[test]
fn zero_noise_spiral_is_separable_by_construction() {
    for classes in [2, 3, 5] {
        let d = gen_synthetic(&DatasetSpec::spiral(classes, 500, 200, 0.0, 9)).unwrap();
        for split in [&d.train, &d.test] {
            for (row, &y) in split.x.data().chunks(2).zip(&split.y) {
                assert_eq!(spiral_arm(row, classes), y);
            }
        }
    }
}

#[test]
fn synthetic_data_is_deterministic_and_balanced() {
    let spec = DatasetSpec::spiral(3, 301, 100, 0.05, 2);
    let a = gen_synthetic(&spec).unwrap();
    assert_eq!(a, gen_synthetic(&spec).unwrap());
    let counts: Vec<usize> = (0..3).map(|k| a.train.y.iter().filter(|&&y| y == k).count()).collect();
    assert_eq!(counts, vec![101, 100, 100]);
    let moons = gen_synthetic(&DatasetSpec::moons(50, 20, 0.1, 2)).unwrap();
    assert_eq!(moons.classes, 2);
    assert!(gen_synthetic(&DatasetSpec::spiral(1, 10, 10, 0.0, 0)).is_err());
}

fn linearly_separable(n: usize, rng: &mut ChaCha8Rng) -> Split {
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    while y.len() < n {
        let p: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let s = p[0] + 0.5 * p[1];
        if s.abs() < 0.1 {
            continue;
        }
        x.extend(p);
        y.push(usize::from(s > 0.0));
    }
    Split {
        x: Tensor::new([n, 2], x).unwrap(),
        y,
    }
}

#[test]
fn shallow_plain_skip_learns_separable_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = Dataset {
        train: linearly_separable(400, &mut rng),
        test: linearly_separable(200, &mut rng),
        classes: 2,
    };
    let cfg = TrainConfig::new(ModelConfig::new(SkipConstruction::plain(), 2, 2, 8, 2), 50);
    let r = train(&cfg, &data).unwrap();
    assert!(!r.failed());
    assert!(r.test_error < 0.05, "{}", r.test_error);
}

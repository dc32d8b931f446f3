//! CIFAR binary ingestion, augmentation, batching and a synthetic stand-in
//! dataset in the same format.
//!
//! A record is one label byte (two for CIFAR-100: coarse then fine) followed
//! by 3072 pixel bytes: 1024 red, 1024 green, 1024 blue, each row-major 32×32.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
const PAD: usize = 4;

/// Label layout of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelFormat {
    /// One label byte, 10 classes.
    Cifar10,
    /// Coarse byte then fine byte; the fine label (100 classes) is kept.
    Cifar100,
}

impl LabelFormat {
    pub fn label_bytes(self) -> usize {
        match self {
            LabelFormat::Cifar10 => 1,
            LabelFormat::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    pub fn num_classes(self) -> usize {
        match self {
            LabelFormat::Cifar10 => 10,
            LabelFormat::Cifar100 => 100,
        }
    }
}

/// Raw images and labels. Pixels stay as bytes until batching, where
/// standardization is applied exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub format: LabelFormat,
    /// `len × 3072` bytes.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// Coarse labels, only for CIFAR-100 (kept so records re-serialize exactly).
    pub coarse: Vec<u8>,
}

impl Dataset {
    pub fn empty(format: LabelFormat) -> Self {
        Self {
            format,
            images: Vec::new(),
            labels: Vec::new(),
            coarse: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.format.num_classes()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Parses whole records from `bytes`. `path` is only used in errors.
    pub fn parse(bytes: &[u8], format: LabelFormat, path: &Path) -> Result<Self> {
        let rb = format.record_bytes();
        if !bytes.len().is_multiple_of(rb) {
            return Err(Error::FileSize {
                path: path.to_path_buf(),
                expected: (bytes.len() / rb * rb) as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut ds = Dataset::empty(format);
        let max = (format.num_classes() - 1) as u8;
        for (record, chunk) in bytes.chunks_exact(rb).enumerate() {
            let label = chunk[format.label_bytes() - 1];
            if label > max {
                return Err(Error::BadLabel {
                    path: path.to_path_buf(),
                    record,
                    label,
                    max,
                });
            }
            if format == LabelFormat::Cifar100 {
                ds.coarse.push(chunk[0]);
            }
            ds.labels.push(label);
            ds.images.extend_from_slice(&chunk[format.label_bytes()..]);
        }
        Ok(ds)
    }

    /// Records `start..end` as bytes in the source layout.
    pub fn serialize_range(&self, start: usize, end: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity((end - start) * self.format.record_bytes());
        for i in start..end {
            if self.format == LabelFormat::Cifar100 {
                out.push(self.coarse[i]);
            }
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.serialize_range(0, self.len())
    }

    pub fn append(&mut self, other: Dataset) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        self.coarse.extend(other.coarse);
    }

    /// The first `n` records (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            format: self.format,
            images: self.images[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
            coarse: self.coarse[..self.coarse.len().min(n)].to_vec(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn read_file(path: &Path, format: LabelFormat, expected_records: Option<usize>) -> Result<Dataset> {
    let bytes = read(path)?;
    if let Some(n) = expected_records {
        let expected = (n * format.record_bytes()) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::FileSize {
                path: path.to_path_buf(),
                expected,
                actual: bytes.len() as u64,
            });
        }
    }
    Dataset::parse(&bytes, format, path)
}

/// Accepts either the batch directory itself or its parent containing
/// `cifar-10-batches-bin`.
fn resolve_dir(dir: &Path, marker: &str, sub: &str) -> PathBuf {
    if !dir.join(marker).exists() && dir.join(sub).join(marker).exists() {
        dir.join(sub)
    } else {
        dir.to_path_buf()
    }
}

/// Loads the five training files and the test file. `strict` requires the
/// canonical 10000 records per file; otherwise any whole number of records
/// is accepted (subsets and synthetic data).
pub fn load_cifar10(dir: &Path, strict: bool) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, TEST_FILE, "cifar-10-batches-bin");
    let expect = strict.then_some(RECORDS_PER_FILE);
    let mut train = Dataset::empty(LabelFormat::Cifar10);
    for name in TRAIN_FILES {
        train.append(read_file(&dir.join(name), LabelFormat::Cifar10, expect)?);
    }
    let test = read_file(&dir.join(TEST_FILE), LabelFormat::Cifar10, expect)?;
    Ok((train, test))
}

/// CIFAR-100 binary layout: `train.bin` (50000 records) and `test.bin` (10000).
pub fn load_cifar100(dir: &Path, strict: bool) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, "test.bin", "cifar-100-binary");
    let train = read_file(&dir.join("train.bin"), LabelFormat::Cifar100, strict.then_some(50_000))?;
    let test = read_file(&dir.join("test.bin"), LabelFormat::Cifar100, strict.then_some(10_000))?;
    Ok((train, test))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes a CIFAR-10 style directory: the training set split as evenly as
/// possible over the five training files, plus the test file.
pub fn write_cifar10(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let n = train.len();
    for (k, name) in TRAIN_FILES.iter().enumerate() {
        let (start, end) = (n * k / 5, n * (k + 1) / 5);
        write(&dir.join(name), &train.serialize_range(start, end))?;
    }
    write(&dir.join(TEST_FILE), &test.serialize())
}

/// Per-channel standardization constants (applied to pixel/255).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Crop of the 4-pixel reflect-padded image at offset `(dx, dy)` in `0..=8`.
/// Offset `(4, 4)` returns the original.
pub fn crop_reflect(img: &[u8], dx: usize, dy: usize) -> Vec<u8> {
    let mut out = vec![0u8; IMAGE_BYTES];
    for c in 0..CHANNELS {
        let plane = &img[c * SIDE * SIDE..(c + 1) * SIDE * SIDE];
        for y in 0..SIDE {
            let sy = reflect(y as isize + dy as isize - PAD as isize, SIDE);
            for x in 0..SIDE {
                let sx = reflect(x as isize + dx as isize - PAD as isize, SIDE);
                out[c * SIDE * SIDE + y * SIDE + x] = plane[sy * SIDE + sx];
            }
        }
    }
    out
}

pub fn hflip(img: &[u8]) -> Vec<u8> {
    let mut out = img.to_vec();
    for row in out.chunks_exact_mut(SIDE) {
        row.reverse();
    }
    out
}

/// Pad-4 reflect, random 32×32 crop, horizontal flip with probability 0.5.
/// Draws `dx`, `dy`, then the flip bit.
pub fn augment<R: Rng + ?Sized>(img: &[u8], rng: &mut R) -> Vec<u8> {
    let dx = rng.random_range(0..=2 * PAD);
    let dy = rng.random_range(0..=2 * PAD);
    let flip = rng.random_bool(0.5);
    let out = crop_reflect(img, dx, dy);
    if flip {
        hflip(&out)
    } else {
        out
    }
}

/// Standardized `[b,3,32,32]` tensor from raw images.
pub fn to_tensor<'a>(images: impl ExactSizeIterator<Item = &'a [u8]>, norm: &Normalization) -> Tensor<f32> {
    let b = images.len();
    let scale: Vec<(f32, f32)> = (0..CHANNELS)
        .map(|c| ((1.0 / (255.0 * norm.std[c])) as f32, (norm.mean[c] / norm.std[c]) as f32))
        .collect();
    let mut data = Vec::with_capacity(b * IMAGE_BYTES);
    for img in images {
        for (c, plane) in img.chunks_exact(SIDE * SIDE).enumerate() {
            let (s, m) = scale[c];
            data.extend(plane.iter().map(|&p| p as f32 * s - m));
        }
    }
    Tensor::from_vec(&[b, CHANNELS, SIDE, SIDE], data).expect("image batch shape")
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    /// Shuffle and augment (training); otherwise source order, untouched.
    pub train: bool,
    pub augment: bool,
    pub norm: Normalization,
}

/// Sample order for one epoch: a seeded permutation when shuffling.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch));
    }
    order
}

/// Iterator over batches; the last short batch is kept.
pub struct Batches<'a> {
    set: &'a Dataset,
    cfg: BatchConfig,
    order: Vec<usize>,
    pos: usize,
    aug_rng: Option<rand_chacha::ChaCha8Rng>,
}

pub fn batches(set: &Dataset, cfg: BatchConfig) -> Result<Batches<'_>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(Batches {
        set,
        order: epoch_order(set.len(), cfg.seed, cfg.epoch, cfg.train),
        aug_rng: (cfg.train && cfg.augment).then(|| stream_rng(cfg.seed, Stream::Augment, cfg.epoch)),
        cfg,
        pos: 0,
    })
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.cfg.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.cfg.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let labels = idx.iter().map(|&i| self.set.labels[i] as usize).collect();
        let images = match &mut self.aug_rng {
            Some(rng) => {
                let raw: Vec<Vec<u8>> = idx.iter().map(|&i| augment(self.set.image(i), rng)).collect();
                to_tensor(raw.iter().map(|v| v.as_slice()), &self.cfg.norm)
            }
            None => to_tensor(idx.iter().map(|&i| self.set.image(i)), &self.cfg.norm),
        };
        Some(Batch { images, labels })
    }
}

/// Class-dependent images in CIFAR-10 format: each class has its own base
/// colour and stripe orientation/frequency, overlaid with per-pixel noise.
/// Labels cycle through the classes so every prefix is near-balanced.
pub fn synthetic_cifar10(n: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, Stream::Synthetic, 0);
    let mut ds = Dataset::empty(LabelFormat::Cifar10);
    for i in 0..n {
        let label = (i % 10) as u8;
        let k = label as f64;
        let base = [
            0.25 + 0.5 * ((k * 0.7).sin() * 0.5 + 0.5),
            0.25 + 0.5 * ((k * 1.3 + 1.0).sin() * 0.5 + 0.5),
            0.25 + 0.5 * ((k * 2.1 + 2.0).sin() * 0.5 + 0.5),
        ];
        let angle = k * std::f64::consts::PI / 10.0;
        let freq = 0.25 + 0.05 * (label % 5) as f64;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        ds.labels.push(label);
        for (c, b) in base.iter().enumerate() {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) * freq + phase + c as f64;
                    let noise: f64 = rng.random_range(-0.15..0.15);
                    let v = (b + 0.2 * t.sin() + noise).clamp(0.0, 1.0);
                    ds.images.push((v * 255.0).round() as u8);
                }
            }
        }
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    fn ramp_image() -> Vec<u8> {
        (0..IMAGE_BYTES).map(|i| (i * 7 % 251) as u8).collect()
    }

    #[test]
    fn record_round_trip() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(128u8, IMAGE_BYTES));
        let ds = Dataset::parse(&rec, LabelFormat::Cifar10, Path::new("x")).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 7);
        assert!(ds.image(0).iter().all(|&p| p == 128));
        assert_eq!(ds.serialize(), rec);
    }

    #[test]
    fn parse_errors() {
        let short = vec![0u8; 3000];
        match Dataset::parse(&short, LabelFormat::Cifar10, Path::new("f.bin")) {
            Err(Error::FileSize { actual: 3000, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut rec = vec![10u8];
        rec.extend(vec![0u8; IMAGE_BYTES]);
        match Dataset::parse(&rec, LabelFormat::Cifar10, Path::new("f.bin")) {
            Err(Error::BadLabel { label: 10, record: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar100_keeps_fine_label_and_bytes() {
        let mut rec = vec![3u8, 88u8];
        rec.extend(ramp_image());
        let ds = Dataset::parse(&rec, LabelFormat::Cifar100, Path::new("x")).unwrap();
        assert_eq!(ds.labels, vec![88]);
        assert_eq!(ds.serialize(), rec);
    }

    #[test]
    fn directory_round_trip_and_strict_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let train = synthetic_cifar10(53, 1);
        let test = synthetic_cifar10(11, 2);
        write_cifar10(dir.path(), &train, &test).unwrap();
        let (tr, te) = load_cifar10(dir.path(), false).unwrap();
        assert_eq!(tr, train);
        assert_eq!(te, test);
        for (k, name) in TRAIN_FILES.iter().enumerate() {
            let bytes = fs::read(dir.path().join(name)).unwrap();
            assert_eq!(bytes, train.serialize_range(53 * k / 5, 53 * (k + 1) / 5));
        }
        match load_cifar10(dir.path(), true) {
            Err(Error::FileSize { expected, .. }) => assert_eq!(expected, 10_000 * 3073),
            other => panic!("{other:?}"),
        }
        assert!(load_cifar10(&dir.path().join("missing"), false).is_err());
    }

    #[test]
    fn crop_and_flip_identities() {
        let img = ramp_image();
        assert_eq!(crop_reflect(&img, PAD, PAD), img);
        assert_eq!(hflip(&hflip(&img)), img);
        // shifting by one pixel right reads column x+1
        let shifted = crop_reflect(&img, PAD + 1, PAD);
        assert_eq!(shifted[0], img[1]);
        // reflection at the left border: column -1 maps to column 1
        let left = crop_reflect(&img, PAD - 1, PAD);
        assert_eq!(left[0], img[1]);
        assert_eq!(left[1], img[0]);
    }

    fn digest(t: &Tensor<f32>) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    fn cfg(bs: usize) -> BatchConfig {
        BatchConfig {
            batch_size: bs,
            seed: 9,
            epoch: 3,
            train: true,
            augment: true,
            norm: Normalization::default(),
        }
    }

    #[test]
    fn batching_is_deterministic_and_complete() {
        let ds = synthetic_cifar10(23, 4);
        let a: Vec<Batch> = batches(&ds, cfg(5)).unwrap().collect();
        let b: Vec<Batch> = batches(&ds, cfg(5)).unwrap().collect();
        assert_eq!(a.len(), 5);
        assert_eq!(a.last().unwrap().labels.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(digest(&x.images), digest(&y.images));
        }
        let mut seen: Vec<u8> = a.iter().flat_map(|b| b.labels.iter().map(|&l| l as u8)).collect();
        let mut src = ds.labels.clone();
        seen.sort();
        src.sort();
        assert_eq!(seen, src);

        let other = BatchConfig { epoch: 4, ..cfg(5) };
        let c: Vec<usize> = batches(&ds, other).unwrap().flat_map(|b| b.labels).collect();
        let a_flat: Vec<usize> = a.iter().flat_map(|b| b.labels.clone()).collect();
        assert_ne!(c, a_flat);
        assert!(batches(&ds, cfg(0)).is_err());
    }

    #[test]
    fn eval_batches_keep_order_and_pixels() {
        let ds = synthetic_cifar10(7, 5);
        let c = BatchConfig { train: false, ..cfg(4) };
        let got: Vec<Batch> = batches(&ds, c).unwrap().collect();
        let labels: Vec<usize> = got.iter().flat_map(|b| b.labels.clone()).collect();
        assert_eq!(labels, ds.labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
        let direct = to_tensor(std::iter::once(ds.image(0)), &Normalization::default());
        assert_eq!(got[0].images.data()[..IMAGE_BYTES], direct.data()[..]);
    }

    #[test]
    fn standardization_values() {
        let img = vec![255u8; IMAGE_BYTES];
        let n = Normalization::default();
        let t = to_tensor(std::iter::once(img.as_slice()), &n);
        for c in 0..3 {
            let want = (1.0 - n.mean[c]) / n.std[c];
            assert!((t.data()[c * 1024] as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn augmentation_uses_the_documented_draw_order() {
        let img = ramp_image();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let got = augment(&img, &mut r1);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let dx = r2.random_range(0..=8usize);
        let dy = r2.random_range(0..=8usize);
        let flip = r2.random_bool(0.5);
        let mut want = crop_reflect(&img, dx, dy);
        if flip {
            want = hflip(&want);
        }
        assert_eq!(got, want);
    }

    #[test]
    fn synthetic_labels_are_balanced() {
        let ds = synthetic_cifar10(100, 0);
        for k in 0..10u8 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        assert_eq!(ds, synthetic_cifar10(100, 0));
    }
}

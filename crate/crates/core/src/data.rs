//! Image datasets: the CIFAR-10 binary archive and a seeded synthetic
//! stand-in that needs no download.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Shape4, Tensor4};

pub const CIFAR_CLASSES: usize = 10;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_PER_FILE: usize = 10_000;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labelled images `(N, C, H, W)` with labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor4<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `(1, C, H, W)`.
    pub fn sample_shape(&self) -> Shape4 {
        self.images.shape().with_batch(1)
    }

    /// Selects the listed samples in order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        })
    }

    /// Seeded class-balanced subset of `n` samples (`n / classes` per class,
    /// remainder to the lowest class ids). Order of the result is shuffled.
    pub fn balanced_subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut rng = SeededRng::new(seed);
        let mut chosen = Vec::with_capacity(n);
        for (k, members) in by_class.iter_mut().enumerate() {
            let want = n / self.classes + usize::from(k < n % self.classes);
            if members.len() < want {
                return Err(Error::InvalidArgument(format!(
                    "class {k} has {} samples, subset needs {want}",
                    members.len()
                )));
            }
            rng.shuffle(members);
            chosen.extend_from_slice(&members[..want]);
        }
        rng.shuffle(&mut chosen);
        self.select(&chosen)
    }
}

/// Per-channel mean and standard deviation of a dataset's images.
pub fn channel_moments(images: &Tensor4<f32>) -> (Vec<f64>, Vec<f64>) {
    let s = images.shape();
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut mean = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, chunk) in images.sample(n).chunks(plane).enumerate() {
            mean[c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, chunk) in images.sample(n).chunks(plane).enumerate() {
            var[c] += chunk.iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let std = var.iter().map(|v| (v / count).sqrt().max(1e-12)).collect();
    (mean, std)
}

/// Standardizes both splits per channel with constants from `train` only.
pub fn standardize(train: &mut Dataset, test: &mut Dataset) {
    let (mean, std) = channel_moments(&train.images);
    for ds in [train, test] {
        let plane = ds.images.shape().plane();
        let channels = ds.images.shape().c;
        for (i, v) in ds.images.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % channels;
            *v = ((*v as f64 - mean[c]) / std[c]) as f32;
        }
    }
}

fn read_cifar_file(path: &Path, expected_records: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected_records * CIFAR_RECORD {
        return Err(Error::CorruptBatchFile {
            path: path.to_path_buf(),
            reason: format!(
                "{} bytes, expected {}",
                bytes.len(),
                expected_records * CIFAR_RECORD
            ),
        });
    }
    let mut pixels = Vec::with_capacity(expected_records * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(expected_records);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::CorruptBatchFile {
                path: path.to_path_buf(),
                reason: format!("label byte {label}"),
            });
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Reads the CIFAR-10 binary archive from `dir`: five training batch files
/// and one test file, each 10000 records of 1 label byte followed by
/// 1024 R, 1024 G and 1024 B bytes in row-major 32x32 order. Pixels are
/// scaled to `[0, 1]`; no standardization is applied.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let shape = |n| Shape4::new(n, 3, CIFAR_SIDE, CIFAR_SIDE);
    let mut train_px = Vec::new();
    let mut train_labels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        let (px, labels) = read_cifar_file(&dir.join(name), CIFAR_PER_FILE)?;
        train_px.extend(px);
        train_labels.extend(labels);
    }
    let (test_px, test_labels) = read_cifar_file(&dir.join(CIFAR_TEST_FILE), CIFAR_PER_FILE)?;
    let train = Dataset::new(
        Tensor4::from_vec(shape(train_labels.len()), train_px)?,
        train_labels,
        CIFAR_CLASSES,
        Split::Train,
    )?;
    let test = Dataset::new(
        Tensor4::from_vec(shape(test_labels.len()), test_px)?,
        test_labels,
        CIFAR_CLASSES,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Parameters of the synthetic texture dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// `(C, H, W)` of one image.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise.
    pub difficulty: f64,
    /// Scale of per-image, per-channel brightness and contrast jitter. Zero
    /// gives images whose statistics differ only through pixel noise.
    pub nuisance: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 250,
            test_per_class: 100,
            channels: 3,
            height: 16,
            width: 16,
            seed: 0,
            difficulty: 1.5,
            nuisance: 0.0,
        }
    }
}

const WAVES_PER_TEMPLATE: usize = 3;

/// Class-specific random templates plus Gaussian pixel noise scaled by
/// `difficulty`. Each template is a sum of a few random plane waves per
/// channel, so classes differ in local texture. With `nuisance > 0` each
/// image channel is additionally scaled by `exp(nuisance * z1 / 2)` and
/// shifted by `nuisance * z2` (fresh standard normals per image and
/// channel). Both splits are standardized per channel with the training
/// split's constants.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 classes".into()));
    }
    if spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::InvalidArgument("synthetic image extents must be >= 1".into()));
    }
    let img = Shape4::new(1, spec.channels, spec.height, spec.width);
    let mut rng = SeededRng::derive(spec.seed, 1);
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut t = vec![0.0; img.len()];
            for c in 0..spec.channels {
                for _ in 0..WAVES_PER_TEMPLATE {
                    let fy = rng.uniform(-3.0, 3.0);
                    let fx = rng.uniform(-3.0, 3.0);
                    let phase = rng.uniform(0.0, 2.0 * PI);
                    let amp = rng.uniform(0.5, 1.0);
                    for h in 0..spec.height {
                        for w in 0..spec.width {
                            let arg = 2.0 * PI * (fy * h as f64 / spec.height as f64 + fx * w as f64 / spec.width as f64);
                            t[img.index(0, c, h, w)] += amp * (arg + phase).sin();
                        }
                    }
                }
            }
            t
        })
        .collect();

    let mut noise = SeededRng::derive(spec.seed, 2);
    let mut order = SeededRng::derive(spec.seed, 3);
    let mut build = |per_class: usize, split: Split| -> Result<Dataset> {
        let mut labels: Vec<usize> = (0..spec.classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect();
        order.shuffle(&mut labels);
        let mut data = Vec::with_capacity(labels.len() * img.len());
        let plane = img.plane();
        for &k in &labels {
            for chunk in templates[k].chunks(plane) {
                let (gain, offset) = if spec.nuisance > 0.0 {
                    ((0.5 * spec.nuisance * noise.normal()).exp(), spec.nuisance * noise.normal())
                } else {
                    (1.0, 0.0)
                };
                data.extend(
                    chunk
                        .iter()
                        .map(|&t| (gain * (t + spec.difficulty * noise.normal()) + offset) as f32),
                );
            }
        }
        Dataset::new(
            Tensor4::from_vec(img.with_batch(labels.len()), data)?,
            labels,
            spec.classes,
            split,
        )
    };
    let mut train = build(spec.train_per_class, Split::Train)?;
    let mut test = build(spec.test_per_class, Split::Test)?;
    standardize(&mut train, &mut test);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fake_cifar(dir: &Path, records: usize) {
        let mut bytes = Vec::with_capacity(records * CIFAR_RECORD);
        for r in 0..records {
            bytes.push((r % 10) as u8);
            bytes.extend((0..CIFAR_RECORD - 1).map(|i| ((i + r) % 256) as u8));
        }
        for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
            fs::write(dir.join(name), &bytes).unwrap();
        }
    }

    #[test]
    fn cifar_layout_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), CIFAR_PER_FILE);
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
        assert!(train.labels[0] <= 9);
        assert_eq!(train.images.shape(), Shape4::new(50_000, 3, 32, 32));
        // Record 0 pixel bytes are i % 256: R plane first, row-major.
        assert_eq!(train.images.at(0, 0, 0, 1), 1.0 / 255.0);
        assert_eq!(train.images.at(0, 1, 0, 0), (1024 % 256) as f32 / 255.0);
        assert_eq!(train.images.at(0, 0, 1, 0), 32.0 / 255.0);
    }

    #[test]
    fn truncated_cifar_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), CIFAR_PER_FILE);
        let path = dir.path().join("data_batch_3.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(err.to_string().contains("corrupt batch file"), "{err}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            train_per_class: 10,
            test_per_class: 5,
            ..SyntheticSpec::default()
        };
        let a = make_synthetic(&spec).unwrap();
        let b = make_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 40);
        assert_eq!(a.1.len(), 20);
        let other = make_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.0.images, other.0.images);
    }

    #[test]
    fn synthetic_train_split_is_standardized() {
        let (train, _) = make_synthetic(&SyntheticSpec::default()).unwrap();
        let (mean, std) = channel_moments(&train.images);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-5);
            assert!((std[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn synthetic_needs_two_classes() {
        let spec = SyntheticSpec {
            classes: 1,
            ..SyntheticSpec::default()
        };
        assert!(make_synthetic(&spec).is_err());
    }

    #[test]
    fn balanced_subset_counts() {
        let (train, _) = make_synthetic(&SyntheticSpec::default()).unwrap();
        let sub = train.balanced_subset(100, 3).unwrap();
        assert_eq!(sub.len(), 100);
        for k in 0..4 {
            assert_eq!(sub.labels.iter().filter(|&&l| l == k).count(), 25);
        }
        assert!(train.balanced_subset(2000, 3).is_err());
    }
}

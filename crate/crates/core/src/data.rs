//! CIFAR binary archives, deterministic subsets, augmentation and batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Cifar10,
    Cifar100,
}

impl DatasetName {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetName::Cifar10 => 10,
            DatasetName::Cifar100 => 100,
        }
    }

    /// Leading label bytes per record (CIFAR-100 stores coarse then fine).
    fn label_bytes(self) -> usize {
        match self {
            DatasetName::Cifar10 => 1,
            DatasetName::Cifar100 => 2,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            DatasetName::Cifar10 => "cifar-10-batches-bin",
            DatasetName::Cifar100 => "cifar-100-binary",
        }
    }

    fn train_files(self) -> Vec<String> {
        match self {
            DatasetName::Cifar10 => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            DatasetName::Cifar100 => vec!["train.bin".into()],
        }
    }

    fn test_file(self) -> &'static str {
        match self {
            DatasetName::Cifar10 => "test_batch.bin",
            DatasetName::Cifar100 => "test.bin",
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Cifar100 => "cifar100",
        })
    }
}

/// Raw 8-bit images in CHW order plus labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn push(&mut self, image: &[u8], label: usize) {
        assert_eq!(image.len(), IMAGE_BYTES, "image byte count");
        self.images.extend_from_slice(image);
        self.labels.push(label);
    }

    /// The first `per_class` samples of each class, in file order.
    pub fn first_per_class(&self, per_class: usize, num_classes: usize) -> Split {
        let mut taken = vec![0usize; num_classes];
        let mut out = Split::default();
        for i in 0..self.len() {
            let y = self.labels[i];
            if taken[y] < per_class {
                taken[y] += 1;
                out.push(self.image(i), y);
            }
        }
        out
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        let mut out = Split::default();
        for &i in idx {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }
}

/// Per-channel normalization constants on the `[0, 1]` pixel scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalizer {
    /// Mean and population std per channel over a split.
    pub fn fit(split: &Split) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::Dataset("cannot fit normalization on an empty split".into()));
        }
        let mut mean = [0f32; 3];
        let mut std = [0f32; 3];
        for c in 0..3 {
            let (mut s, mut s2) = (0f64, 0f64);
            for i in 0..split.len() {
                for &p in &split.image(i)[c * 1024..(c + 1) * 1024] {
                    let v = p as f64 / 255.0;
                    s += v;
                    s2 += v * v;
                }
            }
            let n = (split.len() * 1024) as f64;
            let m = s / n;
            mean[c] = m as f32;
            std[c] = ((s2 / n - m * m).max(0.0).sqrt()).max(1e-3) as f32;
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    fn apply(&self, c: usize, raw: u8) -> f32 {
        (raw as f32 / 255.0 - self.mean[c]) / self.std[c]
    }
}

/// Train-time augmentation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    /// Zero-pad by 4 pixels and take a random 32x32 crop.
    pub random_crop: bool,
    pub horizontal_flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self { random_crop: true, horizontal_flip: true }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self { random_crop: false, horizontal_flip: false }
    }
}

/// Builds a normalized `(len, 3, 32, 32)` batch from `idx`. With an RNG,
/// applies `aug`; the RNG is consumed in a fixed order per sample.
pub fn make_batch(
    split: &Split,
    idx: &[usize],
    norm: &Normalizer,
    aug: Augment,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Tensor, Vec<usize>) {
    const PAD: i64 = 4;
    let mut data = Vec::with_capacity(idx.len() * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let img = split.image(i);
        let (mut dy, mut dx, mut flip) = (0i64, 0i64, false);
        if let Some(r) = rng.as_deref_mut() {
            if aug.random_crop {
                dy = r.random_range(-PAD..=PAD);
                dx = r.random_range(-PAD..=PAD);
            }
            if aug.horizontal_flip {
                flip = r.random_bool(0.5);
            }
        }
        for c in 0..3 {
            for y in 0..32i64 {
                for x in 0..32i64 {
                    let xs = if flip { 31 - x } else { x };
                    let (sy, sx) = (y + dy, xs + dx);
                    let raw = if (0..32).contains(&sy) && (0..32).contains(&sx) {
                        img[c * 1024 + (sy * 32 + sx) as usize]
                    } else {
                        0
                    };
                    data.push(norm.apply(c, raw));
                }
            }
        }
        labels.push(split.labels[i]);
    }
    let t = Tensor::new(vec![idx.len(), 3, 32, 32], data).expect("batch shape");
    (t, labels)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: DatasetName,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.name.num_classes()
    }

    /// Reads the binary archives from `root` or its standard subdirectory.
    pub fn load(name: DatasetName, root: &Path) -> Result<Self> {
        let dir = locate(name, root)?;
        let mut train = Split::default();
        for f in name.train_files() {
            read_records(name, &dir.join(f), &mut train)?;
        }
        let mut test = Split::default();
        read_records(name, &dir.join(name.test_file()), &mut test)?;
        Ok(Self { name, train, test })
    }

    /// Keeps the first `n / classes` training and test images of each class.
    pub fn subset(&self, train_total: usize, test_total: Option<usize>) -> Result<Self> {
        let k = self.num_classes();
        let per = |total: usize| {
            if total < k {
                Err(Error::Dataset(format!("subset of {total} images is smaller than {k} classes")))
            } else {
                Ok(total / k)
            }
        };
        let train = self.train.first_per_class(per(train_total)?, k);
        let test = match test_total {
            Some(t) => self.test.first_per_class(per(t)?, k),
            None => self.test.clone(),
        };
        Ok(Self { name: self.name, train, test })
    }
}

fn locate(name: DatasetName, root: &Path) -> Result<PathBuf> {
    for dir in [root.to_path_buf(), root.join(name.subdir())] {
        if dir.join(name.test_file()).is_file() {
            return Ok(dir);
        }
    }
    Err(Error::Dataset(format!(
        "no {name} binary archive under {} (expected {} there or in {}/)",
        root.display(),
        name.test_file(),
        name.subdir()
    )))
}

fn read_records(name: DatasetName, path: &Path, out: &mut Split) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let lb = name.label_bytes();
    let rec = lb + IMAGE_BYTES;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Dataset(format!("{}: size {} is not a multiple of {rec}", path.display(), bytes.len())));
    }
    for r in bytes.chunks_exact(rec) {
        let label = r[lb - 1] as usize;
        if label >= name.num_classes() {
            return Err(Error::Dataset(format!("{}: label {label} out of range", path.display())));
        }
        out.push(&r[lb..], label);
    }
    Ok(())
}

/// Writes a small class-separable dataset in the CIFAR binary layout.
/// Each class has its own colour tint and stripe orientation plus noise,
/// so it is learnable but not trivially so.
pub fn write_synthetic(
    name: DatasetName,
    dir: &Path,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<()> {
    let k = name.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |label: usize, rng: &mut ChaCha8Rng| {
        let mut rec = vec![0u8; name.label_bytes()];
        *rec.last_mut().expect("label byte") = label as u8;
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let angle = label as f32 * std::f32::consts::PI / k as f32;
        let (s, c) = angle.sin_cos();
        for ch in 0..3 {
            let tint = ((label * 37 + ch * 71) % 97) as f32 / 97.0;
            for y in 0..32 {
                for x in 0..32 {
                    let wave = ((x as f32 * c + y as f32 * s) * 0.6 + phase).sin();
                    let v = 0.35 + 0.3 * tint + 0.2 * wave + rng.random_range(-0.15..0.15);
                    rec.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        rec
    };
    let build = |per_class: usize, rng: &mut ChaCha8Rng| {
        let mut recs = Vec::with_capacity(per_class * k);
        for i in 0..per_class * k {
            recs.push(sample(i % k, rng));
        }
        recs
    };
    let train = build(train_per_class, &mut rng);
    let test = build(test_per_class, &mut rng);
    fs::create_dir_all(dir)?;
    let files = name.train_files();
    let chunk = train.len().div_ceil(files.len()).max(1);
    let mut parts = train.chunks(chunk);
    for f in &files {
        let mut out = fs::File::create(dir.join(f))?;
        for r in parts.next().unwrap_or(&[]) {
            out.write_all(r)?;
        }
    }
    let mut out = fs::File::create(dir.join(name.test_file()))?;
    for r in &test {
        out.write_all(r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split_with(labels: &[usize]) -> Split {
        let mut s = Split::default();
        for (i, &y) in labels.iter().enumerate() {
            s.push(&vec![i as u8; IMAGE_BYTES], y);
        }
        s
    }

    #[test]
    fn first_per_class_keeps_file_order() {
        let s = split_with(&[0, 1, 0, 0, 1, 1, 2]);
        let sub = s.first_per_class(2, 3);
        assert_eq!(sub.labels, vec![0, 1, 0, 1, 2]);
        assert_eq!(sub.image(2)[0], 2);
        assert_eq!(sub.image(3)[0], 4);
    }

    #[test]
    fn synthetic_roundtrip_through_reader() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(DatasetName::Cifar10, dir.path(), 3, 2, 7).unwrap();
        let ds = Dataset::load(DatasetName::Cifar10, dir.path()).unwrap();
        assert_eq!(ds.train.len(), 30);
        assert_eq!(ds.test.len(), 20);
        for y in 0..10 {
            assert_eq!(ds.train.labels.iter().filter(|&&l| l == y).count(), 3);
        }
        let dir100 = tempfile::tempdir().unwrap();
        write_synthetic(DatasetName::Cifar100, dir100.path(), 1, 1, 7).unwrap();
        let ds = Dataset::load(DatasetName::Cifar100, dir100.path()).unwrap();
        assert_eq!(ds.train.len(), 100);
        assert_eq!(ds.train.labels[99], 99);
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("test_batch.bin"), [0u8; 100]).unwrap();
        let err = Dataset::load(DatasetName::Cifar10, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    #[test]
    fn batch_without_rng_is_plain_normalization() {
        let s = split_with(&[3]);
        let norm = Normalizer { mean: [0.0; 3], std: [0.5; 3] };
        let (t, y) = make_batch(&s, &[0], &norm, Augment::default(), None);
        assert_eq!(y, vec![3]);
        assert_eq!(t.shape(), &[1, 3, 32, 32]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flip_mirrors_rows() {
        let mut img = vec![0u8; IMAGE_BYTES];
        img[0] = 255;
        let mut s = Split::default();
        s.push(&img, 0);
        let aug = Augment { random_crop: false, horizontal_flip: true };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [false; 2];
        for _ in 0..32 {
            let (t, _) = make_batch(&s, &[0], &Normalizer::identity(), aug, Some(&mut rng));
            match (t.data()[0], t.data()[31]) {
                (1.0, 0.0) => seen[0] = true,
                (0.0, 1.0) => seen[1] = true,
                other => panic!("unexpected corner values {other:?}"),
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn crop_keeps_most_of_the_image() {
        let mut s = Split::default();
        s.push(&[200u8; IMAGE_BYTES], 0);
        let aug = Augment { random_crop: true, horizontal_flip: false };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, _) = make_batch(&s, &[0], &Normalizer::identity(), aug, Some(&mut rng));
        let nonzero = t.data().iter().filter(|&&v| v != 0.0).count();
        assert!((3 * 24 * 24..=IMAGE_BYTES).contains(&nonzero));
    }

    #[test]
    fn normalizer_fit_matches_direct_formula() {
        let mut s = Split::default();
        let mut img = vec![0u8; IMAGE_BYTES];
        img[..1024].fill(255);
        s.push(&img, 0);
        let n = Normalizer::fit(&s).unwrap();
        assert!((n.mean[0] - 1.0).abs() < 1e-6 && n.mean[1] == 0.0);
        assert!((n.std[1] - 1e-3).abs() < 1e-9);
    }
}

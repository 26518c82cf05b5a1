//! CIFAR-10 binary loader, a seeded synthetic dataset, and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_PER_FILE: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Labeled images, N x C x H x W.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSlice {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Option<Normalization>,
}

impl DataSlice {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        [self.images.shape[1], self.images.shape[2], self.images.shape[3]]
    }

    fn sample_len(&self) -> usize {
        self.images.row_len()
    }

    /// Samples at the given indices, in that order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> DataSlice {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        DataSlice {
            name: format!("{}[..{}]", self.name, idx.len()),
            images,
            labels,
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        }
    }

    pub(crate) fn require_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyData(self.name.clone()))
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Decodes whole 3073-byte CIFAR-10 records, scaled and normalized.
pub fn read_batch_bytes(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::TruncatedRecord(path.to_path_buf()));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::InvalidLabel { index: i, label });
        }
        labels.push(label);
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            images.extend(plane.iter().map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Ok((images, labels))
}

pub fn read_batch_file(path: impl AsRef<Path>) -> Result<(Vec<f32>, Vec<usize>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_batch_bytes(&bytes, path)
}

pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<DataSlice> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let (im, lb) = read_batch_file(&path)?;
        if lb.len() != CIFAR_PER_FILE {
            return Err(Error::TruncatedRecord(path));
        }
        images.extend(im);
        labels.extend(lb);
    }
    let n = labels.len();
    Ok(DataSlice {
        name: format!("cifar10-{}", if split == Split::Train { "train" } else { "test" }),
        images: Tensor::new(vec![n, 3, 32, 32], images),
        labels,
        num_classes: 10,
        normalization: Some(Normalization {
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        }),
    })
}

/// Seeded template-plus-noise images, split 80/20 per class into (train, val).
pub fn synthetic_dataset(
    num_classes: usize,
    n_per_class: usize,
    shape: [usize; 3],
    noise: f32,
    seed: u64,
) -> (DataSlice, DataSlice) {
    assert!((0.0..0.5).contains(&noise), "noise must lie in [0, 0.5)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let templates: Vec<Vec<f32>> = (0..num_classes)
        .map(|_| (0..len).map(|_| rng.random::<f32>()).collect())
        .collect();
    let n_train = n_per_class * 4 / 5;
    let (mut tr_x, mut tr_y, mut va_x, mut va_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n_per_class {
        for (c, t) in templates.iter().enumerate() {
            let sample = t.iter().map(|&v| {
                let e = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
                (v + e).clamp(0.0, 1.0)
            });
            if i < n_train {
                tr_x.extend(sample);
                tr_y.push(c);
            } else {
                va_x.extend(sample);
                va_y.push(c);
            }
        }
    }
    let make = |name: &str, x: Vec<f32>, y: Vec<usize>| DataSlice {
        name: name.into(),
        images: Tensor::new(vec![y.len(), shape[0], shape[1], shape[2]], x),
        labels: y,
        num_classes,
        normalization: None,
    };
    (make("synthetic-train", tr_x, tr_y), make("synthetic-val", va_x, va_y))
}

/// Sample order for one pass: stored order, or a seeded Fisher-Yates shuffle.
pub fn batch_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx
}

/// Iterates (images, labels) batches covering every sample once.
pub fn batches(d: &DataSlice, batch_size: usize, shuffle_seed: Option<u64>) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    Batches {
        data: d,
        order: batch_order(d.len(), shuffle_seed),
        pos: 0,
        batch_size,
        augment: None,
    }
}

pub struct Batches<'a> {
    data: &'a DataSlice,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<ChaCha8Rng>,
}

impl Batches<'_> {
    /// Random horizontal flip and 4-pixel padded crop, drawn from `seed`.
    pub fn with_augmentation(mut self, seed: u64) -> Self {
        self.augment = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let (mut x, y) = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        if let Some(rng) = self.augment.as_mut() {
            let [c, h, w] = self.data.sample_shape();
            for sample in x.data.chunks_mut(self.data.sample_len()) {
                augment_sample(sample, c, h, w, rng);
            }
        }
        Some((x, y))
    }
}

fn augment_sample(x: &mut [f32], c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) {
    const PAD: i64 = 4;
    let flip = rng.random::<bool>();
    let dy = rng.random_range(-PAD..=PAD);
    let dx = rng.random_range(-PAD..=PAD);
    let src = x.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let sy = y as i64 + dy;
                let sx0 = xx as i64 + dx;
                let sx = if flip { w as i64 - 1 - sx0 } else { sx0 };
                let v = if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
                x[(ch * h + y) * w + xx] = v;
            }
        }
    }
}

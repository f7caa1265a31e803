//! Datasets: CIFAR-10 binary ingestion, Gaussian blobs, batching, augmentation.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel statistics subtracted/divided out of the raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Samples stored as `f32` features `[N, ...]`; cast to the compute type per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.ndim() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
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

    /// Shape of one sample, e.g. `[3, 32, 32]` or `[dim]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers a batch, optionally augmenting each image (train split only).
    pub fn batch<T: Element>(
        &self,
        indices: &[usize],
        augment_rng: Option<&mut RngStream>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut x = self.images.gather_rows(indices)?;
        if let Some(rng) = augment_rng {
            if self.split != Split::Train {
                return Err(Error::Data("augmentation is only applied to the train split".into()));
            }
            let dims = match self.sample_shape() {
                [c, h, w] => [*c, *h, *w],
                s => return Err(Error::dim(format!("augmentation needs [C, H, W] samples, got {s:?}"))),
            };
            let len = self.sample_len();
            for img in x.data_mut().chunks_mut(len) {
                let out = augment(img, dims, rng);
                img.copy_from_slice(&out);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x.cast(), labels))
    }

    /// Whole split as one batch, in storage order.
    pub fn all<T: Element>(&self) -> Result<(Tensor<T>, Vec<usize>)> {
        Ok((self.images.cast(), self.labels.clone()))
    }

    /// Per-channel mean and (population) std; channel is axis 1, or the
    /// single feature group for flat samples.
    pub fn channel_stats(&self) -> Normalization {
        let (channels, plane) = self.channel_layout();
        let n = self.len();
        let mut mean = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        for img in self.images.data().chunks(channels * plane) {
            for c in 0..channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    let v = v as f64;
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (n * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt()
            })
            .collect();
        Normalization { mean, std }
    }

    /// Applies `(x − mean) / std` per channel and records the statistics.
    pub fn normalize(&mut self, stats: &Normalization) -> Result<()> {
        let (channels, plane) = self.channel_layout();
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(Error::Data(format!(
                "normalization has {} channels, data has {channels}",
                stats.mean.len()
            )));
        }
        for img in self.images.data_mut().chunks_mut(channels * plane) {
            for c in 0..channels {
                let (m, s) = (stats.mean[c], stats.std[c].max(1e-12));
                for v in &mut img[c * plane..(c + 1) * plane] {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }

    fn channel_layout(&self) -> (usize, usize) {
        match self.sample_shape() {
            [c, rest @ ..] if !rest.is_empty() => (*c, rest.iter().product()),
            s => (1, s.iter().product()),
        }
    }
}

/// One CIFAR-10 record: label byte plus R, G, B planes of 32×32 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != CIFAR_RECORD {
            return Err(Error::Format(format!(
                "CIFAR record must be {CIFAR_RECORD} bytes, got {}",
                bytes.len()
            )));
        }
        let label = bytes[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("CIFAR label byte {label} outside [0, 9]")));
        }
        Ok(CifarRecord {
            label,
            pixels: bytes[1..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CIFAR_RECORD);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Parses one batch file holding exactly `records` records.
pub fn parse_cifar_file(bytes: &[u8], records: usize, name: &str) -> Result<Vec<CifarRecord>> {
    let expected = records * CIFAR_RECORD;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{name}: expected {expected} bytes ({records} records x {CIFAR_RECORD}), found {}",
            bytes.len()
        )));
    }
    bytes.chunks(CIFAR_RECORD).map(CifarRecord::parse).collect()
}

fn records_to_dataset(records: &[CifarRecord], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::with_capacity(records.len() * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        pixels.extend(r.pixels.iter().map(|&b| b as f32 / 255.0));
        labels.push(r.label as usize);
    }
    let images = Tensor::new(
        vec![records.len(), CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE],
        pixels,
    )?;
    Dataset::new(images, labels, CIFAR_CLASSES, split)
}

/// Loads the CIFAR-10 binary release, normalizing both splits with
/// train-split channel statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_sized(dir, CIFAR_RECORDS_PER_FILE)
}

/// As [`load_cifar10`] with a custom record count per file.
pub fn load_cifar10_sized(dir: &Path, records_per_file: usize) -> Result<(Dataset, Dataset)> {
    let mut names: Vec<&str> = CIFAR_TRAIN_FILES.to_vec();
    names.push(CIFAR_TEST_FILE);
    for name in &names {
        if !dir.join(name).is_file() {
            return Err(Error::Data(format!(
                "missing CIFAR-10 file {}",
                dir.join(name).display()
            )));
        }
    }
    let parsed: Vec<Vec<CifarRecord>> = names
        .par_iter()
        .map(|name| {
            let bytes = fs::read(dir.join(name))?;
            parse_cifar_file(&bytes, records_per_file, name)
        })
        .collect::<Result<_>>()?;
    let train_records: Vec<CifarRecord> = parsed[..5].iter().flatten().cloned().collect();
    let mut train = records_to_dataset(&train_records, Split::Train)?;
    let mut test = records_to_dataset(&parsed[5], Split::Test)?;
    let stats = train.channel_stats();
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok((train, test))
}

/// Gaussian clusters: class means `~ N(0, I)`, samples `mean + spread·N(0, I)`.
/// The first 80% of each class goes to train, the rest to test.
pub fn synth_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    rng: &RngStream,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::param(format!("blobs need at least 2 classes, got {classes}")));
    }
    if dim == 0 || per_class < 2 {
        return Err(Error::param("blobs need dim ≥ 1 and at least 2 samples per class"));
    }
    let n_train = (per_class * 4).div_ceil(5).min(per_class - 1);
    let mut mean_rng = rng.fork("means");
    let mut sample_rng = rng.fork("samples");
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mean: Vec<f64> = (0..dim).map(|_| mean_rng.normal()).collect();
        for i in 0..per_class {
            let dst = if i < n_train { &mut train } else { &mut test };
            dst.0
                .extend(mean.iter().map(|&m| (m + spread * sample_rng.normal()) as f32));
            dst.1.push(c);
        }
    }
    let make = |(x, y): (Vec<f32>, Vec<usize>), split| {
        let n = y.len();
        Dataset::new(Tensor::new(vec![n, dim], x)?, y, classes, split)
    };
    Ok((make(train, Split::Train)?, make(test, Split::Test)?))
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub rng: RngStream,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, rng: RngStream, drop_last: bool) -> Self {
        BatchPlan {
            batch_size,
            rng,
            drop_last,
        }
    }
}

/// Index batches for one epoch; the order depends only on `(plan.rng, epoch)`.
pub fn batches(n: usize, plan: &BatchPlan, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 || plan.batch_size > n {
        return Err(Error::param(format!(
            "batch size {} must be in [1, {n}]",
            plan.batch_size
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    plan.rng.fork(&format!("epoch{epoch}")).shuffle(&mut order);
    Ok(order
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(|c| c.to_vec())
        .collect())
}

pub const AUGMENT_PAD: usize = 4;

/// Mirrors each row of a `[C, H, W]` image.
pub fn flip_horizontal(image: &[f32], [c, h, w]: [usize; 3]) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = image[row * w + (w - 1 - x)];
        }
    }
    out
}

/// `H × W` window at offset `(dy, dx)` of the image zero-padded by `pad`.
pub fn crop_padded(image: &[f32], [c, h, w]: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Random horizontal flip (p = 0.5), then a random crop from 4-pixel padding.
pub fn augment(image: &[f32], dims: [usize; 3], rng: &mut RngStream) -> Vec<f32> {
    let img = if rng.bernoulli(0.5) {
        flip_horizontal(image, dims)
    } else {
        image.to_vec()
    };
    let dy = rng.below(2 * AUGMENT_PAD + 1);
    let dx = rng.below(2 * AUGMENT_PAD + 1);
    crop_padded(&img, dims, AUGMENT_PAD, dy, dx)
}

//! Dataset ingestion and long-tail derivation.
//!
//! CIFAR binary parsing, a synthetic Gaussian-blob generator for desk-scale
//! runs, exponential-decay long-tail subsampling, class-balanced sampling
//! and head/medium/tail class partitioning.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

/// Labeled image collection; pixels in [0, 1], labels in [0, K).
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} images",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label: bad, num_classes });
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copy of one image as a (1,C,H,W) tensor.
    pub fn image(&self, i: usize) -> Tensor<T> {
        let (_, c, h, w) = self.images.dims4().expect("images are (N,C,H,W)");
        let stride = c * h * w;
        let data = self.images.data()[i * stride..(i + 1) * stride].to_vec();
        Tensor::from_vec(vec![1, c, h, w], data)
    }

    /// Gather a batch of images and labels by index.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let (_, c, h, w) = self.images.dims4().expect("images are (N,C,H,W)");
        let stride = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * stride);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (Tensor::from_vec(vec![idx.len(), c, h, w], data), labels)
    }

    /// Subset by (original) sample indices.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let (images, labels) = self.batch(idx);
        Self { images, labels, num_classes: self.num_classes }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    pub ratio: f64,
}

/// Long-tailed dataset with head-to-tail class ordering and the derivation
/// provenance needed to reproduce it.
#[derive(Clone, Debug)]
pub struct LtDataset<T> {
    pub data: Dataset<T>,
    pub imbalance_ratio: f64,
    /// Class ids sorted head (most frequent) to tail.
    pub class_order: Vec<usize>,
    pub provenance: Provenance,
    /// Indices into the source dataset that were retained.
    pub retained_indices: Vec<usize>,
}

impl<T: Scalar> LtDataset<T> {
    /// Per-class counts in head-to-tail order.
    pub fn ordered_counts(&self) -> Vec<usize> {
        let counts = self.data.class_counts();
        self.class_order.iter().map(|&c| counts[c]).collect()
    }

    pub fn manifest(&self) -> LtManifest {
        LtManifest {
            source: self.provenance.source.clone(),
            ratio: self.provenance.ratio,
            seed: self.provenance.seed,
            num_classes: self.data.num_classes,
            class_order: self.class_order.clone(),
            class_counts: self.data.class_counts(),
            retained_indices: self.retained_indices.clone(),
        }
    }
}

/// Reproducibility manifest exported next to derived datasets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LtManifest {
    pub source: String,
    pub ratio: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub class_order: Vec<usize>,
    /// Retained per-class counts indexed by class id.
    pub class_counts: Vec<usize>,
    pub retained_indices: Vec<usize>,
}

/// Head/medium/tail split along the head-to-tail class order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub head: Vec<usize>,
    pub medium: Vec<usize>,
    pub tail: Vec<usize>,
}

impl ClassPartition {
    pub fn group_of(&self, class: usize) -> &'static str {
        if self.head.contains(&class) {
            "head"
        } else if self.medium.contains(&class) {
            "medium"
        } else {
            "tail"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn num_classes(&self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn record_len(&self) -> usize {
        match self {
            CifarVariant::Cifar10 => 3073,  // label + 3*1024
            CifarVariant::Cifar100 => 3074, // coarse + fine + 3*1024
        }
    }

    fn train_files(&self) -> Vec<&'static str> {
        match self {
            CifarVariant::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => vec!["train.bin"],
        }
    }

    fn test_files(&self) -> Vec<&'static str> {
        match self {
            CifarVariant::Cifar10 => vec!["test_batch.bin"],
            CifarVariant::Cifar100 => vec!["test.bin"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn parse_cifar_bytes<T: Scalar>(
    bytes: &[u8],
    variant: CifarVariant,
    base_offset: u64,
    images: &mut Vec<T>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::CorruptData { offset: base_offset, reason: "empty file".into() });
    }
    if bytes.len() % rec != 0 {
        let offset = base_offset + (bytes.len() / rec * rec) as u64;
        return Err(Error::CorruptData {
            offset,
            reason: format!("truncated record: {} trailing bytes (record size {rec})", bytes.len() % rec),
        });
    }
    let k = variant.num_classes();
    let inv = s::<T>(1.0 / 255.0);
    for (r, chunk) in bytes.chunks_exact(rec).enumerate() {
        let (label, pixels) = match variant {
            CifarVariant::Cifar10 => (chunk[0] as usize, &chunk[1..]),
            // coarse label first, fine label second; fine is used
            CifarVariant::Cifar100 => (chunk[1] as usize, &chunk[2..]),
        };
        if label >= k {
            let label_pos = if variant == CifarVariant::Cifar100 { 1 } else { 0 };
            return Err(Error::CorruptData {
                offset: base_offset + (r * rec + label_pos) as u64,
                reason: format!("label {label} out of range for {k} classes"),
            });
        }
        labels.push(label);
        images.extend(pixels.iter().map(|&b| T::from_u8(b).unwrap() * inv));
    }
    Ok(())
}

/// Load the canonical CIFAR binary layout. `path` may be the dataset
/// directory (canonical file names) or a single `.bin` file.
pub fn load_cifar_split<T: Scalar>(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset<T>> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        let names = match split {
            Split::Train => variant.train_files(),
            Split::Test => variant.test_files(),
        };
        names.iter().map(|n| path.join(n)).collect()
    } else {
        vec![path.to_path_buf()]
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let mut bytes = Vec::new();
        std::fs::File::open(f)?.read_to_end(&mut bytes)?;
        parse_cifar_bytes(&bytes, variant, 0, &mut images, &mut labels)?;
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], images)?;
    Dataset::new(images, labels, variant.num_classes())
}

/// Training split of a CIFAR dataset in the canonical binary layout.
pub fn load_cifar_binary<T: Scalar>(path: &Path, variant: CifarVariant) -> Result<Dataset<T>> {
    load_cifar_split(path, variant, Split::Train)
}

/// Pure count derivation behind [`derive_lt`]: classes ordered by
/// descending source count (ties by ascending class id), then position `c`
/// keeps `floor(n_max * ratio^(-c/(K-1)))` samples, capped at availability.
pub fn lt_counts(source_counts: &[usize], ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if ratio < 1.0 || !ratio.is_finite() {
        return Err(Error::InvalidRatio(ratio));
    }
    let k = source_counts.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| source_counts[b].cmp(&source_counts[a]).then(a.cmp(&b)));
    let n_max = source_counts[order[0]];
    let kept = order
        .iter()
        .enumerate()
        .map(|(pos, &class)| {
            let target = if k == 1 {
                n_max
            } else {
                let expo = -(pos as f64) / (k as f64 - 1.0);
                (n_max as f64 * ratio.powf(expo)).floor() as usize
            };
            target.min(source_counts[class])
        })
        .collect();
    Ok((order, kept))
}

/// Derive a long-tailed subset with exponentially decaying class sizes.
/// Which samples survive within each class is a seeded random choice.
pub fn derive_lt<T: Scalar>(d: &Dataset<T>, ratio: f64, seed: u64) -> Result<LtDataset<T>> {
    let counts = d.class_counts();
    let (order, kept) = lt_counts(&counts, ratio)?;

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes];
    for (i, &l) in d.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut retained = Vec::new();
    for (pos, &class) in order.iter().enumerate() {
        let mut idx = per_class[class].clone();
        idx.shuffle(&mut rng);
        idx.truncate(kept[pos]);
        idx.sort_unstable();
        retained.extend(idx);
    }
    let data = d.subset(&retained);
    Ok(LtDataset {
        data,
        imbalance_ratio: ratio,
        class_order: order,
        provenance: Provenance { source: "derived".into(), seed, ratio },
        retained_indices: retained,
    })
}

/// Class-balanced index sequence: each draw picks a (nonempty) class
/// uniformly, then a sample uniformly within it, with replacement.
pub fn class_balanced_indices<T: Scalar>(lt: &LtDataset<T>, epoch_len: usize, seed: u64) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); lt.data.num_classes];
    for (i, &l) in lt.data.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let nonempty: Vec<usize> = (0..per_class.len()).filter(|&c| !per_class[c].is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..epoch_len)
        .map(|_| {
            let class = nonempty[rng.gen_range(0..nonempty.len())];
            let members = &per_class[class];
            members[rng.gen_range(0..members.len())]
        })
        .collect()
}

/// Contiguous frequency-rank tertiles along the head-to-tail order:
/// first ceil(K/3) classes are head, next ceil(K/3) medium, rest tail.
/// The ceiling rule alone leaves the tail empty at K = 4; the last medium
/// class moves to the tail so all three groups are nonempty for K >= 3.
pub fn partition_classes(class_counts: &[usize], order: &[usize]) -> ClassPartition {
    let k = class_counts.len();
    debug_assert_eq!(order.len(), k);
    let third = k.div_ceil(3);
    let head = order[..third.min(k)].to_vec();
    let mut medium = order[third.min(k)..(2 * third).min(k)].to_vec();
    let mut tail = order[(2 * third).min(k)..].to_vec();
    if k >= 3 && tail.is_empty() {
        tail.push(medium.pop().expect("medium nonempty when k >= 3"));
    }
    ClassPartition { head, medium, tail }
}

/// Synthetic blob dataset: each class is a smooth random pattern added to a
/// mid-gray background at `separation` noise-sigmas of amplitude, plus
/// per-pixel Gaussian noise. Deterministic under `seed`.
pub fn synth_generate<T: Scalar>(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    separation: f64,
    seed: u64,
) -> Dataset<T> {
    const CHANNELS: usize = 3;
    const NOISE_SIGMA: f64 = 0.08;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = image_size * image_size;

    // class patterns: smoothed white noise, normalized to max-abs 1
    let mut patterns = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut p: Vec<f64> = (0..CHANNELS * hw)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        for _ in 0..2 {
            p = blur3(&p, CHANNELS, image_size);
        }
        let m = p.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-12);
        p.iter_mut().for_each(|v| *v /= m);
        patterns.push(p);
    }

    let amp = separation * NOISE_SIGMA;
    let n = num_classes * per_class;
    let mut images = Vec::with_capacity(n * CHANNELS * hw);
    let mut labels = Vec::with_capacity(n);
    for (class, pattern) in patterns.iter().enumerate() {
        for _ in 0..per_class {
            for &pv in pattern.iter() {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                let noise = NOISE_SIGMA * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                let v = (0.5 + amp * pv + noise).clamp(0.0, 1.0);
                images.push(s::<T>(v));
            }
            labels.push(class);
        }
    }
    let images = Tensor::from_vec(vec![n, CHANNELS, image_size, image_size], images);
    Dataset { images, labels, num_classes }
}

fn blur3(x: &[f64], channels: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let at = |c: usize, h: isize, w: isize| -> f64 {
        let h = h.clamp(0, size as isize - 1) as usize;
        let w = w.clamp(0, size as isize - 1) as usize;
        x[(c * size + h) * size + w]
    };
    for c in 0..channels {
        for h in 0..size {
            for w in 0..size {
                let mut acc = 0.0;
                for (dh, wh) in [(-1isize, 1.0f64), (0, 2.0), (1, 1.0)] {
                    for (dw, ww) in [(-1isize, 1.0f64), (0, 2.0), (1, 1.0)] {
                        acc += wh * ww * at(c, h as isize + dh, w as isize + dw);
                    }
                }
                out[(c * size + h) * size + w] = acc / 16.0;
            }
        }
    }
    out
}

/// Split a dataset per class into consecutive chunks of the given sizes,
/// e.g. `[train_n, test_n]`. Requires every class to hold at least
/// `sum(parts)` samples.
pub fn split_per_class<T: Scalar>(d: &Dataset<T>, parts: &[usize]) -> Result<Vec<Dataset<T>>> {
    let need: usize = parts.iter().sum();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes];
    for (i, &l) in d.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for (c, members) in per_class.iter().enumerate() {
        if members.len() < need {
            return Err(Error::InvalidShape(format!(
                "class {c} has {} samples, split needs {need}",
                members.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(parts.len());
    let mut offset = 0;
    for &take in parts {
        let mut idx = Vec::new();
        for members in &per_class {
            idx.extend_from_slice(&members[offset..offset + take]);
        }
        out.push(d.subset(&idx));
        offset += take;
    }
    Ok(out)
}

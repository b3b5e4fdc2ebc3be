//! CIFAR binary ingestion, normalisation and the pad-crop-flip augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const PAD: usize = 4;
/// Crop offsets range over `0..=MAX_OFFSET` on each axis.
pub const MAX_OFFSET: usize = 2 * PAD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Cifar10,
    Cifar100,
}

impl Variant {
    pub fn classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    /// Bytes per record: labels then channel-planar R, G, B.
    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    fn label_bytes(self) -> usize {
        match self {
            Variant::Cifar10 => 1,
            Variant::Cifar100 => 2,
        }
    }

    pub fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (Variant::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (Variant::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (Variant::Cifar100, Split::Train) => vec!["train.bin"],
            (Variant::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }

    /// Image count of the published split.
    pub fn standard_len(self, split: Split) -> usize {
        match split {
            Split::Train => 50_000,
            Split::Test => 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// 8-bit images, `N × 3 × 32 × 32`, with one label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub variant: Variant,
    pub split: Split,
    images: Vec<u8>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn from_parts(variant: Variant, split: Split, images: Vec<u8>, labels: Vec<u16>) -> Result<Self> {
        if images.len() != labels.len() * PIXELS {
            return Err(Error::config(format!(
                "{} image bytes for {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= variant.classes()) {
            return Err(Error::config(format!("label {l} out of range for {variant:?}")));
        }
        Ok(Dataset {
            variant,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn is_standard_size(&self) -> bool {
        self.len() == self.variant.standard_len(self.split)
    }

    /// The first `n` records.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            variant: self.variant,
            split: self.split,
            images: self.images[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Serialises in the published binary layout (coarse label 0 for CIFAR-100).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.variant.record_len());
        for i in 0..self.len() {
            if self.variant == Variant::Cifar100 {
                out.push(0);
            }
            out.push(self.labels[i] as u8);
            out.extend_from_slice(self.image(i));
        }
        out
    }
}

/// Parses whole records from `bytes`; `path` is only used for errors.
pub fn parse_records(bytes: &[u8], variant: Variant, path: &Path) -> Result<(Vec<u8>, Vec<u16>)> {
    let rec = variant.record_len();
    let fmt_err = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.is_empty() {
        return Err(fmt_err(0, "empty file".into()));
    }
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec * rec;
        return Err(fmt_err(
            whole,
            format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - whole
            ),
        ));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label_at = variant.label_bytes() - 1;
        let label = r[label_at] as usize;
        if label >= variant.classes() {
            return Err(fmt_err(
                i * rec + label_at,
                format!("label {label} out of range for {} classes", variant.classes()),
            ));
        }
        labels.push(label as u16);
        images.extend_from_slice(&r[variant.label_bytes()..]);
    }
    Ok((images, labels))
}

/// Reads the standard binary batch files of one split from `dir`.
///
/// Any whole number of records is accepted so that subsets and fixtures
/// load; [`Dataset::is_standard_size`] tells whether the split is complete.
pub fn load_cifar(dir: &Path, variant: Variant, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in variant.files(split) {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (i, l) = parse_records(&bytes, variant, &path)?;
        images.extend(i);
        labels.extend(l);
    }
    Dataset::from_parts(variant, split, images, labels)
}

/// Writes `data` as the standard file set of its split (CIFAR-10 train
/// records are spread over the five batch files).
pub fn write_cifar(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = data.variant.files(data.split);
    let per = data.len().div_ceil(files.len());
    let bytes = data.to_bytes();
    let rec = data.variant.record_len();
    for (k, name) in files.iter().enumerate() {
        let lo = (k * per).min(data.len());
        let hi = ((k + 1) * per).min(data.len());
        let path = dir.join(name);
        fs::write(&path, &bytes[lo * rec..hi * rec]).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Serialize, Deserialize)]
struct NormCache {
    images: usize,
    stats: NormStats,
}

impl NormStats {
    pub fn compute(data: &Dataset) -> NormStats {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let plane = SIDE * SIDE;
        for i in 0..data.len() {
            for (c, ch) in data.image(i).chunks_exact(plane).enumerate() {
                for &p in ch {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (data.len() * plane).max(1) as f64;
        let mut stats = NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        for c in 0..3 {
            let m = sum[c] / n;
            stats.mean[c] = m as f32;
            stats.std[c] = ((sq[c] / n - m * m).max(0.0).sqrt().max(1e-3)) as f32;
        }
        stats
    }

    pub fn cache_path(dir: &Path, variant: Variant) -> PathBuf {
        dir.join(format!(
            "ge-norm-{}.json",
            serde_json::to_string(&variant).unwrap().trim_matches('"')
        ))
    }

    /// Statistics of `train`, read from the cache next to the data when it
    /// was computed from the same number of images, else computed and
    /// cached. A read-only data directory just skips the cache write.
    pub fn for_train(dir: &Path, train: &Dataset) -> NormStats {
        let path = Self::cache_path(dir, train.variant);
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(c) = serde_json::from_str::<NormCache>(&text) {
                if c.images == train.len() {
                    return c.stats;
                }
            }
        }
        let stats = Self::compute(train);
        let cache = NormCache {
            images: train.len(),
            stats,
        };
        let _ = fs::write(&path, serde_json::to_string_pretty(&cache).unwrap());
        stats
    }
}

/// One augmentation draw: crop offset into the padded 40×40 image and flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    /// Offsets uniform over `{0..=8}²`, flip with probability 0.5.
    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentDraw {
            dy: rng.random_range(0..=MAX_OFFSET),
            dx: rng.random_range(0..=MAX_OFFSET),
            flip: rng.random_bool(0.5),
        }
    }

    /// Offset (4, 4) without flip reproduces the original image.
    pub const CENTRE: AugmentDraw = AugmentDraw {
        dy: PAD,
        dx: PAD,
        flip: false,
    };
}

/// Zero-pads by four on each side, crops 32×32 at the drawn offset,
/// optionally mirrors columns, then normalises into `out`.
pub fn augment_into(img: &[u8], draw: AugmentDraw, stats: &NormStats, out: &mut [f32]) {
    debug_assert_eq!(out.len(), PIXELS);
    for c in 0..3 {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for y in 0..SIDE {
            let sy = (y + draw.dy) as isize - PAD as isize;
            for x in 0..SIDE {
                let cx = if draw.flip { SIDE - 1 - x } else { x };
                let sx = (cx + draw.dx) as isize - PAD as isize;
                let raw = if (0..SIDE as isize).contains(&sy) && (0..SIDE as isize).contains(&sx) {
                    img[c * SIDE * SIDE + sy as usize * SIDE + sx as usize]
                } else {
                    0
                };
                out[c * SIDE * SIDE + y * SIDE + x] = (raw as f32 / 255.0 - m) / s;
            }
        }
    }
}

/// Evaluation path: normalisation only.
pub fn normalize_into(img: &[u8], stats: &NormStats, out: &mut [f32]) {
    augment_into(img, AugmentDraw::CENTRE, stats, out)
}

/// Stacks the given records into an `(N, 3, 32, 32)` batch, augmenting when
/// `draws` is given.
pub fn batch(
    data: &Dataset,
    indices: &[usize],
    stats: &NormStats,
    draws: Option<&[AugmentDraw]>,
) -> (Tensor<f32>, Vec<usize>) {
    let mut buf = vec![0f32; indices.len() * PIXELS];
    for (k, (&i, out)) in indices.iter().zip(buf.chunks_exact_mut(PIXELS)).enumerate() {
        let draw = draws.map_or(AugmentDraw::CENTRE, |d| d[k]);
        augment_into(data.image(i), draw, stats, out);
    }
    let labels = indices.iter().map(|&i| data.label(i)).collect();
    (
        Tensor::from_vec(Shape::new(indices.len(), 3, SIDE, SIDE), buf).expect("sized above"),
        labels,
    )
}

/// Learnable stand-in for CIFAR: each class is a smooth random colour
/// pattern, images are a randomly shifted, noisy copy of their class pattern.
/// Patterns are mirror-symmetric so that, as with natural images, a
/// horizontal flip keeps an image within its class.
pub fn synthetic(variant: Variant, split: Split, n: usize, seed: u64) -> Dataset {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    // Class patterns do not depend on the split, so train and test agree.
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = variant.classes();
    let grid = 4;
    let protos: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            (0..3 * grid * grid)
                .map(|_| proto_rng.random_range(-70.0..70.0))
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ if split == Split::Train { 0x7a } else { 0x7e });
    let noise = Normal::new(0.0f32, 20.0).expect("finite");
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let (sy, sx) = (rng.random_range(0..8usize), rng.random_range(0..8usize));
        let p = &protos[label];
        for c in 0..3 {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let gy = ((y + sy) * grid / (SIDE + 8)).min(grid - 1);
                    let gx = ((x + sx) * grid / (SIDE + 8)).min(grid - 1);
                    let gx = gx.min(grid - 1 - gx);
                    let v = 128.0 + p[c * grid * grid + gy * grid + gx] + noise.sample(&mut rng);
                    images.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(label as u16);
    }
    Dataset::from_parts(variant, split, images, labels).expect("consistent by construction")
}

//! Evaluation datasets: the native `AIQD` container, MNIST-style IDX files
//! and a deterministic synthetic generator.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::Normalization;
use crate::tensor::Tensor;

pub const AIQD_MAGIC: &[u8; 4] = b"AIQD";
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: Option<usize>) -> Result<Self> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(Error::MalformedFile(format!(
                "{} labels for image tensor {:?}",
                labels.len(),
                images.shape()
            )));
        }
        let max = labels.iter().copied().max().map_or(0, |m| m + 1);
        let num_classes = num_classes.unwrap_or(max);
        if let Some(&label) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.images.numel() / self.len().max(1)
    }

    /// Stacks the given samples into a batch shaped `[k, ..sample_shape]`.
    pub fn batch(&self, indices: &[usize], sample_shape: &[usize]) -> Result<Tensor> {
        let per = self.sample_len();
        let want: usize = sample_shape.iter().product();
        if want != per {
            return Err(Error::shape("dataset sample", sample_shape, &self.images.shape()[1..]));
        }
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(sample_shape);
        Tensor::new(shape, data)
    }

    /// A seeded subset of `size` distinct indices in ascending order; the full
    /// index range when `size >= len`.
    pub fn subset(&self, size: usize, seed: u64) -> Vec<usize> {
        if size >= self.len() {
            return (0..self.len()).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), size).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn normalize(&mut self, norm: &Normalization) -> Result<()> {
        let c = *self.images.shape().get(1).unwrap_or(&1);
        if norm.mean.len() != c || norm.std.len() != c || norm.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "normalization needs {c} channel means and positive stds"
            )));
        }
        let plane = self.sample_len() / c;
        for (i, chunk) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = (*v - norm.mean[ch]) / norm.std[ch];
            }
        }
        Ok(())
    }

    pub fn to_aiqd_bytes(&self) -> Vec<u8> {
        let shape = self.images.shape();
        let dims: Vec<u32> = match shape.len() {
            4 => shape.iter().map(|d| *d as u32).collect(),
            _ => vec![self.len() as u32, self.sample_len() as u32, 1, 1],
        };
        let mut out = Vec::with_capacity(20 + self.images.numel() * 4 + self.len() * 2);
        out.extend_from_slice(AIQD_MAGIC);
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&(*l as u16).to_le_bytes());
        }
        out
    }

    pub fn save_aiqd(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_aiqd_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Idx,
    Aiqd,
}

impl FromStr for DatasetFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "idx" => Ok(DatasetFormat::Idx),
            "aiqd" => Ok(DatasetFormat::Aiqd),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub normalization: Option<Normalization>,
    pub num_classes: Option<usize>,
    /// IDX label file; derived from the image file name when absent.
    pub labels_path: Option<PathBuf>,
}

pub fn load_dataset(path: &Path, format: DatasetFormat, opts: &LoadOptions) -> Result<Dataset> {
    let mut data = match format {
        DatasetFormat::Aiqd => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_aiqd(&bytes, opts.num_classes)?
        }
        DatasetFormat::Idx => {
            let labels_path = match &opts.labels_path {
                Some(p) => p.clone(),
                None => idx_labels_path(path)?,
            };
            let images = fs::read(path).map_err(|e| Error::io(path, e))?;
            let labels = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
            parse_idx(&images, &labels, opts.num_classes)?
        }
    };
    if let Some(norm) = &opts.normalization {
        data.normalize(norm)?;
    }
    Ok(data)
}

fn idx_labels_path(images: &Path) -> Result<PathBuf> {
    let name = images
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::MalformedFile("idx path has no file name".into()))?;
    if !name.contains("images-idx3") {
        return Err(Error::ConfigInvalid(format!(
            "cannot derive a label file from `{name}`; pass it explicitly"
        )));
    }
    Ok(images.with_file_name(name.replace("images-idx3", "labels-idx1")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::MalformedFile(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn parse_aiqd(bytes: &[u8], num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != AIQD_MAGIC {
        return Err(Error::MalformedFile("bad AIQD magic".into()));
    }
    let dims = [r.u32_le()?, r.u32_le()?, r.u32_le()?, r.u32_le()?].map(|d| d as usize);
    let count = dims
        .iter()
        .try_fold(1usize, |a, d| a.checked_mul(*d))
        .ok_or_else(|| Error::MalformedFile("AIQD dimensions overflow".into()))?;
    let payload = r.take(count.checked_mul(4).ok_or_else(|| Error::MalformedFile("AIQD too large".into()))?)?;
    let images: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if images.iter().any(|v| !v.is_finite()) {
        return Err(Error::MalformedFile("non-finite pixel value".into()));
    }
    let labels = r
        .take(dims[0] * 2)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::MalformedFile("trailing bytes after AIQD labels".into()));
    }
    Dataset::new(Tensor::new(dims.to_vec(), images)?, labels, num_classes)
}

/// Parses an IDX image file (`0x00000803`, u8 pixels) and label file
/// (`0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = Reader { bytes: images, pos: 0 };
    if r.u32_be()? != IDX_IMAGES {
        return Err(Error::MalformedFile("bad IDX image magic".into()));
    }
    let (n, h, w) = (r.u32_be()? as usize, r.u32_be()? as usize, r.u32_be()? as usize);
    let pixels = r.take(n * h * w)?;
    let data = pixels.iter().map(|p| *p as f32 / 255.0).collect();

    let mut r = Reader { bytes: labels, pos: 0 };
    if r.u32_be()? != IDX_LABELS {
        return Err(Error::MalformedFile("bad IDX label magic".into()));
    }
    let ln = r.u32_be()? as usize;
    if ln != n {
        return Err(Error::MalformedFile(format!("{n} images but {ln} labels")));
    }
    let labels = r.take(n)?.iter().map(|l| *l as usize).collect();
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, num_classes)
}

/// Class-conditional Gaussian-blob images.
///
/// Each class owns a fixed set of coloured blobs drawn from `prototype_seed`;
/// samples jitter those blobs, add unlabelled distractor blobs and pixel
/// noise. Different `seed`s give independent samples of the same classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub prototype_seed: u64,
    pub blobs_per_class: usize,
    pub distractors: usize,
    pub jitter: f64,
    pub amplitude_noise: f64,
    pub pixel_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 512,
            classes: 10,
            channels: 3,
            height: 16,
            width: 16,
            seed: 7,
            prototype_seed: 0x0A10_5EED,
            blobs_per_class: 3,
            distractors: 2,
            jitter: 1.5,
            amplitude_noise: 0.3,
            pixel_noise: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: Vec<f64>,
}

fn random_blob(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Blob {
    Blob {
        cy: rng.gen_range(1.0..cfg.height as f64 - 1.0),
        cx: rng.gen_range(1.0..cfg.width as f64 - 1.0),
        sigma: rng.gen_range(1.2..3.0),
        color: (0..cfg.channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn render(img: &mut [f32], cfg: &SyntheticConfig, blob: &Blob, amp: f64) {
    let plane = cfg.height * cfg.width;
    let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let d2 = (y as f64 - blob.cy).powi(2) + (x as f64 - blob.cx).powi(2);
            let g = amp * (-d2 * inv).exp();
            for (c, col) in blob.color.iter().enumerate() {
                img[c * plane + y * cfg.width + x] += (g * col) as f32;
            }
        }
    }
}

pub fn synthetic_blobs(cfg: &SyntheticConfig) -> Dataset {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(cfg.prototype_seed);
    let prototypes: Vec<Vec<Blob>> = (0..cfg.classes)
        .map(|_| (0..cfg.blobs_per_class).map(|_| random_blob(&mut proto_rng, cfg)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let per = cfg.channels * cfg.height * cfg.width;
    let mut images = vec![0.0f32; cfg.n * per];
    let mut labels = Vec::with_capacity(cfg.n);
    for img in images.chunks_mut(per) {
        let label = rng.gen_range(0..cfg.classes);
        labels.push(label);
        for blob in &prototypes[label] {
            let jittered = Blob {
                cy: blob.cy + cfg.jitter * unit.sample(&mut rng),
                cx: blob.cx + cfg.jitter * unit.sample(&mut rng),
                ..blob.clone()
            };
            let amp = 1.0 + cfg.amplitude_noise * unit.sample(&mut rng);
            render(img, cfg, &jittered, amp);
        }
        for _ in 0..cfg.distractors {
            let blob = random_blob(&mut rng, cfg);
            render(img, cfg, &blob, 1.0);
        }
        for v in img.iter_mut() {
            *v += (cfg.pixel_noise * unit.sample(&mut rng)) as f32;
        }
    }
    let images = Tensor::new(vec![cfg.n, cfg.channels, cfg.height, cfg.width], images).expect("sized buffer");
    Dataset::new(images, labels, Some(cfg.classes)).expect("labels drawn below class count")
}

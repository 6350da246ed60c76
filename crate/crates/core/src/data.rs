//! Labelled image datasets: IDX ingestion and synthetic Gaussian blobs.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Images `N x C x H x W` with one class label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Format(format!(
                "images must be N x C x H x W, got {:?}",
                images.shape()
            )));
        }
        if images.outer() != labels.len() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                images.outer(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Shape of one image, `C x H x W`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Widens the label range, e.g. when a subset misses the top classes.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if self.labels.iter().any(|&l| l >= classes) {
            return Err(Error::Config(format!("dataset has labels outside 0..{classes}")));
        }
        self.classes = classes;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index(format!("sample {bad} of {}", self.len())));
        }
        Ok(Self {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx).expect("indices in range")
    }

    /// Gathers `indices` and reshapes each image to `sample_shape`, which
    /// must hold the same number of elements (e.g. `[784]` for an MLP).
    pub fn batch(&self, indices: &[usize], sample_shape: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per: usize = sample_shape.iter().product();
        if per != self.images.inner_len() {
            return Err(Error::dim(format!(
                "images of shape {:?} cannot feed inputs shaped {sample_shape:?}",
                self.sample_shape()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index(format!("sample {bad} of {}", self.len())));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(sample_shape);
        let x = self.images.gather(indices).reshape(shape)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Every sample, reshaped to `sample_shape`.
    pub fn all(&self, sample_shape: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, sample_shape)
    }

    /// Mean and population standard deviation over every pixel.
    pub fn mean_std(&self) -> (T, T) {
        let data = self.images.data();
        if data.is_empty() {
            return (T::zero(), T::one());
        }
        let n = data.len() as f64;
        let mean = data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = data.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        (T::lit(mean), T::lit(var.sqrt()))
    }

    /// Maps every pixel to `(x - mean) / std`.
    pub fn normalize(&mut self, mean: T, std: T) -> Result<()> {
        if !(std > T::zero()) {
            return Err(Error::Config(format!("normalization std must be positive, got {std}")));
        }
        for v in self.images.data_mut() {
            *v = (*v - mean) / std;
        }
        Ok(())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX byte buffer, returning its dimensions and payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format(format!("{what} file truncated in header")))
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{what} file has magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|d| word(4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "{what} file truncated: {} of {expected} data bytes",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{what} file has {} trailing bytes",
            payload.len() - expected
        )));
    }
    Ok((dims, payload))
}

/// Decodes IDX image and label buffers (already decompressed).
pub fn parse_idx_pair<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    let (idims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC, "images")?;
    let (ldims, label_bytes) = parse_idx(labels, IDX_LABELS_MAGIC, "labels")?;
    if idims[0] != ldims[0] {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    let scale = T::one() / T::lit(255.0);
    let data = pixels.iter().map(|&p| T::from_u8(p).expect("byte") * scale).collect();
    let images = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, classes)
}

/// Loads an IDX image/label file pair; gzip input is detected by its magic bytes.
pub fn load_idx<T: Scalar>(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset<T>> {
    let images = read_maybe_gz(images.as_ref())?;
    let labels = read_maybe_gz(labels.as_ref())?;
    parse_idx_pair(&images, &labels)
}

/// Encodes images (`N x 1 x H x W`, values in `[0, 1]`) and labels as IDX buffers.
pub fn encode_idx<T: Scalar>(ds: &Dataset<T>) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = ds.sample_shape();
    if s[0] != 1 {
        return Err(Error::Capability("IDX images are single-channel".into()));
    }
    let mut images = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, s[1] as u32, s[2] as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// Shape options for [`synth_dataset_with`].
#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    /// Feature dimension; `0` picks `max(classes, 2)`.
    pub dim: usize,
    /// Per-coordinate noise standard deviation around each class centre.
    pub spread: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { dim: 0, spread: 0.5 }
    }
}

/// Gaussian class blobs shaped `n x 1 x 1 x dim`, see [`synth_dataset_with`].
pub fn synth_dataset<T: Scalar>(seed: u64, n: usize, classes: usize) -> Result<Dataset<T>> {
    synth_dataset_with(seed, n, classes, SynthOptions::default())
}

/// Gaussian blobs: class `c` is centred at `4 e_c` when `classes <= dim`
/// (random centres otherwise). Every class gets `n / classes` samples, give
/// or take one, in shuffled order.
pub fn synth_dataset_with<T: Scalar>(seed: u64, n: usize, classes: usize, opts: SynthOptions) -> Result<Dataset<T>> {
    if classes == 0 || n < classes {
        return Err(Error::Config(format!("need n >= classes >= 1, got n={n}, classes={classes}")));
    }
    if !(opts.spread >= 0.0) {
        return Err(Error::Config("spread must be non-negative".into()));
    }
    let dim = if opts.dim == 0 { classes.max(2) } else { opts.dim };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dim {
                (0..dim).map(|d| if d == c { 4.0 } else { 0.0 }).collect()
            } else {
                (0..dim).map(|_| 4.0 * std_normal.sample(&mut rng)).collect()
            }
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * dim);
    for &l in &labels {
        for &c in &centres[l] {
            data.push(T::lit(c + opts.spread * std_normal.sample(&mut rng)));
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 1, dim], data)?, labels, classes)
}

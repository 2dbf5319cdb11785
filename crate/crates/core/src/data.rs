//! Datasets: synthetic 2-D generators, IDX (MNIST) ingestion and seeded
//! minibatch plans.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled inputs in `[0, 1]^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    /// Validates the range and label invariants.
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = inputs.as_matrix_dims()?;
        if n != labels.len() {
            return Err(Error::Dimension(format!(
                "{n} inputs but {} labels",
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Domain("a dataset needs at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("input value {v} outside [0, 1]")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Inputs and labels of the given rows, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::matrix(indices.len(), d, data).expect("rows have width d"),
            labels,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (inputs, labels) = self.gather(indices);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded shuffle followed by a split into `(train, test)` with
    /// `train_len` training samples.
    pub fn split(&self, train_len: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if train_len > self.len() {
            return Err(Error::Domain(format!(
                "cannot take {train_len} training samples from {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((
            self.subset(&idx[..train_len]),
            self.subset(&idx[train_len..]),
        ))
    }
}

fn check_sizes(num_classes: usize, per_class: usize) -> Result<()> {
    if num_classes < 2 || per_class < 1 {
        return Err(Error::Domain(format!(
            "need >= 2 classes and >= 1 sample per class, got {num_classes} x {per_class}"
        )));
    }
    Ok(())
}

/// Center of class `c`: vertex `c` of a regular polygon inscribed in `[0,1]²`.
pub fn blob_center(c: usize, num_classes: usize) -> [f64; 2] {
    let angle = 2.0 * PI * c as f64 / num_classes as f64;
    [0.5 + 0.35 * angle.cos(), 0.5 + 0.35 * angle.sin()]
}

/// Gaussian blobs around the vertices of a regular polygon, clipped to
/// `[0,1]²`. Samples are grouped by class.
pub fn gen_blobs(num_classes: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    check_sizes(num_classes, per_class)?;
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Domain(format!(
            "spread must be positive, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(num_classes * per_class * 2);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let center = blob_center(c, num_classes);
        for _ in 0..per_class {
            for coord in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((coord + spread * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(labels.len(), 2, data)?, labels, num_classes)
}

/// Interleaved Archimedean spiral arms in `[0,1]²` with Gaussian angular
/// noise. Samples are grouped by class.
pub fn gen_spirals(num_classes: usize, per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_sizes(num_classes, per_class)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Domain(format!("noise must be >= 0, got {noise}")));
    }
    const TURNS: f64 = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(num_classes * per_class * 2);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let offset = 2.0 * PI * c as f64 / num_classes as f64;
        for i in 0..per_class {
            let t = (i as f64 + 0.5) / per_class as f64;
            let radius = 0.05 + 0.95 * t;
            let z: f64 = StandardNormal.sample(&mut rng);
            let theta = 2.0 * PI * TURNS * t + offset + noise * z;
            // radius <= 1 keeps every point inside the unit square
            data.push((0.5 + 0.5 * radius * theta.cos()).clamp(0.0, 1.0));
            data.push((0.5 + 0.5 * radius * theta.sin()).clamp(0.0, 1.0));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(labels.len(), 2, data)?, labels, num_classes)
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(path, format!("truncated header ({what})")))
}

/// Loads an IDX image/label file pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, images_path, &labels, labels_path, limit)
}

/// [`load_idx`] on in-memory file contents.
pub fn parse_idx(
    images: &[u8],
    images_path: &Path,
    labels: &[u8],
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<Dataset> {
    let magic = read_be_u32(images, 0, images_path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let magic = read_be_u32(labels, 0, labels_path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = read_be_u32(images, 4, images_path, "count")? as usize;
    let rows = read_be_u32(images, 8, images_path, "rows")? as usize;
    let cols = read_be_u32(images, 12, images_path, "cols")? as usize;
    let label_count = read_be_u32(labels, 4, labels_path, "count")? as usize;
    if count != label_count {
        return Err(Error::format(
            labels_path,
            format!("{label_count} labels for {count} images"),
        ));
    }
    let pixels = rows * cols;
    if images.len() - 16 < count * pixels {
        return Err(Error::format(images_path, "truncated pixel payload"));
    }
    if labels.len() - 8 < count {
        return Err(Error::format(labels_path, "truncated label payload"));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let data = images[16..16 + n * pixels]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let ys: Vec<usize> = labels[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    if let Some(&bad) = ys.iter().find(|&&y| y > 9) {
        return Err(Error::format(
            labels_path,
            format!("label {bad} is not a digit"),
        ));
    }
    Dataset::new(Tensor::matrix(n, pixels, data)?, ys, 10)
}

/// Serializes a dataset with 0..=255-representable pixels as an IDX pair.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.input_dim() {
        return Err(Error::Dimension(format!(
            "{rows}x{cols} images for inputs of width {}",
            ds.input_dim()
        )));
    }
    let n = ds.len() as u32;
    let mut images = Vec::with_capacity(16 + ds.inputs().len());
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.inputs().data().iter().map(|v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, n] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(ds.labels().iter().map(|&y| y as u8));
    Ok((images, labels))
}

/// Seeded visiting order of a dataset for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub permutation: Vec<usize>,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn iter(&self) -> std::slice::Chunks<'_, usize> {
        self.permutation.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size)
    }
}

/// Mixes a seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fisher–Yates permutation keyed on `(seed, epoch)`, cut into batches; the
/// final short batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
    Ok(BatchPlan {
        permutation,
        batch_size,
    })
}

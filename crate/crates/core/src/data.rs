//! Labelled datasets: MNIST-style IDX files, seeded synthetic blobs, and
//! train/validation splitting.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature rows in `[0, 1]` with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label {
                label: bad,
                classes,
            });
        }
        if features
            .as_slice()
            .iter()
            .any(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::Data(
                "features must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(format!("{} (gzip)", path.display()), e.to_string()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "file ends inside the header"))
}

/// Images as `(rows, cols, pixels)`, one byte per pixel, row-major per image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images magic",
            format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = read_u32(bytes, 4, "images count")? as usize;
    let rows = read_u32(bytes, 8, "images rows")? as usize;
    let cols = read_u32(bytes, 12, "images cols")? as usize;
    let payload = &bytes[16..];
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("images dimensions", "declared size overflows"))?;
    if payload.len() != expected {
        return Err(Error::format(
            "images payload",
            format!(
                "header declares {expected} pixel bytes, file has {}",
                payload.len()
            ),
        ));
    }
    Ok((count, rows, cols, payload))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels magic",
            format!("expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = read_u32(bytes, 4, "labels count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::format(
            "labels payload",
            format!("header declares {count} labels, file has {}", payload.len()),
        ));
    }
    Ok(payload)
}

/// Builds a dataset from raw IDX bytes. Pixels are scaled by 1/255; the
/// class count is one more than the largest label.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let label_bytes = parse_idx_labels(labels)?;
    if label_bytes.len() != count {
        return Err(Error::format(
            "count",
            format!("{count} images but {} labels", label_bytes.len()),
        ));
    }
    let features = Matrix::from_vec(
        count,
        rows * cols,
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = label_bytes.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, classes)
}

/// Loads an IDX image/label pair. Gzip-compressed files are accepted.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    dataset_from_idx(&images, &labels)
}

/// Encodes a dataset as IDX bytes, quantizing features with `round(v·255)`.
/// `rows·cols` must equal the feature dimension.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(Error::Shape(format!(
            "{rows}x{cols} images cannot hold {} features",
            ds.dim()
        )));
    }
    if ds.classes() > 256 {
        return Err(Error::Argument("IDX labels are single bytes".into()));
    }
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit in u32")))
    };
    let mut images = Vec::with_capacity(16 + ds.len() * ds.dim());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&as_u32(ds.len(), "count")?.to_be_bytes());
    images.extend_from_slice(&as_u32(rows, "rows")?.to_be_bytes());
    images.extend_from_slice(&as_u32(cols, "cols")?.to_be_bytes());
    images.extend(
        ds.features()
            .as_slice()
            .iter()
            .map(|v| (v * 255.0).round() as u8),
    );

    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&as_u32(ds.len(), "count")?.to_be_bytes());
    labels.extend(ds.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(
    ds: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = encode_idx(ds, rows, cols)?;
    for (path, bytes) in [
        (images_path.as_ref(), images),
        (labels_path.as_ref(), labels),
    ] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// `classes` Gaussian clusters in `[0,1]^d`. Sample `i` belongs to class
/// `i mod classes`, so counts differ by at most one. Centers are kept
/// pairwise far apart (unit distance when the cube allows it) and samples
/// are clamped to the cube.
pub fn synth_blobs(n: usize, d: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::Argument(format!(
            "need n >= classes >= 2, got n={n}, classes={classes}"
        )));
    }
    if d == 0 {
        return Err(Error::Argument("dimension must be positive".into()));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Argument(format!(
            "spread must be finite and >= 0, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_dist = 1.0f64;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut failures = 0;
    while centers.len() < classes {
        let c: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let far = centers.iter().all(|o| {
            o.iter()
                .zip(&c)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= min_dist
        });
        if far {
            centers.push(c);
        } else {
            failures += 1;
            if failures % 200 == 0 {
                min_dist *= 0.9;
            }
        }
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        for &c in &centers[class] {
            let v: f64 = c + spread * rng.sample::<f64, _>(StandardNormal);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, labels, classes)
}

/// Seeded shuffle, then the first `round(n·val_fraction)` samples become
/// the validation part. Both parts are non-empty.
pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    if ds.len() < 2 {
        return Err(Error::Argument("need at least two samples to split".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ds.len() as f64 * val_fraction).round() as usize).clamp(1, ds.len() - 1);
    let (val, train) = order.split_at(n_val);
    Ok((ds.subset(train), ds.subset(val)))
}

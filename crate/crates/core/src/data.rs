//! Datasets: the synthetic 2-D ternary Gaussian task, IDX image ingestion,
//! CSV round-trips, and the train/validation split.
//!
//! Datasets are immutable after construction and freely shareable. Synthetic
//! data lives in an unbounded domain; image data is scaled to `[0,1]` and
//! carries domain bounds so attacks clamp their iterates.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Feature matrix plus integer labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    class_count: usize,
    domain_bounds: Option<(f64, f64)>,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        class_count: usize,
        domain_bounds: Option<(f64, f64)>,
    ) -> Result<Self> {
        if dim == 0 || labels.is_empty() {
            return Err(Error::invalid("dataset must be non-empty".to_string()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "feature buffer of {} does not hold {} rows of {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            dim,
            class_count,
            domain_bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn domain_bounds(&self) -> Option<(f64, f64)> {
        self.domain_bounds
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gather rows into a contiguous batch buffer.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut feats = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            feats.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        (feats, labels)
    }

    /// Keep only the given rows.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (features, labels) = self.gather(indices);
        LabeledDataset::new(features, labels, self.dim, self.class_count, self.domain_bounds)
    }
}

/// Validation split request: how many samples to hold out, and the seed
/// driving the uniform choice.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_count: usize,
    pub seed: u64,
}

/// Disjoint uniform-random split into (train, validation).
///
/// The validation half is the clean monitor set: callers never inject label
/// noise into it and never train on it.
pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.validation_count == 0 || spec.validation_count >= ds.len() {
        return Err(Error::invalid(format!(
            "validation_count {} must lie strictly between 0 and {}",
            spec.validation_count,
            ds.len()
        )));
    }
    let mut stream = rng::stream(&[spec.seed, 0x53504c49]);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng::shuffle(&mut stream, &mut order);
    let (valid_idx, train_idx) = order.split_at(spec.validation_count);
    Ok((ds.subset(train_idx)?, ds.subset(valid_idx)?))
}

pub const DEFAULT_TERNARY_CENTERS: [[f64; 2]; 3] =
    [[2.0, 0.0], [-1.0, 1.7320508075688772], [-1.0, -1.7320508075688772]];

/// Synthetic ternary classification: three isotropic Gaussians in the plane.
pub fn make_ternary_gaussian(
    n_per_class: usize,
    centers: &[[f64; 2]; 3],
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be positive".to_string()));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma {sigma} must be positive")));
    }
    for a in 0..3 {
        for b in a + 1..3 {
            if centers[a] == centers[b] {
                return Err(Error::invalid(format!(
                    "centers must be distinct, got {:?} twice",
                    centers[a]
                )));
            }
        }
    }
    let mut features = Vec::with_capacity(3 * n_per_class * 2);
    let mut labels = Vec::with_capacity(3 * n_per_class);
    let mut stream = rng::stream(&[seed, 0x7465726e]);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let (gx, gy) = rng::normal_pair(&mut stream);
            features.push(center[0] + sigma * gx);
            features.push(center[1] + sigma * gy);
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, 2, 3, None)
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            needed: offset + 4,
            found: bytes.len(),
        })
}

/// Load an IDX image/label file pair. Pixels are scaled to `[0,1]` and the
/// dataset carries `[0,1]` domain bounds.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = read_be_u32(&image_bytes, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::IdxBadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(&image_bytes, 4, images_path)? as usize;
    let rows = read_be_u32(&image_bytes, 8, images_path)? as usize;
    let cols = read_be_u32(&image_bytes, 12, images_path)? as usize;
    let payload = count * rows * cols;
    if image_bytes.len() < 16 + payload {
        return Err(Error::IdxTruncated {
            path: images_path.to_path_buf(),
            needed: 16 + payload,
            found: image_bytes.len(),
        });
    }

    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = read_be_u32(&label_bytes, 0, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::IdxBadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let label_count = read_be_u32(&label_bytes, 4, labels_path)? as usize;
    if label_bytes.len() < 8 + label_count {
        return Err(Error::IdxTruncated {
            path: labels_path.to_path_buf(),
            needed: 8 + label_count,
            found: label_bytes.len(),
        });
    }
    if label_count != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let features: Vec<f64> = image_bytes[16..16 + payload]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[8..8 + label_count]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(features, labels, rows * cols, class_count, Some((0.0, 1.0)))
}

/// Write a dataset of `rows x cols` images as an IDX pair. Features are
/// clamped to `[0,1]` and quantized to bytes.
pub fn write_idx_pair(
    ds: &LabeledDataset,
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::invalid(format!(
            "image geometry {rows}x{cols} does not match feature dim {}",
            ds.dim()
        )));
    }
    let mut image_bytes = Vec::with_capacity(16 + ds.len() * ds.dim());
    image_bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in ds.features() {
        image_bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }

    let mut label_bytes = Vec::with_capacity(8 + ds.len());
    label_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &y in ds.labels() {
        label_bytes.push(y as u8);
    }

    fs::write(images_path, image_bytes).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, label_bytes).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Write the dataset as CSV: header `f0,...,f{d-1},label`, one sample per line.
pub fn write_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for j in 0..ds.dim() {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for i in 0..ds.len() {
        for v in ds.row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", ds.labels()[i]));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a CSV written by [`write_csv`].
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| csv_err(1, "empty file".to_string()))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 2 || columns.last() != Some(&"label") {
        return Err(csv_err(
            1,
            "expected header f0,...,f{d-1},label".to_string(),
        ));
    }
    let dim = columns.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(csv_err(
                idx + 1,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        for f in &fields[..dim] {
            features.push(
                f.parse::<f64>()
                    .map_err(|e| csv_err(idx + 1, format!("bad feature {f:?}: {e}")))?,
            );
        }
        labels.push(
            fields[dim]
                .parse::<usize>()
                .map_err(|e| csv_err(idx + 1, format!("bad label {:?}: {e}", fields[dim])))?,
        );
    }
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(features, labels, dim, class_count, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ternary_gaussian_construction() {
        let ds = make_ternary_gaussian(100, &DEFAULT_TERNARY_CENTERS, 0.5, 7).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.class_count(), 3);
        assert_eq!(ds.dim(), 2);
        for class in 0..3 {
            assert_eq!(ds.labels().iter().filter(|&&y| y == class).count(), 100);
        }
    }

    #[test]
    fn ternary_gaussian_is_deterministic_per_seed() {
        let a = make_ternary_gaussian(50, &DEFAULT_TERNARY_CENTERS, 0.3, 9).unwrap();
        let b = make_ternary_gaussian(50, &DEFAULT_TERNARY_CENTERS, 0.3, 9).unwrap();
        assert_eq!(a.features(), b.features());
        let c = make_ternary_gaussian(50, &DEFAULT_TERNARY_CENTERS, 0.3, 10).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn tiny_sigma_collapses_to_centers() {
        let ds = make_ternary_gaussian(10, &DEFAULT_TERNARY_CENTERS, 1e-300, 3).unwrap();
        for i in 0..ds.len() {
            let c = &DEFAULT_TERNARY_CENTERS[ds.labels()[i]];
            assert!((ds.row(i)[0] - c[0]).abs() < 1e-9);
            assert!((ds.row(i)[1] - c[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn per_class_sample_mean_approaches_center() {
        let n = 4000;
        let sigma = 0.8;
        let ds = make_ternary_gaussian(n, &DEFAULT_TERNARY_CENTERS, sigma, 21).unwrap();
        let tol = 4.0 * sigma / (n as f64).sqrt();
        for (class, center) in DEFAULT_TERNARY_CENTERS.iter().enumerate() {
            let mut mean = [0.0, 0.0];
            for i in 0..ds.len() {
                if ds.labels()[i] == class {
                    mean[0] += ds.row(i)[0];
                    mean[1] += ds.row(i)[1];
                }
            }
            mean[0] /= n as f64;
            mean[1] /= n as f64;
            assert!((mean[0] - center[0]).abs() < tol);
            assert!((mean[1] - center[1]).abs() < tol);
        }
    }

    #[test]
    fn duplicate_centers_rejected() {
        let centers = [[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]];
        assert!(make_ternary_gaussian(5, &centers, 0.1, 0).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let ds = make_ternary_gaussian(200, &DEFAULT_TERNARY_CENTERS, 0.5, 1).unwrap();
        let spec = SplitSpec {
            validation_count: 150,
            seed: 4,
        };
        let (train, valid) = split(&ds, &spec).unwrap();
        assert_eq!(train.len(), 450);
        assert_eq!(valid.len(), 150);

        // Every original row appears exactly once across the two halves.
        let key = |row: &[f64]| (row[0].to_bits(), row[1].to_bits());
        let mut seen = std::collections::HashMap::new();
        for i in 0..ds.len() {
            *seen.entry(key(ds.row(i))).or_insert(0i64) += 1;
        }
        for i in 0..train.len() {
            *seen.entry(key(train.row(i))).or_insert(0) -= 1;
        }
        for i in 0..valid.len() {
            *seen.entry(key(valid.row(i))).or_insert(0) -= 1;
        }
        assert!(seen.values().all(|&v| v == 0));
    }

    #[test]
    fn split_bounds_are_enforced() {
        let ds = make_ternary_gaussian(10, &DEFAULT_TERNARY_CENTERS, 0.5, 1).unwrap();
        for bad in [0, 30, 31] {
            let spec = SplitSpec {
                validation_count: bad,
                seed: 0,
            };
            assert!(split(&ds, &spec).is_err(), "validation_count {bad}");
        }
    }

    #[test]
    fn idx_roundtrip_and_flattening() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");
        let n = 10;
        let features: Vec<f64> = (0..n * 784).map(|i| (i % 256) as f64 / 255.0).collect();
        let ds = LabeledDataset::new(features, vec![1; n], 784, 3, Some((0.0, 1.0))).unwrap();
        write_idx_pair(&ds, &images, &labels, 28, 28).unwrap();
        let loaded = load_idx_pair(&images, &labels).unwrap();
        assert_eq!(loaded.len(), 10);
        assert_eq!(loaded.dim(), 784);
        assert_eq!(loaded.domain_bounds(), Some((0.0, 1.0)));
        for (a, b) in loaded.features().iter().zip(ds.features()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");
        // Label magic in the image slot and vice versa.
        let mut bytes = IDX_LABEL_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(0);
        fs::write(&images, &bytes).unwrap();
        fs::write(&labels, &bytes).unwrap();
        match load_idx_pair(&images, &labels) {
            Err(Error::IdxBadMagic { expected, found, .. }) => {
                assert_eq!(expected, IDX_IMAGE_MAGIC);
                assert_eq!(found, IDX_LABEL_MAGIC);
            }
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncation_and_count_mismatch_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");
        let ds = LabeledDataset::new(vec![0.5; 2 * 4], vec![0, 1], 4, 2, None).unwrap();
        write_idx_pair(&ds, &images, &labels, 2, 2).unwrap();

        let full = fs::read(&images).unwrap();
        fs::write(&images, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            load_idx_pair(&images, &labels),
            Err(Error::IdxTruncated { .. })
        ));

        fs::write(&images, &full).unwrap();
        let mut label_bytes = IDX_LABEL_MAGIC.to_be_bytes().to_vec();
        label_bytes.extend_from_slice(&3u32.to_be_bytes());
        label_bytes.extend_from_slice(&[0, 1, 0]);
        fs::write(&labels, label_bytes).unwrap();
        assert!(matches!(
            load_idx_pair(&images, &labels),
            Err(Error::IdxCountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn csv_roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = make_ternary_gaussian(20, &DEFAULT_TERNARY_CENTERS, 0.4, 5).unwrap();
        write_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.labels(), ds.labels());
        // Shortest-roundtrip float formatting reproduces values exactly.
        assert_eq!(loaded.features(), ds.features());
    }
}

//! IDX dataset files and a synthetic handwritten-digit generator.
//!
//! IDX headers are big-endian: magic `0x00000803` for `u8` images
//! `[N, H, W]`, `0x00000801` for `u8` labels `[N]`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: file is truncated")]
    Truncated { path: PathBuf },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} is not a digit class")]
    BadLabel(u8),
    #[error("dataset is empty")]
    Empty,
}

/// Images in `[0, 1]` as `[N, H, W, 1]` plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn from_u8(n: usize, h: usize, w: usize, pixels: &[u8], labels: &[u8]) -> Result<Self, DataError> {
        if labels.len() != n {
            return Err(DataError::CountMismatch { images: n, labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(DataError::BadLabel(bad));
        }
        let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Ok(Self {
            images: Tensor::new(vec![n, h, w, 1], data),
            labels: labels.iter().map(|&l| l as usize).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [h, w, c] = self.image_shape();
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(vec![indices.len(), h, w, c], data), labels)
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels }
    }

    /// Consecutive batches of at most `size` samples in file order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |s| {
            let idx: Vec<usize> = (s..(s + size).min(n)).collect();
            self.batch(&idx)
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.into(), source })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated { path: path.into() })
}

/// Returns `(n, h, w, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: path.into(), expected: IMAGES_MAGIC, found: magic });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let h = be_u32(&bytes, 8, path)? as usize;
    let w = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() < n * h * w {
        return Err(DataError::Truncated { path: path.into() });
    }
    Ok((n, h, w, body[..n * h * w].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic { path: path.into(), expected: LABELS_MAGIC, found: magic });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(DataError::Truncated { path: path.into() });
    }
    Ok(body[..n].to_vec())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.into(), source })
}

pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<(), DataError> {
    assert_eq!(pixels.len(), n * h * w);
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(pixels);
    write(path, &bytes)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    write(path, &bytes)
}

pub fn load_pair(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let (n, h, w, px) = read_idx_images(images)?;
    let l = read_idx_labels(labels)?;
    if n == 0 {
        return Err(DataError::Empty);
    }
    Dataset::from_u8(n, h, w, &px, &l)
}

/// Loads the standard MNIST file pair names from `dir`: `(train, test)`.
pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = load_pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// Deterministic Fisher-Yates shuffle of `idx`.
pub fn shuffle_indices(idx: &mut [usize], seed: u64) {
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

/// Writes a synthetic train/test split to `dir` under the MNIST file names.
pub fn write_synthetic_dir(dir: &Path, train: usize, test: usize, seed: u64) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.into(), source })?;
    let (px, l) = synth_digits(train, seed);
    write_idx_images(&dir.join(TRAIN_IMAGES), train, SIDE, SIDE, &px)?;
    write_idx_labels(&dir.join(TRAIN_LABELS), &l)?;
    let (px, l) = synth_digits(test, seed ^ 0x5eed_7e57);
    write_idx_images(&dir.join(TEST_IMAGES), test, SIDE, SIDE, &px)?;
    write_idx_labels(&dir.join(TEST_LABELS), &l)
}

/// In-memory synthetic train/test datasets.
pub fn synthetic(train: usize, test: usize, seed: u64) -> (Dataset, Dataset) {
    let (px, l) = synth_digits(train, seed);
    let tr = Dataset::from_u8(train, SIDE, SIDE, &px, &l).expect("generated labels are digits");
    let (px, l) = synth_digits(test, seed ^ 0x5eed_7e57);
    let te = Dataset::from_u8(test, SIDE, SIDE, &px, &l).expect("generated labels are digits");
    (tr, te)
}

pub const SIDE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = (from + (to - from) * i as f64 / steps as f64).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke skeletons in the unit square, y pointing down.
fn glyph(d: usize) -> Vec<Stroke> {
    match d {
        0 => vec![ellipse(0.5, 0.5, 0.28, 0.42, 0.0, 360.0, 16)],
        1 => vec![vec![(0.32, 0.25), (0.55, 0.06), (0.55, 0.94)]],
        2 => vec![{
            let mut s = ellipse(0.5, 0.3, 0.28, 0.22, 190.0, 360.0, 8);
            s.extend([(0.7, 0.5), (0.2, 0.93), (0.84, 0.93)]);
            s
        }],
        3 => vec![ellipse(0.48, 0.28, 0.26, 0.2, 200.0, 450.0, 10), ellipse(0.48, 0.7, 0.3, 0.23, 270.0, 510.0, 10)],
        4 => vec![vec![(0.66, 0.94), (0.66, 0.06), (0.14, 0.66), (0.86, 0.66)]],
        5 => vec![{
            let mut s = vec![(0.78, 0.07), (0.3, 0.07), (0.26, 0.45)];
            s.extend(ellipse(0.48, 0.66, 0.3, 0.26, 230.0, 500.0, 10));
            s
        }],
        6 => vec![{
            let mut s = vec![(0.72, 0.08), (0.46, 0.18), (0.26, 0.48)];
            s.extend(ellipse(0.5, 0.7, 0.25, 0.22, 180.0, 540.0, 14));
            s
        }],
        7 => vec![vec![(0.16, 0.08), (0.84, 0.08), (0.42, 0.94)], vec![(0.36, 0.52), (0.7, 0.52)]],
        8 => vec![ellipse(0.5, 0.28, 0.22, 0.2, 0.0, 360.0, 12), ellipse(0.5, 0.71, 0.27, 0.23, 0.0, 360.0, 14)],
        _ => vec![ellipse(0.5, 0.32, 0.24, 0.23, 0.0, 360.0, 14), vec![(0.74, 0.32), (0.7, 0.62), (0.52, 0.94)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// `n` random 28x28 digits with uniformly drawn labels, as `u8` pixels and labels.
///
/// Each sample jitters the stroke skeleton, applies a random rotation,
/// shear, scale and shift, draws with a random pen width and adds pixel noise.
pub fn synth_digits(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.035).unwrap();
    let noise = Normal::new(0.0, 0.06).unwrap();
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let d = (i + rng.random_range(0..10)) % 10;
        labels.push(d as u8);
        let angle: f64 = rng.random_range(-0.3..0.3);
        let shear: f64 = rng.random_range(-0.35..0.35);
        let sx: f64 = rng.random_range(14.0..20.0);
        let sy: f64 = rng.random_range(16.0..21.0);
        let tx: f64 = rng.random_range(-2.5..2.5);
        let ty: f64 = rng.random_range(-2.0..2.0);
        let pen: f64 = rng.random_range(0.9..2.3);
        let (sin, cos) = angle.sin_cos();
        let strokes: Vec<Stroke> = glyph(d)
            .into_iter()
            .map(|s| {
                s.into_iter()
                    .map(|(x, y)| {
                        let x = x + jitter.sample(&mut rng) - 0.5;
                        let y = y + jitter.sample(&mut rng) - 0.5;
                        let (x, y) = (x * sx + shear * y * sy, y * sy);
                        (cos * x - sin * y + 14.0 + tx, sin * x + cos * y + 14.0 + ty)
                    })
                    .collect()
            })
            .collect();
        for py in 0..SIDE {
            for px in 0..SIDE {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let dist = strokes
                    .iter()
                    .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                    .fold(f64::INFINITY, f64::min);
                let ink = (pen + 0.5 - dist).clamp(0.0, 1.0);
                let v = (ink + noise.sample(&mut rng)).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }
    }
    (pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_and_header_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (px, l) = synth_digits(5, 1);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx_images(&ip, 5, SIDE, SIDE, &px).unwrap();
        write_idx_labels(&lp, &l).unwrap();
        let raw = fs::read(&ip).unwrap();
        assert_eq!(&raw[..8], &[0, 0, 8, 3, 0, 0, 0, 5]);
        assert_eq!(read_idx_images(&ip).unwrap(), (5, SIDE, SIDE, px));
        assert_eq!(read_idx_labels(&lp).unwrap(), l);
        assert!(matches!(read_idx_labels(&ip), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn synthetic_is_deterministic_and_covers_all_classes() {
        let (a, la) = synth_digits(50, 7);
        let (b, lb) = synth_digits(50, 7);
        assert_eq!((a, la.clone()), (b, lb));
        for d in 0..10u8 {
            assert!(la.contains(&d));
        }
    }

    #[test]
    fn truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, [0, 0, 8, 3, 0, 0, 0, 9, 0, 0, 0, 28, 0, 0, 0, 28, 1, 2]).unwrap();
        assert!(matches!(read_idx_images(&p), Err(DataError::Truncated { .. })));
    }
}

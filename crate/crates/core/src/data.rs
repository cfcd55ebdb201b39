//! MNIST ingestion from IDX files, padding to the model's image side, and
//! deterministic batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdfn_tensor::Tensor;
use thiserror::Error;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} is not a digit")]
    BadLabel(u8),
    #[error("{0}")]
    Io(String),
}

/// Images decoded from an IDX3 container, pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let needed = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .and_then(|n| n.checked_add(16))
        .unwrap_or(usize::MAX);
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let pixels = bytes[16..needed].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let needed = count.saturating_add(8);
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let labels = bytes[8..needed].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(IdxError::BadLabel(bad));
    }
    Ok(labels)
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend(IMAGES_MAGIC.to_be_bytes());
    out.extend((images.len() as u32).to_be_bytes());
    out.extend((rows as u32).to_be_bytes());
    out.extend((cols as u32).to_be_bytes());
    for img in images {
        assert_eq!(img.len(), rows * cols);
        out.extend(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

/// Raw images plus labels as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|e| IdxError::Io(format!("{}: {e}", path.display())))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset, IdxError> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    Ok(RawDataset { images, labels })
}

/// Zero-pads a square image symmetrically to `side × side`.
pub fn pad_to(image: &[f32], from: usize, side: usize) -> Vec<f32> {
    let off = (side - from) / 2;
    let mut out = vec![0.0; side * side];
    for r in 0..from {
        out[(r + off) * side + off..][..from].copy_from_slice(&image[r * from..(r + 1) * from]);
    }
    out
}

/// Pads a 28×28 digit with two zero pixels on every side.
pub fn normalize_to_32(image: &Tensor) -> Result<Tensor> {
    if image.shape() != [28, 28] {
        return Err(Error::InputShape {
            expected: "[28, 28] image".into(),
            got: image.shape().to_vec(),
        });
    }
    Ok(Tensor::new(&[32, 32], pad_to(image.data(), 28, 32))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Validation => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Square images in `[0, 1]` with digit labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub split: Split,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(side: usize, split: Split, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() * side * side {
            return Err(Error::Invalid(format!(
                "{} pixels do not make {} images of side {side}",
                images.len(),
                labels.len()
            )));
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("pixel outside [0, 1]".into()));
        }
        Ok(Dataset {
            side,
            split,
            images,
            labels,
        })
    }

    /// Loads one split from `dir` and pads it to `side`.
    pub fn load(dir: &Path, split: Split, side: usize) -> Result<Self> {
        let (img, lbl) = split.file_names();
        let raw = load_idx(&dir.join(img), &dir.join(lbl))?;
        Self::from_raw(raw, split, side)
    }

    pub fn from_raw(raw: RawDataset, split: Split, side: usize) -> Result<Self> {
        let RawDataset { images, labels } = raw;
        if images.rows != images.cols || images.rows > side {
            return Err(Error::Invalid(format!(
                "cannot pad {}×{} images to {side}×{side}",
                images.rows, images.cols
            )));
        }
        let from = images.rows;
        let mut padded = Vec::with_capacity(images.count * side * side);
        for img in images.pixels.chunks(from * from) {
            padded.extend(pad_to(img, from, side));
        }
        Self::new(side, split, padded, labels.into_iter().map(usize::from).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(&[self.side, self.side], self.image(i).to_vec()).unwrap()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` samples (all of them if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            side: self.side,
            split: self.split,
            images: self.images[..n * self.side * self.side].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn class_histogram(&self) -> [usize; 10] {
        let mut h = [0; 10];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Index batches over `len` samples; the last batch may be short.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> impl Iterator<Item = Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.into_iter()
}

/// Default location of the MNIST files: `$TDFN_DATA_DIR`, else `data/mnist`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("TDFN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_round_trip_container() {
        let imgs = vec![vec![0u8, 255, 51, 102], vec![255u8; 4]];
        let parsed = parse_idx_images(&encode_idx_images(2, 2, &imgs)).unwrap();
        assert_eq!((parsed.count, parsed.rows, parsed.cols), (2, 2, 2));
        assert_eq!(&parsed.pixels[..4], &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[3, 9])).unwrap(), vec![3, 9]);
    }

    #[test]
    fn swapped_magic_is_rejected() {
        let labels = encode_idx_labels(&[1, 2]);
        assert_eq!(
            parse_idx_images(&labels),
            Err(IdxError::BadMagic {
                expected: IMAGES_MAGIC,
                found: LABELS_MAGIC
            })
        );
        let images = encode_idx_images(1, 1, &[vec![0]]);
        assert!(matches!(parse_idx_labels(&images), Err(IdxError::BadMagic { .. })));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = encode_idx_images(2, 2, &[vec![0; 4], vec![0; 4]]);
        assert!(matches!(
            parse_idx_images(&bytes[..bytes.len() - 1]),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(IdxError::Truncated { .. })));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, encode_idx_images(1, 1, &[vec![0], vec![1]])).unwrap();
        fs::write(&lp, encode_idx_labels(&[1, 2, 3])).unwrap();
        assert_eq!(
            load_idx(&ip, &lp),
            Err(IdxError::CountMismatch { images: 2, labels: 3 })
        );
    }

    #[test]
    fn padding_contract() {
        let zero = Tensor::zeros(&[28, 28]).unwrap();
        assert!(normalize_to_32(&zero).unwrap().data().iter().all(|&x| x == 0.0));

        let data: Vec<f32> = (0..784).map(|i| (i % 255) as f32 / 255.0 + 1e-3).collect();
        let img = Tensor::new(&[28, 28], data.clone()).unwrap();
        let out = normalize_to_32(&img).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let v = out.at(&[r, c]).unwrap();
                if r < 2 || r >= 30 || c < 2 || c >= 30 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, data[(r - 2) * 28 + (c - 2)]);
                }
            }
        }
        let s_in: f64 = data.iter().map(|&x| x as f64).sum();
        let s_out: f64 = out.data().iter().map(|&x| x as f64).sum();
        assert_eq!(s_in, s_out);
        assert!(normalize_to_32(&Tensor::zeros(&[32, 32]).unwrap()).is_err());
    }

    #[test]
    fn batching() {
        let sizes: Vec<usize> = batch_iter(10, 3, 0, false).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let ordered: Vec<usize> = batch_iter(10, 3, 0, false).flatten().collect();
        assert_eq!(ordered, (0..10).collect::<Vec<_>>());
        let a: Vec<Vec<usize>> = batch_iter(100, 7, 42, true).collect();
        let b: Vec<Vec<usize>> = batch_iter(100, 7, 42, true).collect();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}

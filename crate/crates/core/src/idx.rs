//! Reader for the IDX files that ship the MNIST digits.
//!
//! Layout: big-endian `u32` magic, `u32` item count, then for image files
//! `u32` rows and `u32` cols, followed by one `u8` per pixel or label.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

fn idx_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Images as rows of `rows * cols` pixels scaled to [0, 1].
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < 16 {
        return Err(idx_error(
            path,
            format!("{} bytes is too short for an image header", bytes.len()),
        ));
    }
    let magic = be_u32(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(idx_error(path, format!("image magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let count = be_u32(bytes, 4) as usize;
    let pixels = be_u32(bytes, 8) as usize * be_u32(bytes, 12) as usize;
    let payload = &bytes[16..];
    if pixels == 0 || payload.len() != count * pixels {
        return Err(idx_error(
            path,
            format!(
                "payload of {} bytes does not hold {count} images of {pixels} pixels",
                payload.len()
            ),
        ));
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Matrix::from_vec(count, pixels, data)
}

/// Labels, each checked to be a digit 0..=9.
pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(idx_error(
            path,
            format!("{} bytes is too short for a label header", bytes.len()),
        ));
    }
    let magic = be_u32(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(idx_error(path, format!("label magic {magic}, expected {LABEL_MAGIC}")));
    }
    let count = be_u32(bytes, 4) as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(idx_error(
            path,
            format!("payload of {} bytes does not hold {count} labels", payload.len()),
        ));
    }
    if let Some(bad) = payload.iter().find(|&&b| b > 9) {
        return Err(idx_error(path, format!("label {bad} outside 0..=9")));
    }
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| idx_error(path, e.to_string()))
}

pub fn read_images(path: &Path) -> Result<Matrix> {
    parse_images(&read(path)?, path)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    parse_labels(&read(path)?, path)
}

/// One split of the digit set.
#[derive(Clone, Debug)]
pub struct Digits {
    pub images: Matrix,
    pub labels: Vec<usize>,
}

impl Digits {
    fn load(images: PathBuf, labels: PathBuf) -> Result<Self> {
        let x = read_images(&images)?;
        let y = read_labels(&labels)?;
        if x.rows() != y.len() {
            return Err(idx_error(
                &labels,
                format!("{} labels for {} images", y.len(), x.rows()),
            ));
        }
        Ok(Self { images: x, labels: y })
    }

    /// The first `n` examples (all of them when `n` exceeds the split).
    pub fn truncate(self, n: usize) -> Self {
        if n >= self.labels.len() {
            return self;
        }
        let idx: Vec<usize> = (0..n).collect();
        Self {
            images: self.images.select_rows(&idx),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loads the train and test splits from the four standard file names.
pub fn load_mnist(dir: &Path) -> Result<(Digits, Digits)> {
    let train = Digits::load(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?;
    let test = Digits::load(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGE_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn label_file(payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn parses_small_files() {
        let p = Path::new("mem");
        let x = parse_images(&image_file(2, 1, 2, &[0, 255, 51, 102]), p).unwrap();
        assert_eq!((x.rows(), x.cols()), (2, 2));
        assert_eq!(x.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_labels(&label_file(&[3, 9, 0]), p).unwrap(), vec![3, 9, 0]);
    }

    #[test]
    fn rejects_bad_magic_size_and_labels() {
        let p = Path::new("mem");
        let mut swapped = label_file(&[1]);
        swapped[3] = 3; // 2051
        assert!(matches!(parse_labels(&swapped, p), Err(Error::Idx { .. })));
        assert!(parse_images(&label_file(&[1; 8]), p).is_err());
        assert!(parse_images(&image_file(2, 1, 2, &[0, 1, 2]), p).is_err());
        assert!(parse_labels(&label_file(&[10]), p).is_err());
        assert!(parse_labels(&[0, 0], p).is_err());
    }

    #[test]
    fn missing_file_is_structured_error() {
        let err = read_labels(Path::new("/nonexistent/labels")).unwrap_err();
        assert!(matches!(err, Error::Idx { .. }));
    }
}

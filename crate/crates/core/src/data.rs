//! IDX (MNIST) ingestion and seeded mini-batching.
//!
//! Expected file names inside a data directory are the standard MNIST ones,
//! optionally with a `.gz` suffix:
//! `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//! `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DlrtError, Result};
use crate::linalg::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

/// Images as rows scaled to `[0, 1]` plus their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Matrix,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(DlrtError::InvalidArgument(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if images.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DlrtError::InvalidArgument(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { images, labels })
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    /// The first `n` samples (all of them if `n ≥ len`).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Reads the whole file, transparently inflating gzip input.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1F, 0x8B]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| DlrtError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            DlrtError::Truncated(format!(
                "{}: header ends at byte {}",
                path.display(),
                bytes.len()
            ))
        })
}

fn check_magic(found: u32, want: u32, path: &Path) -> Result<()> {
    if found != want {
        return Err(DlrtError::Format(format!(
            "{}: magic {found:#010x}, expected {want:#010x}",
            path.display()
        )));
    }
    Ok(())
}

/// Parses an IDX3 image file into an `N x (rows·cols)` matrix scaled by 1/255.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    check_magic(be_u32(&bytes, 0, path)?, IMAGE_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = rows
        .checked_mul(cols)
        .ok_or_else(|| DlrtError::Format(format!("{}: image size overflows", path.display())))?;
    let total = count
        .checked_mul(pixels)
        .filter(|t| t.checked_add(16).is_some())
        .ok_or_else(|| DlrtError::Format(format!("{}: payload size overflows", path.display())))?;
    let body = bytes.get(16..16 + total).ok_or_else(|| {
        DlrtError::Truncated(format!(
            "{}: expected {total} pixel bytes, found {}",
            path.display(),
            bytes.len() - 16
        ))
    })?;
    Matrix::from_vec(
        count,
        pixels,
        body.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

/// Parses an IDX1 label file; every label must be below [`MNIST_CLASSES`].
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    check_magic(be_u32(&bytes, 0, path)?, LABEL_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    let body = bytes.get(8..8 + count).ok_or_else(|| {
        DlrtError::Truncated(format!(
            "{}: expected {count} labels, found {}",
            path.display(),
            bytes.len() - 8
        ))
    })?;
    body.iter()
        .map(|&b| {
            let label = usize::from(b);
            if label >= MNIST_CLASSES {
                Err(DlrtError::LabelRange {
                    label,
                    classes: MNIST_CLASSES,
                })
            } else {
                Ok(label)
            }
        })
        .collect()
}

/// Writes `images` (values in `[0, 1]`, quantized to bytes by rounding) as an
/// uncompressed IDX3 file with the given image shape.
pub fn write_idx_images<W: Write>(
    w: &mut W,
    images: &Matrix,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if rows * cols != images.cols() {
        return Err(DlrtError::InvalidArgument(format!(
            "{rows}x{cols} images but rows of length {}",
            images.cols()
        )));
    }
    w.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    for d in [images.rows(), rows, cols] {
        w.write_all(
            &u32::try_from(d)
                .map_err(|_| DlrtError::Format("dimension exceeds u32".into()))?
                .to_be_bytes(),
        )?;
    }
    let body: Vec<u8> = images
        .as_slice()
        .iter()
        .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&body)?;
    Ok(())
}

pub fn write_idx_labels<W: Write>(w: &mut W, labels: &[usize]) -> Result<()> {
    w.write_all(&LABEL_MAGIC.to_be_bytes())?;
    let n =
        u32::try_from(labels.len()).map_err(|_| DlrtError::Format("count exceeds u32".into()))?;
    w.write_all(&n.to_be_bytes())?;
    let body = labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| DlrtError::LabelRange {
                label: l,
                classes: 256,
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    w.write_all(&body)?;
    Ok(())
}

fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(DlrtError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} (or .gz) not found", plain.display()),
    )))
}

/// True when all four MNIST files are present in `dir`.
pub fn mnist_available(dir: &Path) -> bool {
    MNIST_FILES.iter().all(|f| locate(dir, f).is_ok())
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Loads `(train, test)` from a directory holding the standard MNIST files.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let load = |img: &str, lab: &str| -> Result<Dataset> {
        Dataset::new(
            load_idx_images(locate(dir, img)?)?,
            load_idx_labels(locate(dir, lab)?)?,
        )
    };
    Ok((
        load(MNIST_FILES[0], MNIST_FILES[1])?,
        load(MNIST_FILES[2], MNIST_FILES[3])?,
    ))
}

/// Index batches for one epoch: a permutation of `0..n` seeded by
/// `(seed, epoch)`, cut into chunks of `batch_size`; the last chunk may be
/// shorter.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be ≥ 1");
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v
    }

    #[test]
    fn tiny_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(IMAGE_MAGIC, &[1, 2, 2]);
        bytes.extend([0u8, 128, 255, 64]);
        let m = load_idx_images(write_tmp(&dir, "img", &bytes)).unwrap();
        assert_eq!(m.shape(), (1, 4));
        assert_eq!(m.row(0), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn gzip_input_is_inflated() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(LABEL_MAGIC, &[3]);
        bytes.extend([3u8, 1, 4]);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&bytes).unwrap();
        let p = write_tmp(&dir, "lab.gz", &enc.finish().unwrap());
        assert_eq!(load_idx_labels(p).unwrap(), vec![3, 1, 4]);
    }

    #[test]
    fn label_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(LABEL_MAGIC, &[2]);
        bytes.extend([1u8, 12]);
        assert!(matches!(
            load_idx_labels(write_tmp(&dir, "bad", &bytes)),
            Err(DlrtError::LabelRange { label: 12, .. })
        ));
        let empty = header(LABEL_MAGIC, &[0]);
        assert!(load_idx_labels(write_tmp(&dir, "zero", &empty))
            .unwrap()
            .is_empty());
        let wrong = header(IMAGE_MAGIC, &[0]);
        assert!(matches!(
            load_idx_labels(write_tmp(&dir, "wrong", &wrong)),
            Err(DlrtError::Format(_))
        ));
    }

    #[test]
    fn empty_and_short_files_are_truncation_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_idx_images(write_tmp(&dir, "e", &[])),
            Err(DlrtError::Truncated(_))
        ));
        let mut bytes = header(IMAGE_MAGIC, &[2, 2, 2]);
        bytes.extend([1u8, 2, 3]);
        assert!(matches!(
            load_idx_images(write_tmp(&dir, "s", &bytes)),
            Err(DlrtError::Truncated(_))
        ));
    }

    #[test]
    fn batching_examples() {
        let b = batches(4, 2, 7, 0);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(batches(4, 2, 7, 0), b);
        assert_eq!(batches(3, 10, 1, 0).len(), 1);
        assert_eq!(batches(3, 10, 1, 0)[0].len(), 3);
        assert_eq!(batches(5, 2, 1, 0).last().unwrap().len(), 1);
    }
}

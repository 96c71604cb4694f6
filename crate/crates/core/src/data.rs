//! IDX (MNIST) parsing and the train/validation/test split.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images as rows scaled into `[0, 1]`, one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Matrix<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Matrix<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::shape("Dataset", images.rows(), labels.len()));
        }
        Ok(Dataset { images, labels })
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

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start > end || end > self.len() {
            return Err(Error::IndexOutOfRange {
                index: end,
                len: self.len(),
            });
        }
        Ok(Dataset {
            images: self.images.slice_rows(start, end),
            labels: self.labels[start..end].to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Raw IDX image tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// One flattened image per row, pixels divided by 255.
    pub fn to_matrix(&self) -> Matrix<f32> {
        let data = self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
        Matrix::from_vec_unchecked(self.count, self.rows * self.cols, data).expect("length checked at parse time")
    }
}

fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::format(0, format!("gzip: {e}")))?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(offset, "truncated header"))
}

fn checked_payload(bytes: &[u8], header: usize, dims: &[usize]) -> Result<usize> {
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(4, "dimension product overflows"))?;
    let available = bytes.len() - header;
    if available < expected {
        return Err(Error::format(
            bytes.len(),
            format!("payload truncated: {expected} bytes declared, {available} present"),
        ));
    }
    if available > expected {
        return Err(Error::format(header + expected, "trailing bytes after payload"));
    }
    Ok(expected)
}

/// Parses an `idx3-ubyte` image file, gzipped or not.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let bytes = maybe_gunzip(bytes)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let count = be_u32(&bytes, 4)? as usize;
    let rows = be_u32(&bytes, 8)? as usize;
    let cols = be_u32(&bytes, 12)? as usize;
    checked_payload(&bytes, 16, &[count, rows, cols])?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

/// Parses an `idx1-ubyte` label file, gzipped or not.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let bytes = maybe_gunzip(bytes)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(0, format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = be_u32(&bytes, 4)? as usize;
    checked_payload(&bytes, 8, &[count])?;
    Ok(bytes[8..].to_vec())
}

/// Pairs parsed images with labels, rejecting labels `>= classes`.
pub fn assemble(images: &IdxImages, labels: &[u8], classes: usize) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::shape("assemble", images.count, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
        return Err(Error::LabelOutOfRange {
            label: usize::from(bad),
            classes,
        });
    }
    Dataset::new(images.to_matrix(), labels.iter().map(|&l| usize::from(l)).collect())
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Loads an image/label file pair such as `t10k-images-idx3-ubyte` and
/// `t10k-labels-idx1-ubyte` from `dir`.
pub fn load_idx_pair(dir: &Path, prefix: &str) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?)?)?;
    let labels = parse_idx_labels(&fs::read(find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?)?;
    assemble(&images, &labels, 10)
}

/// The 60000-image training file and the 10000-image official test file.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_mnist(dir: &Path) -> Result<Mnist> {
    Ok(Mnist {
        train: load_idx_pair(dir, "train")?,
        test: load_idx_pair(dir, "t10k")?,
    })
}

/// Contiguous split: the first `train` rows, the next `validation`, the next `test`.
pub fn split_contiguous(data: &Dataset, train: usize, validation: usize, test: usize) -> Result<DataSplit> {
    let needed = train + validation + test;
    if needed > data.len() {
        return Err(Error::InvalidConfig(format!(
            "split needs {needed} samples, dataset has {}",
            data.len()
        )));
    }
    Ok(DataSplit {
        train: data.slice(0, train)?,
        validation: data.slice(train, train + validation)?,
        test: data.slice(train + validation, needed)?,
    })
}

/// The 40000/10000/10000 partition of the 60000 training images.
pub fn make_split(mnist: &Mnist) -> Result<DataSplit> {
    split_contiguous(&mnist.train, 40_000, 10_000, 10_000)
}

/// `$SPNN_DATA_DIR` if set, else `data/mnist` under the workspace root.
pub fn default_data_dir() -> PathBuf {
    match std::env::var_os("SPNN_DATA_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Serializes images and labels in IDX form; used for fixtures.
pub fn encode_idx(images: &IdxImages, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&images.pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn fixture() -> (IdxImages, Vec<u8>) {
        let images = IdxImages {
            count: 3,
            rows: 2,
            cols: 2,
            pixels: vec![0, 255, 51, 102, 1, 2, 3, 4, 255, 255, 0, 0],
        };
        (images, vec![7, 0, 9])
    }

    #[test]
    fn parse_roundtrip() {
        let (images, labels) = fixture();
        let (img, lab) = encode_idx(&images, &labels);
        assert_eq!(parse_idx_images(&img).unwrap(), images);
        assert_eq!(parse_idx_labels(&lab).unwrap(), labels);
        let ds = assemble(&images, &labels, 10).unwrap();
        assert_eq!(ds.images.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels, vec![7, 0, 9]);
    }

    #[test]
    fn gzip_accepted() {
        let (images, _) = fixture();
        let (img, _) = encode_idx(&images, &[0, 0, 0]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&img).unwrap();
        assert_eq!(parse_idx_images(&enc.finish().unwrap()).unwrap(), images);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let (images, labels) = fixture();
        let (img, lab) = encode_idx(&images, &labels);
        assert!(matches!(parse_idx_labels(&img), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_images(&lab), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let (images, labels) = fixture();
        let (mut img, _) = encode_idx(&images, &labels);
        img.pop();
        assert!(matches!(parse_idx_images(&img), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_images(&img[..10]), Err(Error::Format { offset: 8, .. })));
        img.extend_from_slice(&[0, 0]);
        assert!(matches!(parse_idx_images(&img), Err(Error::Format { offset: 28, .. })));
    }

    #[test]
    fn overflowing_dimensions() {
        let mut img = Vec::new();
        for v in [IMAGE_MAGIC, u32::MAX, u32::MAX, u32::MAX] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        assert!(matches!(parse_idx_images(&img), Err(Error::Format { .. })));
    }

    #[test]
    fn label_range_and_count() {
        let (images, _) = fixture();
        assert!(matches!(
            assemble(&images, &[1, 10, 2], 10),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
        assert!(assemble(&images, &[1, 2], 10).is_err());
    }

    #[test]
    fn contiguous_split() {
        let ds = Dataset::new(Matrix::from_fn(10, 1, |i, _| i as f32), (0..10).map(|i| i % 3).collect()).unwrap();
        let s = split_contiguous(&ds, 5, 3, 2).unwrap();
        assert_eq!(s.train.images.column(0), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.validation.images.column(0), vec![5.0, 6.0, 7.0]);
        assert_eq!(s.test.labels, vec![2, 0]);
        assert!(split_contiguous(&ds, 5, 5, 1).is_err());
    }
}

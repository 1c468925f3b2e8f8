//! MNIST IDX parsing. Gzipped files are detected by their magic bytes.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataError, Dataset, Split};
use crate::numerics::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = std::fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DataError> {
        if self.offset + n > self.bytes.len() {
            return Err(DataError::Truncated {
                path: self.path.clone(),
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn open<'a>(bytes: &'a [u8], path: &Path, magic: u32) -> Result<Cursor<'a>, DataError> {
    let mut cur = Cursor {
        bytes,
        offset: 0,
        path: path.display().to_string(),
    };
    let found = cur.u32()?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: cur.path,
            found,
            expected: magic,
        });
    }
    Ok(cur)
}

/// Parses an IDX3 image file into a `[n, rows * cols]` tensor scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<(Tensor, usize, usize), DataError> {
    let bytes = read_file(path)?;
    let mut cur = open(&bytes, path, IMAGE_MAGIC)?;
    let n = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let pixels = cur.take(n * rows * cols)?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let t = Tensor::from_vec(&[n, rows * cols], data).expect("length by construction");
    Ok((t, rows, cols))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let bytes = read_file(path)?;
    let mut cur = open(&bytes, path, LABEL_MAGIC)?;
    let n = cur.u32()? as usize;
    Ok(cur.take(n)?.iter().map(|&b| b as usize).collect())
}

pub fn load_mnist(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DataError> {
    let (features, rows, cols) = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if features.rows() != labels.len() {
        return Err(DataError::CountMismatch {
            images: features.rows(),
            labels: labels.len(),
        });
    }
    let classes = 10;
    Dataset::new(features, labels, classes, split)?.with_image_shape(rows, cols)
}

#[cfg(test)]
pub(crate) fn encode_images(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    images.iter().for_each(|im| out.extend_from_slice(im));
    out
}

#[cfg(test)]
pub(crate) fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn parses_small_file_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &encode_images(&[vec![0, 255, 51, 102]], 2, 2));
        let lbl = write(dir.path(), "lbl", &encode_labels(&[7]));
        let ds = load_mnist(&img, &lbl, Split::Train).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.features().data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels(), &[7]);
        assert_eq!(ds.image_shape(), Some((2, 2)));
    }

    #[test]
    fn truncated_file_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = encode_images(&[vec![1, 2, 3, 4], vec![5, 6, 7, 8]], 2, 2);
        bytes.truncate(bytes.len() - 3);
        let img = write(dir.path(), "img", &bytes);
        match load_idx_images(&img) {
            Err(DataError::Truncated { offset, needed, .. }) => {
                assert_eq!(offset, 16);
                assert_eq!(needed, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "lbl", &encode_images(&[vec![0]], 1, 1));
        assert!(matches!(load_idx_labels(&p), Err(DataError::BadMagic { found: 0x803, .. })));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &encode_images(&[vec![0], vec![1]], 1, 1));
        let lbl = write(dir.path(), "lbl", &encode_labels(&[3]));
        assert!(matches!(
            load_mnist(&img, &lbl, Split::Test),
            Err(DataError::CountMismatch { images: 2, labels: 1 })
        ));
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        let dir = tempfile::tempdir().unwrap();
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&encode_labels(&[1, 2, 3])).unwrap();
        let p = write(dir.path(), "lbl.gz", &enc.finish().unwrap());
        assert_eq!(load_idx_labels(&p).unwrap(), vec![1, 2, 3]);
    }
}

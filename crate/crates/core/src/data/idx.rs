//! IDX reader for the MNIST file layout: a big-endian magic word whose third
//! byte is the element type (0x08 = unsigned byte) and fourth byte the
//! number of dimensions, followed by one big-endian u32 per dimension and
//! the raw elements.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LabelBatch;
use crate::numerics::Matrix;

use super::Dataset;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, offset: usize, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message,
        }
    }

    fn be_u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| {
            self.err(
                self.pos,
                "truncated header: expected a 4-byte big-endian integer".into(),
            )
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(slice.try_into().unwrap()))
    }

    fn body(&self, len: usize) -> Result<&[u8]> {
        self.bytes.get(self.pos..self.pos + len).ok_or_else(|| {
            self.err(
                self.bytes.len(),
                format!(
                    "truncated data: expected {len} bytes from offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_magic(c: &mut Cursor<'_>, expected: u32) -> Result<()> {
    let magic = c.be_u32()?;
    if magic != expected {
        return Err(c.err(
            0,
            format!("bad magic {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

/// Images as `N x (rows * cols)` with pixels scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Matrix> {
    let bytes = read(path)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    check_magic(&mut c, IMAGES_MAGIC)?;
    let n = c.be_u32()? as usize;
    let rows = c.be_u32()? as usize;
    let cols = c.be_u32()? as usize;
    let len = n * rows * cols;
    let pixels = c.body(len)?;
    if bytes.len() != c.pos + len {
        return Err(c.err(c.pos + len, "trailing bytes after image data".into()));
    }
    Matrix::from_vec(
        n,
        rows * cols,
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    check_magic(&mut c, LABELS_MAGIC)?;
    let n = c.be_u32()? as usize;
    let labels = c.body(n)?;
    if bytes.len() != c.pos + n {
        return Err(c.err(c.pos + n, "trailing bytes after label data".into()));
    }
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Image/label file pair as a dataset with one-hot labels and ids `0..N`.
///
/// `num_classes` defaults to the largest label plus one.
pub fn read_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let inputs = read_idx_images(images)?;
    let classes = read_idx_labels(labels)?;
    if classes.len() != inputs.rows() {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            offset: 4,
            message: format!(
                "label count {} does not match image count {}",
                classes.len(),
                inputs.rows()
            ),
        });
    }
    let c = num_classes.unwrap_or_else(|| classes.iter().max().map_or(2, |m| (m + 1).max(2)));
    Dataset::with_sequential_ids(inputs, LabelBatch::one_hot(&classes, c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn images_fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 3];
        b.extend([0, 51, 102, 153, 204, 255, 0, 0, 0]);
        b.extend([255, 255, 255, 0, 0, 0, 17, 34, 85]);
        b
    }

    #[test]
    fn two_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &images_fixture());
        let lab = write(dir.path(), "lab", &[0, 0, 8, 1, 0, 0, 0, 2, 7, 1]);
        let d = read_idx(&img, &lab, Some(10)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.input_dim(), 9);
        assert_eq!(d.inputs().row(0)[..6], [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(d.inputs().get(1, 8), 1.0 / 3.0);
        assert_eq!(d.labels().targets(), &[7, 1]);
    }

    #[test]
    fn format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(dir.path(), "empty", &[]);
        match read_idx_images(&empty) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let swapped = write(dir.path(), "swapped", &[0, 0, 8, 1, 0, 0, 0, 0]);
        assert!(matches!(
            read_idx_images(&swapped),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut short = images_fixture();
        short.truncate(20);
        let short = write(dir.path(), "short", &short);
        assert!(matches!(read_idx_images(&short), Err(Error::Format { .. })));

        let img = write(dir.path(), "img", &images_fixture());
        let lab = write(dir.path(), "lab3", &[0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3]);
        let err = read_idx(&img, &lab, None).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }
}

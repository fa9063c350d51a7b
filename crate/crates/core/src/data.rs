//! Labelled image sets and the IDX ubyte reader.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as `[C, H, W]` tensors with values in `[0, 1]`, plus integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    lhs: first.shape().to_vec(),
                    rhs: bad.shape().to_vec(),
                });
            }
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        (
            Dataset {
                images: self.images[..n].to_vec(),
                labels: self.labels[..n].to_vec(),
            },
            Dataset {
                images: self.images[n..].to_vec(),
                labels: self.labels[n..].to_vec(),
            },
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn read_header(path: &Path, magic: u32, dims: usize) -> Result<(Vec<u8>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |detail: &str| Error::Idx {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let found = be_u32(&bytes, 0).ok_or_else(|| malformed("file shorter than its magic number"))?;
    if found != magic {
        return Err(Error::BadMagic {
            expected: format!("{magic:#010x}"),
            actual: format!("{found:#010x}"),
        });
    }
    let sizes = (0..dims)
        .map(|i| be_u32(&bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("truncated header"))?;
    let body = 4 + 4 * dims;
    let expected: usize = sizes.iter().product();
    if bytes.len() - body != expected {
        return Err(malformed(&format!(
            "header declares {expected} bytes of data, file has {}",
            bytes.len() - body
        )));
    }
    Ok((bytes[body..].to_vec(), sizes))
}

/// Reads an IDX3 image file and IDX1 label file. Pixels are scaled to `[0, 1]`
/// and returned as single-channel `[1, rows, cols]` images.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (pixels, dims) = read_header(images.as_ref(), IMAGES_MAGIC, 3)?;
    let (label_bytes, ldims) = read_header(labels.as_ref(), LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if n != ldims[0] {
        return Err(Error::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    let per = rows * cols;
    let images = pixels
        .chunks_exact(per.max(1))
        .take(n)
        .map(|px| {
            Tensor::from_raw(
                vec![1, rows, cols],
                px.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect();
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels)
}

/// Writes a dataset of single-channel images back to IDX files (pixels are
/// rounded to bytes).
pub fn save_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let (rows, cols) = match data.images.first().map(|t| t.shape()) {
        Some([1, r, c]) => (*r, *c),
        Some(s) => return Err(Error::Unsupported(format!("IDX export of images shaped {s:?}"))),
        None => (0, 0),
    };
    let mut buf = Vec::with_capacity(16 + data.len() * rows * cols);
    for v in [IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    for img in &data.images {
        buf.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(images, buf).map_err(|e| Error::io(images, e))?;
    let mut buf = Vec::with_capacity(8 + data.len());
    for v in [LABELS_MAGIC, data.len() as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend(data.labels.iter().map(|&l| l as u8));
    fs::write(labels, buf).map_err(|e| Error::io(labels, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let imgs = (0..3)
            .map(|i| Tensor::new(vec![1, 2, 2], vec![0.0, i as f64 / 255.0, 1.0, 0.5]).unwrap())
            .collect();
        Dataset::new(imgs, vec![0, 1, 2]).unwrap()
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        save_idx(&tiny(), &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.labels(), &[0, 1, 2]);
        assert_eq!(back.image(2).data()[1], 2.0 / 255.0);
        assert_eq!(back.image(0).data()[3], 128.0 / 255.0);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        save_idx(&tiny(), &ip, &lp).unwrap();
        match load_idx(&lp, &lp) {
            Err(Error::BadMagic { expected, actual }) => {
                assert_eq!(expected, "0x00000803");
                assert_eq!(actual, "0x00000801");
            }
            other => panic!("{other:?}"),
        }
        let short = tiny().subset(&[0, 1]);
        let lp2 = dir.path().join("l2");
        save_idx(&short, dir.path().join("unused"), &lp2).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp2),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        ));
        let mut bytes = fs::read(&ip).unwrap();
        bytes.pop();
        fs::write(&ip, bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Idx { .. })));
    }
}

//! Binary PGM (P5) output for heatmaps and input images.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::explain::Heatmap;

/// Percentile used to clip heatmaps before scaling.
pub const CLIP_PERCENTILE: f64 = 0.99;

/// Nearest-rank percentile of `values` (`q` in `(0, 1]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Clips at the 99th percentile, then min-max scales to `0..=255`. A map
/// whose clipped range is empty becomes all zeros.
pub fn heatmap_bytes(h: &Heatmap) -> Vec<u8> {
    let cap = percentile(h.values(), CLIP_PERCENTILE);
    let clipped: Vec<f64> = h.values().iter().map(|&v| v.min(cap)).collect();
    let lo = clipped.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = clipped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0; clipped.len()];
    }
    clipped
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes `h` as an 8-bit binary PGM.
pub fn render_heatmap(h: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(path.as_ref(), h.rows(), h.cols(), &heatmap_bytes(h))
}

/// Writes a single-channel `[1, H, W]` image with values in `[0, 1]`.
pub fn render_image(x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let &[1, rows, cols] = x.shape() else {
        return Err(Error::Unsupported(format!("rendering images shaped {:?}", x.shape())));
    };
    let px: Vec<u8> = x.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_pgm(path.as_ref(), rows, cols, &px)
}

/// Reads an 8-bit binary PGM as a `[1, H, W]` image scaled to `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::InvalidParameter(format!("{}: {detail}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::BadMagic {
            expected: "P5".into(),
            actual: fields[0].clone(),
        });
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (cols, rows, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit PGM files are supported"));
    }
    let body = bytes.get(pos..pos + rows * cols).ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::new(vec![1, rows, cols], body.iter().map(|&b| b as f64 / max as f64).collect())
}

//! Binary weight files.
//!
//! Layout (all little-endian): magic `XHW1`, `u32` layer count, then per layer
//! a `u8` kind tag, `u8` rank, `u32` dims[rank], `f64` weights (row-major),
//! `u32` bias presence flag and, when set, `f64` bias values (one per output
//! channel). Layers without parameters are written with rank 0.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{Architecture, LayerParams, Network};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XHW1";

pub fn save_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for (layer, p) in net.architecture().layers.iter().zip(net.params()) {
        buf.push(layer.tag());
        match &p.weight {
            Some(w) => {
                buf.push(w.shape().len() as u8);
                for &d in w.shape() {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in w.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        match &p.bias {
            Some(b) => {
                buf.extend_from_slice(&1u32.to_le_bytes());
                for v in b.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => buf.extend_from_slice(&0u32.to_le_bytes()),
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    layer: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { layer: self.layer });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(Error::Truncated { layer: self.layer })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a weight file against the expected architecture.
pub fn load_weights(arch: &Architecture, path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            actual: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 4,
        layer: 0,
    };
    let count = r.u32()? as usize;
    if count != arch.layers.len() {
        return Err(Error::WeightShape {
            layer: count.min(arch.layers.len()),
            detail: format!("file has {count} layers, architecture has {}", arch.layers.len()),
        });
    }
    let mut params = Vec::with_capacity(count);
    for (i, layer) in arch.layers.iter().enumerate() {
        r.layer = i;
        let shape_err = |detail: String| Error::WeightShape { layer: i, detail };
        let tag = r.u8()?;
        if tag != layer.tag() {
            return Err(shape_err(format!("kind tag {tag}, expected {}", layer.tag())));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let weight = match (rank, layer.weight_shape()) {
            (0, None) => None,
            (_, Some(want)) if want == dims => {
                let data = r.f64s(dims.iter().product())?;
                Some(Arc::new(Tensor::new(dims, data)?))
            }
            (_, want) => return Err(shape_err(format!("weight dims {dims:?}, expected {want:?}"))),
        };
        let flag = r.u32()?;
        let bias = match (flag, layer.bias_len()) {
            (0, None) => None,
            (1, Some(n)) => Some(Arc::new(Tensor::new(vec![n], r.f64s(n)?)?)),
            (f, want) => {
                return Err(shape_err(format!("bias flag {f}, expected bias of length {want:?}")));
            }
        };
        params.push(LayerParams { weight, bias });
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightShape {
            layer: count,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Network::new(arch.clone(), params)
}

fn arch_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".arch.json");
    PathBuf::from(s)
}

/// Writes the weights plus a `<path>.arch.json` architecture sidecar.
pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_weights(net, path)?;
    let side = arch_sidecar(path);
    let json = serde_json::to_string_pretty(net.architecture())?;
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

/// Loads weights using the `<path>.arch.json` sidecar if present, else the
/// reference architecture.
pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let side = arch_sidecar(path);
    let arch = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::from_str(&text)?
    } else {
        Architecture::reference()
    };
    load_weights(&arch, path)
}

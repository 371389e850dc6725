//! `COCD` dataset files.
//!
//! Little-endian: magic `COCD`, `u32` version (1), `u32` sample count,
//! `u32` sample rank, `u32` sample dims, then every feature as `f64` in
//! row-major order, then one `u32` label per sample.

use std::path::Path;

use super::task::Dataset;
use crate::autodiff::Tensor;
use crate::error::{CocaError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"COCD";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let dims = d.sample_shape();
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 8 * d.features.len() + 4 * d.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(d.len())?.to_le_bytes());
    out.extend_from_slice(&to_u32(dims.len())?.to_le_bytes());
    for &x in dims {
        out.extend_from_slice(&to_u32(x)?.to_le_bytes());
    }
    for v in d.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &d.labels {
        out.extend_from_slice(&to_u32(l)?.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a dataset. The class count is not stored; it is taken as
/// `max(label) + 1` unless `num_classes` is given.
pub fn decode_dataset(bytes: &[u8], num_classes: Option<usize>, path: &Path) -> Result<Dataset> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != DATASET_MAGIC {
        return Err(CocaError::format(path, "not a COCD dataset (bad magic)"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(CocaError::format(
            path,
            format!("unsupported dataset version {version}"),
        ));
    }
    let count = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let dims: Vec<usize> = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<_>>()?;
    let width: usize = dims.iter().product();
    let n = count
        .checked_mul(width)
        .ok_or_else(|| CocaError::format(path, "feature block size overflows"))?;
    let features: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..count)
        .map(|_| r.u32().map(|l| l as usize))
        .collect::<Result<_>>()?;
    r.finish()?;
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    let mut shape = vec![count];
    shape.extend(dims);
    Dataset::new(Tensor::new(shape, features)?, labels, classes)
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(d)?;
    crate::io_util::write_atomic(path, &bytes)
}

pub fn load_dataset(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| CocaError::io(path, e))?;
    decode_dataset(&bytes, num_classes, path)
}

fn to_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| CocaError::invalid(format!("{x} does not fit in u32")))
}

/// Bounds-checked little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                CocaError::format(
                    self.path,
                    format!("truncated file: needed {n} bytes at offset {}", self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.at_end() {
            Ok(())
        } else {
            Err(CocaError::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shiftgen::{gen_source, SourceTask};

    #[test]
    fn round_trip_and_guards() {
        let d = gen_source(&SourceTask::reference(0), 3, 2).unwrap();
        let bytes = encode_dataset(&d).unwrap();
        let p = Path::new("mem");
        assert_eq!(decode_dataset(&bytes, Some(8), p).unwrap(), d);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&bad, None, p).is_err());
        assert!(decode_dataset(&bytes[..bytes.len() - 3], None, p).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode_dataset(&v2, None, p).is_err());
    }

    #[test]
    fn header_layout() {
        let d = gen_source(&SourceTask::reference(0), 1, 2).unwrap();
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(&bytes[..4], b"COCD");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 32);
        assert_eq!(bytes.len(), 20 + 8 * 8 * 32 + 4 * 8);
    }
}

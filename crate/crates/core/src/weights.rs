//! Portable weight file.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "PDF1"
//! u32 format version
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims
//! per tensor, in header order: row-major f32 data
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{PdfError, Result};

pub const MAGIC: &[u8; 4] = b"PDF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().map(|d| *d as usize).product();
        if expected != data.len() {
            return Err(PdfError::DimensionMismatch(format!(
                "tensor {name} declares {dims:?} ({expected} values) but holds {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|d| *d as usize).product()
    }
}

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let data_len: usize = tensors.iter().map(|t| t.data.len() * 4).sum();
    let mut out = Vec::with_capacity(64 + data_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PdfError::MalformedHeader(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(PdfError::MalformedHeader("bad magic".into()));
    }
    let version = cur.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(PdfError::MalformedHeader(format!(
            "unsupported format version {version}"
        )));
    }
    let count = cur.u32("tensor count")? as usize;
    let mut headers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_len = cur.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| PdfError::MalformedHeader(format!("tensor {i} name is not UTF-8")))?
            .to_owned();
        let rank = cur.u8("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32("tensor dims"))
            .collect::<Result<Vec<_>>>()?;
        headers.push((name, dims));
    }

    let declared: usize = headers
        .iter()
        .map(|(_, dims)| dims.iter().map(|d| *d as usize).product::<usize>())
        .sum();
    let remaining = bytes.len() - cur.pos;
    if remaining != declared * 4 {
        return Err(PdfError::DimensionMismatch(format!(
            "header declares {declared} floats but {} bytes ({} floats) follow",
            remaining,
            remaining as f64 / 4.0
        )));
    }

    let mut tensors = Vec::with_capacity(headers.len());
    for (name, dims) in headers {
        let n: usize = dims.iter().map(|d| *d as usize).product();
        let raw = cur.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    Ok(tensors)
}

pub fn write_file(path: &Path, tensors: &[Tensor]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| PdfError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| PdfError::io(path, e))?;
    decode(&bytes)
}

/// SHA-256 of the canonical encoding, hex-encoded.
pub fn checksum(tensors: &[Tensor]) -> String {
    let digest = Sha256::digest(encode(tensors));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Looks up a tensor by name and checks its shape.
pub(crate) fn take_tensor(tensors: &[Tensor], name: &str, dims: &[u32]) -> Result<Vec<f32>> {
    let t = tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| PdfError::DimensionMismatch(format!("missing tensor {name}")))?;
    if t.dims != dims {
        return Err(PdfError::DimensionMismatch(format!(
            "tensor {name} has dims {:?}, architecture expects {dims:?}",
            t.dims
        )));
    }
    Ok(t.data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor::new("a", vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap(),
            Tensor::new("b.bias", vec![1], vec![7.0]).unwrap(),
        ]
    }

    #[test]
    fn encode_decode_identity() {
        let t = sample();
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in t.iter().zip(&back) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.dims, y.dims);
            let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn truncated_header_is_malformed() {
        let bytes = encode(&sample());
        for cut in [0, 3, 6, 11, 14] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(PdfError::MalformedHeader(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn missing_float_is_dimension_mismatch() {
        let t = vec![Tensor::new("f", vec![32], vec![0.5; 32]).unwrap()];
        let bytes = encode(&t);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 4]),
            Err(PdfError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(PdfError::MalformedHeader(_))));
    }

    #[test]
    fn checksum_tracks_content() {
        let a = sample();
        let mut b = sample();
        assert_eq!(checksum(&a), checksum(&b));
        b[1].data[0] = 7.000001;
        assert_ne!(checksum(&a), checksum(&b));
    }
}

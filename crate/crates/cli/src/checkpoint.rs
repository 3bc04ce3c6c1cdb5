//! Named-tensor container used for checkpoints and on-disk datasets.
//!
//! Layout, all integers little-endian: magic `E2EA`, version `u32`, tensor
//! count `u32`, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, `u32` dims, a `u8` dtype tag (0 = f64) and the raw values. A CRC32
//! of every preceding byte closes the file.

use std::path::Path;

use e2ea_core::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"E2EA";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected \"E2EA\"")]
    Magic,
    #[error("unsupported version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed {field}")]
    Malformed { field: &'static str },
    #[error("missing tensor `{0}`")]
    Missing(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Malformed { field })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, FormatError> {
        self.get(name).ok_or_else(|| FormatError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            assert!(name.len() <= u16::MAX as usize, "tensor name too long");
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(DTYPE_F64);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Checks magic, then version, then the CRC, and only then parses.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(FormatError::Magic);
        }
        if bytes.len() >= 8 {
            let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
            if found != VERSION {
                return Err(FormatError::Version { found });
            }
        }
        if bytes.len() < 16 {
            return Err(FormatError::Crc { stored: 0, computed: crc32fast::hash(bytes) });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::Crc { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| FormatError::Malformed { field: "name" })?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            if r.u8("dtype")? != DTYPE_F64 {
                return Err(FormatError::Malformed { field: "dtype" });
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or(FormatError::Malformed { field: "dims" })?;
            let raw = r.take(n, "data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::from_vec(&dims, data)));
        }
        if r.pos != body.len() {
            return Err(FormatError::Malformed { field: "trailing bytes" });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)
    }

    pub fn load(path: &Path) -> Result<Self, crate::CliError> {
        let bytes = std::fs::read(path).map_err(|e| crate::CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| crate::CliError::Format {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Stores a `u64` exactly as two f64 halves.
pub fn u64_tensor(v: u64) -> Tensor {
    Tensor::from_vec(&[2], vec![(v >> 32) as f64, (v & 0xFFFF_FFFF) as f64])
}

pub fn tensor_u64(t: &Tensor, field: &'static str) -> Result<u64, FormatError> {
    match t.data() {
        &[hi, lo] if is_u32(hi) && is_u32(lo) => Ok(((hi as u64) << 32) | lo as u64),
        _ => Err(FormatError::Malformed { field }),
    }
}

fn is_u32(v: f64) -> bool {
    v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0
}

pub fn scalar(v: f64) -> Tensor {
    Tensor::from_vec(&[1], vec![v])
}

pub fn tensor_usize(t: &Tensor, field: &'static str) -> Result<usize, FormatError> {
    match t.data() {
        &[v] if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) => Ok(v as usize),
        _ => Err(FormatError::Malformed { field }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.push("a", Tensor::from_vec(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]));
        c.push("b.bias", Tensor::from_vec(&[1], vec![f64::NAN]));
        c.push("empty", Tensor::from_vec(&[0, 4], vec![]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.tensors.len(), 3);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.dims(), t2.dims());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"E2EA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 2);
    }

    #[test]
    fn errors_name_the_field() {
        let good = sample().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(Container::from_bytes(&bad), Err(FormatError::Magic));
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(Container::from_bytes(&bad), Err(FormatError::Version { found: 9 }));
        let truncated = &good[..good.len() - 5];
        assert!(matches!(Container::from_bytes(truncated), Err(FormatError::Crc { .. })));
        assert!(matches!(Container::from_bytes(&good[..10]), Err(FormatError::Crc { .. })));
        assert!(Container::from_bytes(&good[..10]).unwrap_err().to_string().contains("CRC"));
    }

    #[test]
    fn u64_halves() {
        for v in [0u64, 1, u32::MAX as u64, u64::MAX, 0xDEAD_BEEF_0000_0001] {
            assert_eq!(tensor_u64(&u64_tensor(v), "x").unwrap(), v);
        }
    }
}

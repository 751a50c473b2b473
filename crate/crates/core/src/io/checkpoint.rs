//! `QDCK` tensor container.
//!
//! ```text
//! magic    "QDCK"
//! version  u32 LE (currently 1)
//! count    u32 LE
//! count × {
//!     name_len u32 LE, name (UTF-8)
//!     rank     u32 LE, dims (u64 LE each)
//!     dtype    u8 (0 = f32, 1 = u8)
//!     payload  little-endian elements
//! }
//! crc32    u32 LE over every preceding byte
//! ```
//!
//! Files are written to a temporary sibling and renamed into place.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::netcore::Tensor;

pub const MAGIC: &[u8; 4] = b"QDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            dims: t.shape().to_vec(),
            data: TensorData::F32(t.data().to_vec()),
        }
    }

    pub fn scalars(name: impl Into<String>, v: Vec<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            dims: vec![v.len()],
            data: TensorData::F32(v),
        }
    }

    pub fn bytes(name: impl Into<String>, v: Vec<u8>) -> Self {
        NamedTensor {
            name: name.into(),
            dims: vec![v.len()],
            data: TensorData::U8(v),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        match &self.data {
            TensorData::F32(v) => Tensor::new(self.dims.clone(), v.clone()),
            TensorData::U8(_) => Err(Error::Checkpoint(CheckpointError::Malformed(format!(
                "{} holds bytes, expected f32",
                self.name
            )))),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::Checkpoint(CheckpointError::Malformed(format!(
                "{} holds bytes, expected f32",
                self.name
            )))),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Checkpoint(CheckpointError::Malformed(format!(
                "{} holds f32, expected bytes",
                self.name
            )))),
        }
    }
}

/// Serializes `tensors` in order.
pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(CheckpointError::DuplicateName(t.name.clone()).into());
        }
        let count: usize = t.dims.iter().product();
        if count != t.data.len() {
            return Err(Error::Shape(format!(
                "{}: dims {:?} hold {} values, got {}",
                t.name,
                t.dims,
                count,
                t.data.len()
            )));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(t.data.dtype());
        match &t.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!("while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a container, verifying magic, version and checksum first.
pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("file shorter than magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..4].try_into().unwrap()));
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated(
            "file shorter than header and crc".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnknownVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dims")?)
                .map_err(|_| CheckpointError::Malformed(format!("{name}: dimension too large")))?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: size overflow")))?;
            dims.push(d);
        }
        let dtype = r.take(1, "dtype")?[0];
        let data = match dtype {
            0 => {
                let raw = r.take(
                    n.checked_mul(4).ok_or_else(|| {
                        CheckpointError::Malformed(format!("{name}: size overflow"))
                    })?,
                    "payload",
                )?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                        .collect(),
                )
            }
            1 => TensorData::U8(r.take(n, "payload")?.to_vec()),
            d => return Err(CheckpointError::UnknownDtype(d)),
        };
        out.push(NamedTensor { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after last tensor",
            body.len() - r.pos
        )));
    }
    Ok(out)
}

/// Writes `bytes` to `path` atomically (temporary sibling, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Param(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    write_atomic(path, &encode(tensors)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Looks up a tensor by name.
pub fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "a".into(),
                dims: vec![2, 2],
                data: TensorData::F32(vec![-0.0, f32::MIN_POSITIVE / 4.0, f32::NAN, 1.5]),
            },
            NamedTensor::bytes("cfg", b"bits_w=4\n".to_vec()),
        ]
    }

    fn bits_equal(a: &[NamedTensor], b: &[NamedTensor]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.name == y.name
                    && x.dims == y.dims
                    && match (&x.data, &y.data) {
                        (TensorData::F32(p), TensorData::F32(q)) => {
                            p.iter().zip(q).all(|(u, v)| u.to_bits() == v.to_bits())
                        }
                        (TensorData::U8(p), TensorData::U8(q)) => p == q,
                        _ => false,
                    }
            })
    }

    #[test]
    fn empty_container() {
        let b = encode(&[]).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(&b[..4], b"QDCK");
        assert!(decode(&b).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let b = encode(&t).unwrap();
        assert!(bits_equal(&decode(&b).unwrap(), &t));
        assert_eq!(encode(&decode(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn every_payload_byte_is_checked() {
        let b = encode(&sample()[..1]).unwrap();
        for i in 0..b.len() - 4 {
            let mut c = b.clone();
            c[i] ^= 0x01;
            let err = decode(&c).unwrap_err();
            match i {
                0..=3 => assert!(matches!(err, CheckpointError::BadMagic(_))),
                4..=7 => assert!(matches!(err, CheckpointError::UnknownVersion(_))),
                _ => assert!(
                    matches!(err, CheckpointError::CrcMismatch { .. }),
                    "byte {i}"
                ),
            }
        }
    }

    #[test]
    fn distinct_errors() {
        let b = encode(&sample()).unwrap();
        assert!(matches!(
            decode(&b[..b.len() - 9]),
            Err(CheckpointError::CrcMismatch { .. })
        ));
        assert!(matches!(
            decode(&b[..10]),
            Err(CheckpointError::Truncated(_))
        ));
        // Truncated body with a recomputed checksum is reported as truncation.
        let mut body = b[..b.len() - 10].to_vec();
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&body), Err(CheckpointError::Truncated(_))));
        let dup = vec![sample()[0].clone(), sample()[0].clone()];
        assert!(encode(&dup).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.qdck");
        save_checkpoint(&p, &sample()).unwrap();
        assert!(bits_equal(&load_checkpoint(&p).unwrap(), &sample()));
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
        assert!(matches!(
            load_checkpoint(&dir.path().join("none")),
            Err(Error::Io { .. })
        ));
    }
}

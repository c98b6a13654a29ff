//! Little-endian tensor container shared by checkpoints and masks.
//!
//! ```text
//! magic[4] | version u32 | meta_len u32 | meta (UTF-8 JSON)
//! | n_tensors u32 | { name_len u32 | name | rank u32 | dims u32[rank] | payload }*
//! ```
//!
//! Checkpoints (`PMLC`) carry float32 payloads, masks (`PMSK`) uint8.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PMLC";
pub const MASK_MAGIC: [u8; 4] = *b"PMSK";
pub const FORMAT_VERSION: u32 = 1;

// Guards against allocating absurd buffers from corrupt headers.
const MAX_STRING: u32 = 1 << 26;
const MAX_RANK: u32 = 8;

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
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub metadata: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.magic)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata)?;
        write_bytes(w, &meta)?;
        write_u32(w, self.tensors.len())?;
        for t in &self.tensors {
            let expected: usize = t.dims.iter().product();
            if expected != t.data.len() {
                return Err(Error::Format(format!(
                    "tensor {} has {} values for dims {:?}",
                    t.name,
                    t.data.len(),
                    t.dims
                )));
            }
            match (&t.data, &self.magic) {
                (TensorData::F32(_), &CHECKPOINT_MAGIC) | (TensorData::U8(_), &MASK_MAGIC) => {}
                _ => return Err(Error::Format(format!("tensor {} has the wrong dtype for this container", t.name))),
            }
            write_bytes(w, t.name.as_bytes())?;
            write_u32(w, t.dims.len())?;
            for &d in &t.dims {
                write_u32(w, d)?;
            }
            match &t.data {
                TensorData::F32(v) => {
                    let mut bytes = Vec::with_capacity(v.len() * 4);
                    for x in v {
                        bytes.extend_from_slice(&x.to_le_bytes());
                    }
                    w.write_all(&bytes)?;
                }
                TensorData::U8(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: [u8; 4]) -> Result<Self> {
        let mut r = bytes;
        let c = Self::read_from(&mut r, expected_magic)?;
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(c)
    }

    pub fn read_from<R: Read>(r: &mut R, expected_magic: [u8; 4]) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != expected_magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expected_magic)
            )));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let meta = read_bytes(r)?;
        let metadata: serde_json::Value = serde_json::from_slice(&meta)?;
        let n = read_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)?;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("tensor {name}: rank {rank} too large")));
            }
            let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name}: size overflow")))?;
            let data = if magic == MASK_MAGIC {
                let mut v = vec![0u8; count];
                read_exact(r, &mut v)?;
                TensorData::U8(v)
            } else {
                let byte_len = count
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format(format!("tensor {name}: size overflow")))?;
                let mut raw = vec![0u8; byte_len];
                read_exact(r, &mut raw)?;
                TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
            };
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Self {
            magic,
            metadata,
            tensors,
        })
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    write_u32(w, b.len())?;
    w.write_all(b)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated container".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(r)?;
    if len > MAX_STRING {
        return Err(Error::Format(format!("length prefix {len} too large")));
    }
    let mut v = vec![0u8; len as usize];
    read_exact(r, &mut v)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            magic: CHECKPOINT_MAGIC,
            metadata: serde_json::json!({"epoch": 3}),
            tensors: vec![Tensor {
                name: "W1".into(),
                dims: vec![2, 3],
                data: TensorData::F32(vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.25]),
            }],
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PMLC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + meta_len], br#"{"epoch":3}"#);
        let rest = &bytes[12 + meta_len..];
        assert_eq!(&rest[..4], &1u32.to_le_bytes());
        assert_eq!(&rest[4..8], &2u32.to_le_bytes());
        assert_eq!(&rest[8..10], b"W1");
        assert_eq!(&rest[10..14], &2u32.to_le_bytes());
        assert_eq!(&rest[22..26], &1.0f32.to_le_bytes());
        assert_eq!(rest.len(), 22 + 6 * 4);
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap(), CHECKPOINT_MAGIC).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes, MASK_MAGIC).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        assert!(matches!(Container::from_bytes(&wrong_version, CHECKPOINT_MAGIC), Err(Error::Format(_))));
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 1], CHECKPOINT_MAGIC),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn dtype_must_match_magic() {
        let mut c = sample();
        c.magic = MASK_MAGIC;
        assert!(c.to_bytes().is_err());
    }
}

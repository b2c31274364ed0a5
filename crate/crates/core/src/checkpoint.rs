//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DSGANCKP" | u32 version | [u8; 32] config hash
//! u64 header length | JSON header
//! u32 tensor count | per tensor, sorted by name:
//!     u32 name length | name | u8 dtype (0 = f32, 1 = f64)
//!     u8 rank | i64 dims[rank] | data
//! [u8; 32] SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::net;

pub const MAGIC: &[u8; 8] = b"DSGANCKP";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint<H> {
    pub config_hash: [u8; 32],
    pub header: H,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<H: Serialize + DeserializeOwned> Checkpoint<H> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let dtype = match t.kind() {
                Kind::Float => 0u8,
                Kind::Double => 1u8,
                other => {
                    return Err(Error::Checkpoint(format!("{name}: unsupported kind {other:?}")))
                }
            };
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype);
            let dims = t.size();
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&net::tensor_bytes(t)?);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {VERSION}"
            )));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let header_len = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_owned();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.i64()).collect::<Result<Vec<_>>>()?;
            if dims.iter().any(|&d| d < 0) {
                return Err(Error::Checkpoint(format!("{name}: negative dimension")));
            }
            let numel: usize = dims.iter().map(|&d| d as usize).product();
            let t = match dtype {
                0 => {
                    let v: Vec<f32> = r
                        .take(numel * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_slice(&v)
                }
                1 => {
                    let v: Vec<f64> = r
                        .take(numel * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_slice(&v)
                }
                d => return Err(Error::Checkpoint(format!("{name}: unknown dtype {d}"))),
            };
            tensors.insert(name, t.view(dims.as_slice()));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            config_hash,
            header,
            tensors,
        })
    }

    /// Write via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint under the final name.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Header {
        step: u64,
        note: String,
    }

    fn sample() -> Checkpoint<Header> {
        let mut tensors = BTreeMap::new();
        tensors.insert("b".to_owned(), Tensor::from_slice(&[1.5f64, -2.0]).view([2, 1]));
        tensors.insert("a".to_owned(), Tensor::from_slice(&[0.25f32, 3.0, 4.0]));
        tensors.insert("s".to_owned(), Tensor::from_slice(&[7.0f32]).view([] as [i64; 0]));
        Checkpoint {
            config_hash: [9; 32],
            header: Header {
                step: 12,
                note: "x".into(),
            },
            tensors,
        }
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::<Header>::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, sample().header);
        assert_eq!(back.config_hash, [9; 32]);
        assert_eq!(back.tensors["b"].size(), vec![2, 1]);
        assert_eq!(back.tensors["b"].kind(), Kind::Double);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            Checkpoint::<Header>::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::<Header>::from_bytes(b"DSGANCKP").is_err());
        assert!(Checkpoint::<Header>::from_bytes(&[0u8; 100]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        let back = Checkpoint::<Header>::load(&p).unwrap();
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
        assert!(matches!(
            Checkpoint::<Header>::load(dir.path().join("missing.ckpt")),
            Err(Error::Io { .. })
        ));
    }
}

//! Binary checkpoint container for a [`ParamTree`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "UEDCKPT\0"
//! u32     format version
//! u32     header length, then that many bytes of JSON metadata
//! u64     optimizer step
//! u32     tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, u32 per dimension
//!   f32 values, f32 first moments, f32 second moments
//! [u8;32] SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::params::{Param, ParamTree, Precision};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UEDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(tree: &ParamTree, header: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + tree.num_scalars() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(header).expect("json value serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&tree.step().to_le_bytes());
    out.extend_from_slice(&(tree.len() as u32).to_le_bytes());
    for p in tree.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for buf in [p.value.data(), &p.m[..], &p.v[..]] {
            for &x in buf {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Load("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamTree, Value)> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Load("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Load("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = r.u32()? as usize;
    let header: Value =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Load(format!("bad checkpoint header: {e}")))?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut tree = ParamTree::with_precision(Precision::F32);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Load("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = r.f32s(n)?;
        let m = r.f32s(n)?;
        let v = r.f32s(n)?;
        let value = Tensor::new(shape, values).map_err(|e| Error::Load(format!("`{name}`: {e}")))?;
        tree.push_raw(Param {
            name,
            value,
            grad: vec![0.0; n],
            m,
            v,
        })?;
    }
    if r.pos != body.len() {
        return Err(Error::Load("trailing bytes in checkpoint".into()));
    }
    tree.set_step(step);
    Ok((tree, header))
}

pub fn save(path: &Path, tree: &ParamTree, header: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(tree, header))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamTree, Value)> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

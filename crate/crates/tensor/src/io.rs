//! Binary tensor and checkpoint files.
//!
//! Raw tensor: `b"TSW1"`, `u32` rank, `rank` x `u32` dims, then the
//! little-endian f32 payload in row-major order.
//!
//! Checkpoint: `b"TSWC"`, `u32` manifest length, a JSON manifest mapping each
//! tensor name to `{offset, shape}`, then the raw tensor records
//! concatenated. Offsets count from the first byte after the manifest.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"TSW1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSWC";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let bytes = buf
        .get(*pos..*pos + 4)
        .ok_or_else(|| TensorError::Format("truncated header".into()))?;
    *pos += 4;
    Ok(u32::from_le_bytes(bytes.try_into().unwrap()))
}

/// Decodes one raw tensor starting at `buf[0]`; returns it with the number
/// of bytes consumed.
pub fn decode_tensor(buf: &[u8]) -> Result<(Tensor, usize)> {
    if buf.len() < 8 || &buf[..4] != TENSOR_MAGIC {
        return Err(TensorError::Format("bad tensor magic".into()));
    }
    let mut pos = 4;
    let rank = read_u32(buf, &mut pos)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(buf, &mut pos)? as usize);
    }
    let n: usize = shape.iter().product();
    let payload = buf
        .get(pos..pos + 4 * n)
        .ok_or_else(|| TensorError::Format(format!("payload truncated for shape {shape:?}")))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::from_vec(data, &shape)?, pos + 4 * n))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let buf = std::fs::read(path)?;
    let (t, used) = decode_tensor(&buf)?;
    if used != buf.len() {
        return Err(TensorError::Format("trailing bytes after tensor".into()));
    }
    Ok(t)
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub offset: u64,
    pub shape: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut manifest = BTreeMap::new();
    let mut blobs = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let blob = encode_tensor(t);
        let prev = manifest.insert(
            name.clone(),
            ManifestEntry {
                offset,
                shape: t.shape().to_vec(),
            },
        );
        if prev.is_some() {
            return Err(TensorError::Format(format!("duplicate tensor name {name}")));
        }
        offset += blob.len() as u64;
        blobs.push(blob);
    }
    let json = serde_json::to_vec(&manifest).map_err(|e| TensorError::Format(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for b in blobs {
        w.write_all(&b)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(TensorError::Format("bad checkpoint magic".into()));
    }
    let mut pos = 4;
    let mlen = read_u32(&buf, &mut pos)? as usize;
    let mjson = buf
        .get(pos..pos + mlen)
        .ok_or_else(|| TensorError::Format("manifest truncated".into()))?;
    let manifest: BTreeMap<String, ManifestEntry> =
        serde_json::from_slice(mjson).map_err(|e| TensorError::Format(e.to_string()))?;
    let data = &buf[pos + mlen..];
    let mut out = BTreeMap::new();
    for (name, entry) in manifest {
        let start = entry.offset as usize;
        let slice = data
            .get(start..)
            .ok_or_else(|| TensorError::Format(format!("offset out of range for {name}")))?;
        let (t, _) = decode_tensor(slice)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(TensorError::Format(format!("shape mismatch for {name}")));
        }
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    read_checkpoint(std::fs::File::open(path)?)
}

//! Flat binary container for named weight tensors. Little-endian throughout:
//! magic "DMSW", format version, record count, then one record per tensor
//! (name, dtype tag, rank, dims, payload), closed by a CRC32 of everything
//! before it. Round trips are bit-exact for both element types.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Element};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"DMSW";
const VERSION: u16 = 1;

/// Serialize named tensors in visit order. Names must be unique and short
/// enough for a u16 length prefix.
pub fn encode_weights<T: Element>(entries: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    for (i, (name, _)) in entries.iter().enumerate() {
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("name '{name}' is too long")));
        }
        if entries[..i].iter().any(|(prev, _)| prev == name) {
            return Err(Error::InvalidConfig(format!("duplicate weight name '{name}'")));
        }
    }
    if entries.len() > u32::MAX as usize {
        return Err(Error::InvalidConfig("too many weight records".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        if tensor.dims().len() > u8::MAX as usize {
            return Err(Error::InvalidConfig(format!("tensor '{name}' rank too large")));
        }
        out.push(tensor.dims().len() as u8);
        for &d in tensor.dims() {
            if d > u32::MAX as usize {
                return Err(Error::InvalidConfig(format!("tensor '{name}' dim too large")));
            }
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match T::DTYPE {
            Dtype::F32 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::CorruptWeights(format!(
                "truncated at byte {} of {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse a weight container, verifying the checksum, the format version, and
/// that every record carries the expected element type.
pub fn decode_weights<T: Element>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
        return Err(Error::CorruptWeights(format!(
            "{} bytes is too short for a weight container",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::CorruptWeights(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    let mut r = Reader { bytes: body, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptWeights("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::CorruptWeights(format!(
            "unsupported container version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries: Vec<(String, Tensor<T>)> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptWeights("weight name is not UTF-8".into()))?
            .to_string();
        if entries.iter().any(|(prev, _)| *prev == name) {
            return Err(Error::CorruptWeights(format!("duplicate weight name '{name}'")));
        }
        let tag = r.take(1)?[0];
        if tag != T::DTYPE.tag() {
            return Err(Error::CorruptWeights(format!(
                "record '{name}' has dtype tag {tag}, expected {}",
                T::DTYPE.tag()
            )));
        }
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| {
                Error::CorruptWeights(format!("record '{name}' dims overflow"))
            })?;
            dims.push(d);
        }
        let width = T::DTYPE.byte_width();
        let payload = r.take(numel.checked_mul(width).ok_or_else(|| {
            Error::CorruptWeights(format!("record '{name}' payload overflow"))
        })?)?;
        let mut data = Vec::with_capacity(numel);
        match T::DTYPE {
            Dtype::F32 => {
                for c in payload.chunks_exact(4) {
                    data.push(T::from_f64(
                        f32::from_le_bytes(c.try_into().unwrap()) as f64
                    ));
                }
            }
            Dtype::F64 => {
                for c in payload.chunks_exact(8) {
                    data.push(T::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
                }
            }
        }
        let tensor = Tensor::from_vec(&dims, data)
            .map_err(|e| Error::CorruptWeights(format!("record '{name}': {e}")))?;
        entries.push((name, tensor));
    }
    if r.at != body.len() {
        return Err(Error::CorruptWeights(format!(
            "{} trailing bytes after the last record",
            body.len() - r.at
        )));
    }
    Ok(entries)
}

pub fn save_weights<T: Element>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let bytes = encode_weights(entries)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_weights<T: Element>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = std::fs::read(path)?;
    decode_weights(&bytes)
}

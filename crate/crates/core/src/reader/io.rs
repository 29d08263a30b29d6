//! Single-file model format: a JSON metadata block followed by a named
//! tensor table of contents and raw little-endian `f64` data.
//!
//! ```text
//! "BTRM" | version u16 | meta_len u32 | meta (JSON: config, vocab)
//! tensor_count u32 | per tensor: name_len u16, name, rank u8, dims u32 * rank, offset u64
//! tensor data (f64 LE, row-major, at the listed absolute offsets)
//! checksum u64 (FNV-1a 64 over every preceding byte)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ReaderConfig;
use super::model::Reader;
use super::params::ReaderParams;
use crate::checksum::fnv1a64;
use crate::codec::{write_atomic, Cursor};
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"BTRM";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ReaderConfig,
    vocab: Vocab,
}

/// A reader together with the vocabulary its token ids refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub reader: Reader,
    pub vocab: Vocab,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.vocab.len() > self.reader.config.vocab_size {
            return Err(Error::invalid("vocabulary larger than the model's vocab_size"));
        }
        let meta = serde_json::to_vec(&Meta {
            config: self.reader.config.clone(),
            vocab: self.vocab.clone(),
        })
        .map_err(|e| Error::invalid(format!("serializing model metadata: {e}")))?;
        let tensors = self.reader.params.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let toc_len: usize = tensors
            .iter()
            .map(|(info, _)| 2 + info.name.len() + 1 + 4 * info.shape.len() + 8)
            .sum();
        let mut offset = (out.len() + toc_len) as u64;
        for (info, data) in &tensors {
            out.extend_from_slice(&(info.name.len() as u16).to_le_bytes());
            out.extend_from_slice(info.name.as_bytes());
            out.push(info.shape.len() as u8);
            for &dim in &info.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * data.len() as u64;
        }
        for (_, data) in &tensors {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptModel(m.to_string());
        let trunc = |_| corrupt("truncated");
        if bytes.len() < 4 + 2 + 4 + 4 + 8 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if &body[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if fnv1a64(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut c = Cursor::new(body);
        c.take(4).map_err(trunc)?;
        let version = c.u16().map_err(trunc)?;
        if version != VERSION {
            return Err(Error::CorruptModel(format!("unsupported version {version}")));
        }
        let meta_len = c.u32().map_err(trunc)? as usize;
        let meta: Meta = serde_json::from_slice(c.take(meta_len).map_err(trunc)?)
            .map_err(|e| Error::CorruptModel(format!("metadata: {e}")))?;
        meta.config
            .validate()
            .map_err(|e| Error::CorruptModel(format!("config: {e}")))?;
        let mut params = ReaderParams::init(&ReaderConfig { seed: 0, ..meta.config.clone() });
        let expected: Vec<_> = params.tensors().into_iter().map(|(i, _)| i).collect();
        let count = c.u32().map_err(trunc)? as usize;
        if count != expected.len() {
            return Err(Error::CorruptModel(format!(
                "expected {} tensors, found {count}",
                expected.len()
            )));
        }
        let mut offsets = Vec::with_capacity(count);
        for info in &expected {
            let name_len = c.u16().map_err(trunc)? as usize;
            let name = std::str::from_utf8(c.take(name_len).map_err(trunc)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rank = c.u8().map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u32().map_err(trunc)? as usize);
            }
            if name != info.name || shape != info.shape {
                return Err(Error::CorruptModel(format!(
                    "tensor {name} {shape:?} does not match expected {} {:?}",
                    info.name, info.shape
                )));
            }
            offsets.push(c.u64().map_err(trunc)?);
        }
        let data_start = c.position() as u64;
        for (dst, off) in params.tensors_mut().into_iter().zip(offsets) {
            let end = off.checked_add(8 * dst.len() as u64);
            if off < data_start || end.map_or(true, |e| e > body.len() as u64) {
                return Err(corrupt("tensor data out of bounds"));
            }
            let src = &body[off as usize..];
            for (i, v) in dst.iter_mut().enumerate() {
                *v = f64::from_le_bytes(src[8 * i..8 * i + 8].try_into().expect("8 bytes"));
            }
        }
        let reader = Reader::from_parts(meta.config, params)?;
        reader
            .binarize_weights()
            .map_err(|e| Error::CorruptModel(format!("binarization norm: {e}")))?;
        Ok(Self { reader, vocab: meta.vocab })
    }
}

pub fn write_model(model: &ModelFile, path: &Path, overwrite: bool) -> Result<()> {
    write_atomic(path, &model.to_bytes()?, overwrite)
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelFile::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelFile {
        let cfg = ReaderConfig { d: 8, heads: 2, d_ff: 8, vocab_size: 10, ..Default::default() };
        ModelFile {
            reader: Reader::new(cfg).unwrap(),
            vocab: Vocab::new(["a", "b"]),
        }
    }

    #[test]
    fn round_trip() {
        let m = model();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(ModelFile::from_bytes(&bytes).unwrap(), m);
        assert_eq!(bytes, ModelFile::from_bytes(&bytes).unwrap().to_bytes().unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = model().to_bytes().unwrap();
        for i in (0..bytes.len()).step_by(97) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(matches!(ModelFile::from_bytes(&b), Err(Error::CorruptModel(_))));
        }
        for n in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(ModelFile::from_bytes(&bytes[..n]), Err(Error::CorruptModel(_))));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.btrm");
        let m = model();
        write_model(&m, &path, false).unwrap();
        assert!(matches!(write_model(&m, &path, false), Err(Error::AlreadyExists(_))));
        assert_eq!(read_model(&path).unwrap(), m);
    }
}

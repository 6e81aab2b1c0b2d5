//! Binary checkpoint format.
//!
//! ```text
//! "TPGS" | version u32
//! repeated: name_len u32 | name (UTF-8) | rank u32 | dims u64 x rank | f32 x numel
//! metadata: u32::MAX marker | json_len u64 | JSON text
//! ```
//!
//! All integers and floats are little-endian. Records appear in store order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Element, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPGS";
pub const VERSION: u32 = 1;
const META_MARKER: u32 = u32::MAX;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

pub fn write_checkpoint<T: Element, W: Write>(mut w: W, store: &ParamStore<T>, meta: &CheckpointMeta) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor.numel() * 4);
        for v in p.tensor.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    let json = serde_json::to_vec(meta)?;
    w.write_all(&META_MARKER.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint<T: Element>(path: impl AsRef<Path>, store: &ParamStore<T>, meta: &CheckpointMeta) -> Result<()> {
    let f = File::create(path)?;
    write_checkpoint(BufWriter::new(f), store, meta)
}

struct Cursor<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Corrupt {
            offset: self.pos,
            reason: format!("reading {what}: {e}"),
        })?;
        self.pos += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: self.pos,
            reason: reason.into(),
        }
    }
}

const MAX_RANK: u32 = 8;
const MAX_NUMEL: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut c = Cursor { inner: r, pos: 0 };
    if c.bytes(4, "magic")? != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            reason: "bad magic, not a checkpoint".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(c.corrupt(format!("unsupported checkpoint version {version}")));
    }
    let mut records = Vec::new();
    loop {
        let name_len = c.u32("record header")?;
        if name_len == META_MARKER {
            break;
        }
        let name = String::from_utf8(c.bytes(name_len as usize, "record name")?)
            .map_err(|_| c.corrupt("record name is not UTF-8"))?;
        let rank = c.u32("rank")?;
        if rank > MAX_RANK {
            return Err(c.corrupt(format!("implausible rank {rank} for `{name}`")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(c.u64("dims")?);
        }
        let numel = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).filter(|&n| n <= MAX_NUMEL);
        let numel = numel.ok_or_else(|| c.corrupt(format!("implausible shape {dims:?} for `{name}`")))? as usize;
        let raw = c.bytes(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        records.push((name, Tensor::new(&shape, data)?));
    }
    let len = c.u64("metadata length")?;
    if len > 1 << 24 {
        return Err(c.corrupt("metadata block too large"));
    }
    let json = c.bytes(len as usize, "metadata")?;
    let meta = serde_json::from_slice(&json).map_err(|e| c.corrupt(format!("metadata JSON: {e}")))?;
    Ok(Checkpoint { records, meta })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let f = File::open(path)?;
    read_checkpoint(BufReader::new(f))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fills every entry of `store` from the record named `source(entry_name)`.
    /// Fails on the first store entry with no matching record.
    pub fn load_into_mapped<T: Element>(&self, store: &mut ParamStore<T>, source: impl Fn(&str) -> String) -> Result<()> {
        let index: HashMap<&str, &Tensor<f32>> = self.records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let src_name = source(&name);
            let src = index.get(src_name.as_str()).ok_or(Error::MissingParam(src_name.clone()))?;
            let dst = store.tensor_mut(id);
            if dst.shape() != src.shape() {
                return Err(Error::Shape {
                    op: "load checkpoint",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = T::of(s as f64);
            }
        }
        Ok(())
    }

    pub fn load_into<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.load_into_mapped(store, str::to_string)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add_weight("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0)).unwrap();
        s.add_buffer("a.running_var", Tensor::full(&[3], 1.0)).unwrap();
        s.add_weight("b", Tensor::scalar(7.25)).unwrap();
        s
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample_store(), &CheckpointMeta::default()).unwrap();
        assert_eq!(&buf[..4], b"TPGS");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 8); // "a.weight"
        assert_eq!(&buf[12..20], b"a.weight");
        assert_eq!(u32::from_le_bytes(buf[20..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[24..32].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[32..40].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(buf[40..44].try_into().unwrap()), -1.0);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let store = sample_store();
        let meta = CheckpointMeta {
            seed: 7,
            step: 42,
            config_hash: "abc".into(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, &meta).unwrap();
        let ck = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(ck.meta, meta);
        let mut other = sample_store();
        other.iter_mut().for_each(|(_, p)| p.tensor.data_mut().fill(0.0));
        ck.load_into(&mut other).unwrap();
        assert!(store.bitwise_eq(&other));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample_store(), &CheckpointMeta::default()).unwrap();
        let err = read_checkpoint(&buf[..30]).unwrap_err();
        match err {
            Error::Corrupt { offset, .. } => assert_eq!(offset, 24),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_entry_is_named() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample_store(), &CheckpointMeta::default()).unwrap();
        let ck = read_checkpoint(&buf[..]).unwrap();
        let mut bigger = sample_store();
        bigger.add_weight("c.weight", Tensor::zeros(&[1])).unwrap();
        match ck.load_into(&mut bigger).unwrap_err() {
            Error::MissingParam(n) => assert_eq!(n, "c.weight"),
            e => panic!("unexpected {e}"),
        }
    }
}

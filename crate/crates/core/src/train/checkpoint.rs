//! Portable binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSIA"  u32 version  u32 entry_count
//! per entry:
//!   u32 name_len  name (UTF-8)  u8 dtype  u32 rank  u64 extent × rank  values
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = u64, 3 = u8. Entries keep insertion
//! order, so saving a loaded checkpoint reproduces the file byte-for-byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSIA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, data: Vec<u64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Value {
    fn tag(&self) -> u8 {
        match self {
            Value::F32(_) => 0,
            Value::F64(_) => 1,
            Value::U64 { .. } => 2,
            Value::U8 { .. } => 3,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Value::F32(t) => t.shape(),
            Value::F64(t) => t.shape(),
            Value::U64 { shape, .. } | Value::U8 { shape, .. } => shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Value)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces an existing entry in place, else appends.
    pub fn insert(&mut self, name: impl Into<String>, value: Value) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert_text(&mut self, name: &str, text: &str) {
        let data = text.as_bytes().to_vec();
        self.insert(
            name,
            Value::U8 {
                shape: vec![data.len()],
                data,
            },
        );
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.get(name) {
            Some(Value::U8 { data, .. }) => String::from_utf8(data.clone())
                .map_err(|_| Error::Checkpoint {
                    offset: 0,
                    message: format!("entry {name} is not UTF-8"),
                }),
            _ => Err(missing(name)),
        }
    }

    pub fn insert_u64s(&mut self, name: &str, values: &[u64]) {
        self.insert(
            name,
            Value::U64 {
                shape: vec![values.len()],
                data: values.to_vec(),
            },
        );
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Value::U64 { data, .. }) => Ok(data),
            _ => Err(missing(name)),
        }
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(Value::F32(t)) => Ok(t),
            _ => Err(missing(name)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, value) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(value.tag());
            let shape = value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match value {
                Value::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Value::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Value::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Value::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                message: "bad magic, not an SSIA checkpoint".into(),
            });
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                offset: at,
                message: format!("unsupported format version {version} (this build reads {VERSION})"),
            });
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint {
                offset: at,
                message: "entry name is not UTF-8".into(),
            })?;
            let at = r.pos;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| r.err("extent product overflows"))?;
            let value = match tag {
                0 => {
                    let raw = r.take_n(n, 4)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Value::F32(Tensor::from_vec(&shape, data)?)
                }
                1 => {
                    let raw = r.take_n(n, 8)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Value::F64(Tensor::from_vec(&shape, data)?)
                }
                2 => {
                    let raw = r.take_n(n, 8)?;
                    let data = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
                    Value::U64 { shape, data }
                }
                3 => Value::U8 {
                    data: r.take_n(n, 1)?.to_vec(),
                    shape,
                },
                t => {
                    return Err(Error::Checkpoint {
                        offset: at,
                        message: format!("unknown dtype tag {t} for entry {name}"),
                    })
                }
            };
            ck.entries.push((name, value));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last entry"));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Adds `param.<name>` and `buffer.<name>` entries for every tensor of `model`.
    pub fn insert_module<M: Module<f32> + ?Sized>(&mut self, model: &M) {
        model.visit_params(&mut |p| self.insert(format!("param.{}", p.name), Value::F32(p.value.clone())));
        model.visit_buffers(&mut |b| self.insert(format!("buffer.{}", b.name), Value::F32(b.value.clone())));
    }

    /// Copies matching entries into `model`. Every parameter and buffer of
    /// the model must be present with the same shape; extra entries are
    /// ignored (e.g. block parameters when loading into a bare backbone).
    pub fn restore_module<M: Module<f32> + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut err = None;
        let mut fill = |key: String, slot: &mut Tensor<f32>| {
            if err.is_some() {
                return;
            }
            match self.f32(&key) {
                Ok(t) if t.shape() == slot.shape() => *slot = t.clone(),
                Ok(t) => {
                    err = Some(Error::Checkpoint {
                        offset: 0,
                        message: format!("{key}: stored shape {:?}, model expects {:?}", t.shape(), slot.shape()),
                    })
                }
                Err(e) => err = Some(e),
            }
        };
        model.visit_params_mut(&mut |p| fill(format!("param.{}", p.name), &mut p.value));
        model.visit_buffers_mut(&mut |b| fill(format!("buffer.{}", b.name), &mut b.value));
        err.map_or(Ok(()), Err)
    }
}

fn missing(name: &str) -> Error {
    Error::Checkpoint {
        offset: 0,
        message: format!("missing or mistyped entry {name}"),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: &str) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                message: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_n(&mut self, count: usize, width: usize) -> Result<&'a [u8]> {
        let n = count.checked_mul(width).ok_or_else(|| self.err("entry size overflows"))?;
        self.take(n)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_text("meta.kind", "train");
        c.insert("w", Value::F32(Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap()));
        c.insert("d", Value::F64(Tensor::scalar(std::f64::consts::PI)));
        c.insert_u64s("rng.state", &[7, 3]);
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"SSIA");
        assert_eq!(back.text("meta.kind").unwrap(), "train");
        assert_eq!(back.u64s("rng.state").unwrap(), &[7, 3]);
    }

    #[test]
    fn layout_of_a_single_entry() {
        let mut c = Checkpoint::new();
        c.insert("ab", Value::F32(Tensor::from_vec(&[1], vec![1.0]).unwrap()));
        let mut want = b"SSIA".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.push(0);
        want.extend(1u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        assert_eq!(c.to_bytes(), want);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = sample().to_bytes();
        match Checkpoint::from_bytes(b"NOPE\x01\0\0\0") {
            Err(Error::Checkpoint { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        match Checkpoint::from_bytes(&v2) {
            Err(Error::Checkpoint { offset: 4, message }) => assert!(message.contains("version")),
            other => panic!("{other:?}"),
        }
        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Checkpoint { offset, message }) => {
                assert!(message.contains("truncated"));
                assert!(offset > 12 && offset < cut.len());
            }
            other => panic!("{other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ssia");
        sample().save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        let q = dir.path().join("b.ssia");
        back.save(&q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}

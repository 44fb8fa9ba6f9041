//! Binary container shared by checkpoints and extracted vectors:
//! magic, version (u16), 32-byte architecture digest, a length-prefixed rng
//! blob, then a u32 count of named tensors. Each tensor is stored as
//! name length (u16) + UTF-8 name, rank (u8), dims (u32 each), dtype (u8)
//! and raw little-endian values. All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"LIMCKPT";
pub const VECTORS_MAGIC: &[u8; 7] = b"LIMVECS";
pub const FORMAT_VERSION: u16 = 1;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_U64: u8 = 2;
pub const DTYPE_U8: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Values {
    fn dtype(&self) -> u8 {
        match self {
            Values::F32(_) => DTYPE_F32,
            Values::F64(_) => DTYPE_F64,
            Values::U64(_) => DTYPE_U64,
            Values::U8(_) => DTYPE_U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
            Values::U64(v) => v.len(),
            Values::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub digest: [u8; 32],
    pub rng: Vec<u8>,
    pub records: Vec<Record>,
}

impl Archive {
    pub fn push_tensor<F: Real>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        let mut buf = Vec::with_capacity(t.len() * F::BYTES);
        for x in t.data() {
            x.write_le(&mut buf);
        }
        let values = if F::DTYPE == DTYPE_F32 {
            Values::F32(buf.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            Values::F64(buf.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        self.records.push(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            values,
        });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, v: &[u64]) {
        self.records.push(Record {
            name: name.into(),
            shape: vec![v.len()],
            values: Values::U64(v.to_vec()),
        });
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        self.records.push(Record {
            name: name.into(),
            shape: vec![text.len()],
            values: Values::U8(text.as_bytes().to_vec()),
        });
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("missing entry {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.records.iter().any(|r| r.name == name)
    }

    /// Records whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
        self.records.iter().filter(move |r| r.name.starts_with(prefix))
    }

    pub fn tensor<F: Real>(&self, name: &str) -> Result<Tensor<F>> {
        record_tensor(self.get(name)?)
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.values {
            Values::U64(v) => Ok(v),
            _ => Err(Error::Format(format!("{name}: expected u64 values"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match &self.get(name)?.values {
            Values::U8(v) => {
                String::from_utf8(v.clone()).map_err(|_| Error::Format(format!("{name}: invalid UTF-8")))
            }
            _ => Err(Error::Format(format!("{name}: expected text"))),
        }
    }

    pub fn to_bytes(&self, magic: &[u8; 7]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.rng.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.rng);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", r.name)))?;
            let rank = u8::try_from(r.shape.len()).map_err(|_| Error::Format(format!("{}: rank too large", r.name)))?;
            if r.shape.iter().product::<usize>() != r.values.len() {
                return Err(Error::Format(format!("{}: shape does not match value count", r.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &r.shape {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("{}: dimension too large", r.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(r.values.dtype());
            match &r.values {
                Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 7]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(7, "magic")? != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().unwrap();
        let rng_len = r.u32("rng length")? as usize;
        let rng = r.take(rng_len, "rng state")?.to_vec();
        let count = r.u32("entry count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let dtype = r.take(1, "dtype")?[0];
            let what = "values";
            let values = match dtype {
                DTYPE_F32 => Values::F32(
                    r.take(n.checked_mul(4).ok_or_else(overflow)?, what)?
                        .chunks(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DTYPE_F64 => Values::F64(
                    r.take(n.checked_mul(8).ok_or_else(overflow)?, what)?
                        .chunks(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DTYPE_U64 => Values::U64(
                    r.take(n.checked_mul(8).ok_or_else(overflow)?, what)?
                        .chunks(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DTYPE_U8 => Values::U8(r.take(n, what)?.to_vec()),
                other => return Err(Error::Format(format!("{name}: unknown dtype {other}"))),
            };
            records.push(Record { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Archive { digest, rng, records })
    }

    pub fn save(&self, path: impl AsRef<Path>, magic: &[u8; 7]) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes(magic)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, magic: &[u8; 7]) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic)
    }
}

fn overflow() -> Error {
    Error::Format("tensor size overflows".into())
}

pub fn record_tensor<F: Real>(r: &Record) -> Result<Tensor<F>> {
    let data: Vec<F> = match (&r.values, F::DTYPE) {
        (Values::F32(v), DTYPE_F32) => v
            .iter()
            .map(|x| F::read_le(&x.to_le_bytes()))
            .collect(),
        (Values::F64(v), DTYPE_F64) => v
            .iter()
            .map(|x| F::read_le(&x.to_le_bytes()))
            .collect(),
        _ => {
            return Err(Error::Incompatible(format!(
                "{}: stored dtype {} does not match {}",
                r.name,
                r.values.dtype(),
                F::NAME
            )))
        }
    };
    Tensor::new(r.shape.clone(), data)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated while reading {field}"))),
        }
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

//! Binary artifact container.
//!
//! Layout: magic `MSKG`, format version u32, record count u32, then per
//! record: name length u32 + bytes, dtype code u8, rank u32, dims u64 each,
//! raw little-endian values. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MSKG";
pub const FORMAT_VERSION: u32 = 1;

/// One named payload: a float tensor or raw bytes (used for embedded
/// config text and token grids).
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Record {
    fn dtype(&self) -> Dtype {
        match self {
            Record::F32(_) => Dtype::F32,
            Record::F64(_) => Dtype::F64,
            Record::Bytes(_) => Dtype::U8,
            Record::I64 { .. } => Dtype::I64,
        }
    }

    fn dims(&self) -> Vec<usize> {
        match self {
            Record::F32(t) => t.shape().to_vec(),
            Record::F64(t) => t.shape().to_vec(),
            Record::Bytes(b) => vec![b.len()],
            Record::I64 { shape, .. } => shape.clone(),
        }
    }

    pub fn as_f32(&self) -> Result<&Tensor<f32>> {
        match self {
            Record::F32(t) => Ok(t),
            _ => Err(Error::format("record is not f32")),
        }
    }

    pub fn as_f64(&self) -> Result<&Tensor<f64>> {
        match self {
            Record::F64(t) => Ok(t),
            _ => Err(Error::format("record is not f64")),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match self {
            Record::Bytes(b) => Ok(b),
            _ => Err(Error::format("record is not bytes")),
        }
    }

    /// Float tensor in either precision, converted to `F`.
    pub fn as_float<F: Scalar>(&self) -> Result<Tensor<F>> {
        match self {
            Record::F32(t) => Ok(t.map(|v| F::from_f32(v))),
            Record::F64(t) => Ok(t.map(|v| F::from_f64(v))),
            _ => Err(Error::format("record is not a float tensor")),
        }
    }
}

/// An ordered set of named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: BTreeMap<String, Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, record: Record) {
        self.records.insert(name.into(), record);
    }

    pub fn insert_tensor<F: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        let record = match F::DTYPE {
            Dtype::F32 => Record::F32(t.to_f32()),
            Dtype::F64 => Record::F64(t.to_f64()),
            _ => unreachable!("scalar tensors are f32 or f64"),
        };
        self.insert(name, record);
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .get(name)
            .ok_or_else(|| Error::format(format!("checkpoint is missing record {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Record)> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.records.keys().filter(move |k| k.starts_with(prefix))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (name, record) in &self.records {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[record.dtype().code()])?;
            let dims = record.dims();
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in &dims {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            match record {
                Record::F32(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Record::F64(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Record::Bytes(b) => w.write_all(b)?,
                Record::I64 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("bad magic; not a MSKG file"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = read_u32(r)? as usize;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("record name is not utf-8"))?;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            let dtype = Dtype::from_code(code[0])?;
            let rank = read_u32(r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = dims.iter().product();
            let record = match dtype {
                Dtype::F32 => {
                    let mut data = Vec::with_capacity(numel);
                    let mut b = [0u8; 4];
                    for _ in 0..numel {
                        r.read_exact(&mut b)?;
                        data.push(f32::from_le_bytes(b));
                    }
                    Record::F32(Tensor::new(dims, data))
                }
                Dtype::F64 => {
                    let mut data = Vec::with_capacity(numel);
                    let mut b = [0u8; 8];
                    for _ in 0..numel {
                        r.read_exact(&mut b)?;
                        data.push(f64::from_le_bytes(b));
                    }
                    Record::F64(Tensor::new(dims, data))
                }
                Dtype::U8 => {
                    let mut data = vec![0u8; numel];
                    r.read_exact(&mut data)?;
                    Record::Bytes(data)
                }
                Dtype::I64 => {
                    let mut data = Vec::with_capacity(numel);
                    let mut b = [0u8; 8];
                    for _ in 0..numel {
                        r.read_exact(&mut b)?;
                        data.push(i64::from_le_bytes(b));
                    }
                    Record::I64 { shape: dims, data }
                }
            };
            records.insert(name, record);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format("trailing bytes after last record"));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut ck = Checkpoint::new();
        ck.insert(
            "a/weights",
            Record::F32(Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.1, 3.0, -0.0, f32::MIN])),
        );
        ck.insert(
            "b/doubles",
            Record::F64(Tensor::new(vec![2], vec![std::f64::consts::PI, 1e-300])),
        );
        ck.insert("meta/config", Record::Bytes(b"preset = toy\n".to_vec()));
        ck.insert(
            "tokens",
            Record::I64 {
                shape: vec![2, 2],
                data: vec![0, 5, -1, i64::MAX],
            },
        );

        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(ck, back);

        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = Vec::new();
        Checkpoint::new().write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());

        let mut buf = Vec::new();
        Checkpoint::new().write_to(&mut buf).unwrap();
        buf[4] = 99;
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut buf = Vec::new();
        Checkpoint::new().write_to(&mut buf).unwrap();
        buf.push(0);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}

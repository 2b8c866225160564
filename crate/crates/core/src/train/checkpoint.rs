//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"AMGC"
//! version u16 (currently 1)
//! record* until EOF:
//!   name_len u32, name utf-8 bytes
//!   dtype    u8   (0 = f64 array, 1 = raw bytes)
//!   rank     u8
//!   extents  rank × u64
//!   payload  Π extents × 8 bytes IEEE-754 f64 (dtype 0) or Π extents bytes
//! ```
//!
//! Records keep insertion order, so save → load → save is byte-identical.

use crate::error::{Error, Result};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"AMGC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    Bytes(Vec<u8>),
}

impl Record {
    pub fn scalar(v: f64) -> Record {
        Record::F64 { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Record {
        Record::F64 { shape: vec![data.len()], data }
    }

    pub fn as_f64(&self) -> Option<(&[usize], &[f64])> {
        match self {
            Record::F64 { shape, data } => Some((shape, data)),
            Record::Bytes(_) => None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    records: Vec<(String, Record)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, record: Record) {
        self.records.push((name.into(), record));
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn records(&self) -> &[(String, Record)] {
        &self.records
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match rec {
                Record::F64 { shape, data } => {
                    out.push(0u8);
                    out.push(shape.len() as u8);
                    for &e in shape {
                        out.extend_from_slice(&(e as u64).to_le_bytes());
                    }
                    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
                    for &v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::Bytes(bytes) => {
                    out.push(1u8);
                    out.push(1u8);
                    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                    out.extend_from_slice(bytes);
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        struct Cursor<'a> {
            buf: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.pos + n > self.buf.len() {
                    return Err(Error::Checkpoint(format!(
                        "truncated: wanted {n} bytes at offset {}, have {}",
                        self.pos,
                        self.buf.len() - self.pos
                    )));
                }
                let s = &self.buf[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
            fn done(&self) -> bool {
                self.pos == self.buf.len()
            }
        }

        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:02x?}")));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let mut records = Vec::new();
        while !cur.done() {
            let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("record name not utf-8: {e}")))?
                .to_string();
            let dtype = cur.take(1)?[0];
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let rec = match dtype {
                0 => {
                    let raw = cur.take(count * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Record::F64 { shape, data }
                }
                1 => Record::Bytes(cur.take(count)?.to_vec()),
                other => {
                    return Err(Error::Checkpoint(format!("unknown dtype tag {other} in {name:?}")))
                }
            };
            records.push((name, rec));
        }
        Ok(Checkpoint { records })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("meta.step", Record::scalar(41.0));
        c.push(
            "gen.w",
            Record::F64 { shape: vec![2, 1, 1, 2], data: vec![1.0, -2.5, 0.0, 1e-9] },
        );
        c.push("meta.config", Record::Bytes(b"{\"x\":1}".to_vec()));
        c
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.records().len(), 3);
        match back.get("gen.w").unwrap() {
            Record::F64 { shape, data } => {
                assert_eq!(shape, &[2, 1, 1, 2]);
                assert_eq!(data, &[1.0, -2.5, 0.0, 1e-9]);
            }
            _ => panic!("wrong record type"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn bad_version_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 99;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 9, 10] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "cut at {cut}: {err}");
        }
    }
}

//! Self-describing binary record files shared by the episode dump (MLEP),
//! checkpoint (MLCK), and activation dump (MLAD) formats.
//!
//! Layout: 4-byte magic, version u16 LE, record count u16 LE, then per
//! record: name_len u16 LE, name bytes, dtype u8 (0 = f64 tensor,
//! 1 = u32 tensor, 2 = utf8 blob), rank u8, dims u32 LE, payload LE.
//! Files are written atomically (temp file + rename).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<usize>, Vec<f64>),
    U32(Vec<usize>, Vec<u32>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

impl Record {
    pub fn tensor(name: impl Into<String>, t: &Tensor) -> Record {
        Record {
            name: name.into(),
            payload: Payload::F64(t.shape().to_vec(), t.data().to_vec()),
        }
    }

    pub fn labels(name: impl Into<String>, labels: &[usize]) -> Record {
        Record {
            name: name.into(),
            payload: Payload::U32(vec![labels.len()], labels.iter().map(|&v| v as u32).collect()),
        }
    }

    pub fn text(name: impl Into<String>, s: impl Into<String>) -> Record {
        Record { name: name.into(), payload: Payload::Text(s.into()) }
    }

    pub fn as_tensor(&self) -> Result<Tensor> {
        match &self.payload {
            Payload::F64(dims, data) => Tensor::new(dims.clone(), data.clone()),
            _ => Err(Error::BadFormat(format!("record `{}` is not an f64 tensor", self.name))),
        }
    }

    pub fn as_labels(&self) -> Result<Vec<usize>> {
        match &self.payload {
            Payload::U32(_, data) => Ok(data.iter().map(|&v| v as usize).collect()),
            _ => Err(Error::BadFormat(format!("record `{}` is not a label vector", self.name))),
        }
    }

    pub fn as_text(&self) -> Result<&str> {
        match &self.payload {
            Payload::Text(s) => Ok(s),
            _ => Err(Error::BadFormat(format!("record `{}` is not text", self.name))),
        }
    }
}

pub fn write_records(path: &Path, magic: &[u8; 4], records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u16).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        match &r.payload {
            Payload::F64(dims, data) => {
                buf.push(0u8);
                buf.push(dims.len() as u8);
                for &d in dims {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::U32(dims, data) => {
                buf.push(1u8);
                buf.push(dims.len() as u8);
                for &d in dims {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Text(s) => {
                buf.push(2u8);
                buf.push(1u8);
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
        }
    }
    atomic_write(path, &buf)
}

/// Write via temp file + rename so a killed process never leaves a
/// half-written file under the final name.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_records(path: &Path, magic: &[u8; 4]) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::BadFormat("truncated record file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != magic {
        return Err(Error::BadFormat(format!(
            "bad magic, expected {:?}",
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadFormat(format!("unsupported version {version}")));
    }
    let count = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::BadFormat("non-utf8 record name".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let payload = match dtype {
            0 => {
                let raw = take(&mut pos, n * 8)?;
                Payload::F64(
                    dims,
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                )
            }
            1 => {
                let raw = take(&mut pos, n * 4)?;
                Payload::U32(
                    dims,
                    raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
                )
            }
            2 => {
                let raw = take(&mut pos, n)?;
                Payload::Text(
                    String::from_utf8(raw.to_vec())
                        .map_err(|_| Error::BadFormat("non-utf8 text record".into()))?,
                )
            }
            other => return Err(Error::BadFormat(format!("unknown dtype code {other}"))),
        };
        out.push(Record { name, payload });
    }
    Ok(out)
}

pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::BadFormat(format!("missing record `{name}`")))
}

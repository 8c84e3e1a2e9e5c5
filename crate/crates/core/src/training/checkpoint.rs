//! Binary checkpoint: `"TSCK"`, `u32` version, `u32` entry count, then per
//! entry `u16` name length, name bytes, `u8` rank, `u32` dims and
//! little-endian `f32` values. Adam moments follow the parameters as
//! entries named `<param>.m` / `<param>.v`. A trailer holds the config
//! echo (`u32` length + UTF-8) and the iteration and Adam step (`u64` each).

use std::fs;
use std::path::{Path, PathBuf};

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
    /// `key=value` text of the training config.
    pub config: String,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = self.params.len() * 3;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in &self.params {
            write_entry(&mut out, name, t);
        }
        for (suffix, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((name, _), t) in self.params.iter().zip(moments) {
                write_entry(&mut out, &format!("{name}.{suffix}"), t);
            }
        }
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, expected TSCK"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        if !count.is_multiple_of(3) {
            return Err(r.error(8, format!("entry count {count} is not params + two moments")));
        }
        let n = count / 3;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(r.entry()?);
        }
        let config_len = r.u32()? as usize;
        let at = r.pos;
        let config = String::from_utf8(r.take(config_len)?.to_vec()).map_err(|_| r.error(at, "config is not UTF-8"))?;
        let iteration = r.u64()?;
        let step = r.u64()?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after checkpoint"));
        }

        let moments = entries.split_off(n);
        let (m, v) = moments.split_at(n);
        for (k, (name, t)) in entries.iter().enumerate() {
            for ((mname, mt), suffix) in [(&m[k], "m"), (&v[k], "v")] {
                if *mname != format!("{name}.{suffix}") || mt.shape() != t.shape() {
                    return Err(Error::data(
                        path,
                        format!("moment entry `{mname}` does not match parameter `{name}`"),
                    ));
                }
            }
        }
        Ok(Checkpoint {
            adam: AdamState {
                m: m.iter().map(|(_, t)| t.clone()).collect(),
                v: v.iter().map(|(_, t)| t.clone()).collect(),
                step,
            },
            params: entries,
            config,
            iteration,
        })
    }

    /// Write through a temporary file so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let start = self.pos;
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let name =
            String::from_utf8(self.take(len)?.to_vec()).map_err(|_| self.error(start, "entry name is not UTF-8"))?;
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = match numel {
            Some(n) if n.checked_mul(4).is_some_and(|b| b <= self.bytes.len() - self.pos) => n,
            _ => return Err(self.error(self.pos, format!("truncated: entry `{name}` with shape {shape:?}"))),
        };
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| self.error(start, e.to_string()))?;
        Ok((name, t))
    }
}

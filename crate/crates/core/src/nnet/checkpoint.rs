//! Binary checkpoint container.
//!
//! ```text
//! magic   b"FRCK"            4 bytes
//! version u32 LE             currently 1
//! count   u32 LE             number of sections
//! section*:
//!   name     u32 LE length + UTF-8 bytes
//!   entries  u32 LE
//!   entry*:  u32 LE name length + UTF-8, u32 LE rank, rank x u64 LE dims
//!   values   u64 LE count, then count x f64 LE in layout order
//! ```

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use super::params::{Layout, LayoutEntry, ParamVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FRCK";
const VERSION: u32 = 1;

pub fn encode(sections: &[(&str, &ParamVector)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, p) in sections {
        put_str(&mut out, name);
        let entries = p.layout().entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            put_str(&mut out, &e.name);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated: need {n} more bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: "invalid UTF-8 in name".into(),
        })
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, ParamVector)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32()?;
    let mut sections = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.string()?;
        let n_entries = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..n_entries {
            let ename = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            entries.push(LayoutEntry::new(ename, shape));
        }
        let layout = Arc::new(Layout::new(entries));
        let at = r.pos;
        let n = r.u64()? as usize;
        if n != layout.total_len() {
            return Err(Error::Format {
                offset: at as u64,
                message: format!(
                    "section `{name}` holds {n} values but its layout needs {}",
                    layout.total_len()
                ),
            });
        }
        let values = r
            .take(n.checked_mul(8).ok_or_else(|| Error::Format {
                offset: at as u64,
                message: "value count overflows".into(),
            })?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        sections.push((name, ParamVector::from_values(layout, values)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: "trailing bytes after last section".into(),
        });
    }
    Ok(sections)
}

pub fn write_checkpoint(path: &Path, sections: &[(&str, &ParamVector)]) -> Result<()> {
    let bytes = encode(sections);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, ParamVector)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

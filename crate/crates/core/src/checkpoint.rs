//! Binary checkpoint container shared by the diffusion model and the detector.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic [4]u8 | version u32
//! config: len u32 | UTF-8 JSON
//! schedule: T u32 | (T+1) × f64   (T = 0 and no values when absent)
//! params: count u32 | { name_len u32 | name | rank u32 | dims rank×u32 | f32 data }*
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub config: String,
    /// Empty when the model carries no noise schedule.
    pub alpha_bar: Vec<f64>,
    pub params: ParamStore<f32>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(c: &Container) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&c.magic);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, c.config.len() as u32);
    buf.extend_from_slice(c.config.as_bytes());
    let steps = c.alpha_bar.len().saturating_sub(1);
    put_u32(&mut buf, steps as u32);
    if steps > 0 {
        for v in &c.alpha_bar {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut buf, c.params.len() as u32);
    for (name, t) in c.params.iter() {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], magic: [u8; 4]) -> std::result::Result<Container, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let got = r.take(4)?;
    if got != magic {
        return Err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(&magic)
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let len = r.u32()? as usize;
    let config = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
    let steps = r.u32()? as usize;
    let alpha_bar = if steps > 0 {
        r.take(8 * (steps + 1))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        Vec::new()
    };
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        let data = r
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.index_of(&name).is_some() {
            return Err(format!("duplicate parameter {name}"));
        }
        params.insert(name, Tensor::from_vec(dims, data));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Container {
        magic,
        config,
        alpha_bar,
        params,
    })
}

/// Write atomically: temp file in the same directory, then rename.
pub fn write(path: &Path, c: &Container) -> Result<()> {
    write_atomic(path, &encode(c))
}

pub fn read(path: &Path, magic: [u8; 4]) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic).map_err(|m| Error::format(path, m))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

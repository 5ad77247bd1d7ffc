//! Binary parameter checkpoints.
//!
//! Layout: magic `SDCK`, u32 version, then for each parameter a u32 name
//! length, the UTF-8 name, u32 rank, `rank` u32 extents and the values as
//! little-endian f64. Parameters follow each other until end of file.
//! All integers are little-endian.

use shallowdiff_autodiff::{Array, ParamStore};

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, a) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
        for &e in a.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CoreError::Format(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CoreError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut store = ParamStore::new();
    while r.pos < buf.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CoreError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n <= (buf.len() - r.pos) / 8)
            .ok_or_else(|| CoreError::Format(format!("checkpoint truncated in values of {name}")))?;
        let raw = r.take(n * 8, "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Format(format!("non-finite value in parameter {name}")));
        }
        if store.contains(&name) {
            return Err(CoreError::Format(format!("duplicate parameter {name}")));
        }
        let a = Array::new(shape, data).map_err(|e| CoreError::Format(e.to_string()))?;
        store.insert(name, a);
    }
    Ok(store)
}

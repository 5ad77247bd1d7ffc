//! `MELG` binary grid files and atomic file writes.
//!
//! Layout: magic `MELG`, then u32 version, u32 frames, u32 bins (all
//! little-endian), then `frames × bins` f64 LE values in row-major order.

use std::io::Write;
use std::path::Path;

use shallowdiff_core::Grid;

use crate::error::{PipelineError, Result};

pub const MAGIC: &[u8; 4] = b"MELG";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn encode(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + grid.values().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.bins() as u32).to_le_bytes());
    out.extend_from_slice(&grid.to_le_bytes());
    out
}

/// Parses a grid file. Values must be finite; they are not range-checked
/// here so that intermediate (noisy) grids can be stored too.
pub fn decode(buf: &[u8]) -> std::result::Result<Grid, String> {
    if buf.len() < HEADER {
        return Err(format!("grid file too short ({} bytes)", buf.len()));
    }
    if &buf[..4] != MAGIC {
        return Err("not a grid file (bad magic)".into());
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(format!("unsupported grid file version {version}"));
    }
    let (frames, bins) = (word(8) as usize, word(12) as usize);
    let expected = frames
        .checked_mul(bins)
        .and_then(|n| n.checked_mul(8))
        .ok_or("grid header overflows")?;
    let payload = &buf[HEADER..];
    if payload.len() != expected {
        return Err(format!(
            "payload is {} bytes, header {frames}x{bins} needs {expected}",
            payload.len()
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(format!("non-finite value at index {i}"));
    }
    Grid::new(frames, bins, values).map_err(|e| e.to_string())
}

pub fn read(path: &Path) -> Result<Grid> {
    let buf = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    decode(&buf).map_err(|r| PipelineError::format(path, r))
}

pub fn write(path: &Path, grid: &Grid) -> Result<()> {
    write_atomic(path, &encode(grid))
}

/// Writes to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| PipelineError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let res = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(PipelineError::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let g = Grid::from_fn(3, 2, |r, c| r as f64 - c as f64 * 0.5);
        let b = encode(&g);
        assert_eq!(&b[..4], b"MELG");
        assert_eq!(b[4..8], 1u32.to_le_bytes());
        assert_eq!(b[8..12], 3u32.to_le_bytes());
        assert_eq!(b[12..16], 2u32.to_le_bytes());
        assert_eq!(b.len(), 16 + 6 * 8);
        assert_eq!(b[16..24], 0.0f64.to_le_bytes());
        assert_eq!(b[24..32], (-0.5f64).to_le_bytes());
    }

    #[test]
    fn rejects_bad_files() {
        let b = encode(&Grid::filled(2, 2, 0.25));
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut x = b.clone();
        x.push(0);
        assert!(decode(&x).is_err());
        let mut x = b.clone();
        x[0] = b'N';
        assert!(decode(&x).is_err());
        let mut x = b.clone();
        x[4] = 2;
        assert!(decode(&x).is_err());
        let mut x = b.clone();
        x[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode(&x).is_err());
        assert!(decode(b"MEL").is_err());
    }
}

//! OSTX binary state files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `"OSTX"`                 |
//! | 4      | 4    | format version (u32, = 1)      |
//! | 8      | 12   | Z, W, H (u32 each)             |
//! | 20     | 4    | flags (u32, bit 0 = normalized)|
//! | 24     | 8    | reserved (u64, = 0)            |
//! | 32     | ...  | temperature then salinity, `Z*W*H` f32 each, canonical order |

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Dims, GridGeometry, OceanState};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"OSTX";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
const FLAG_NORMALIZED: u32 = 1;

/// Size in bytes of an OSTX file for the given grid.
pub fn file_len(dims: Dims) -> usize {
    HEADER_LEN + 2 * dims.len() * 4
}

pub fn encode_state<R: Real>(state: &OceanState<R>) -> Result<Vec<u8>> {
    state.validate()?;
    let d = state.dims;
    let mut out = Vec::with_capacity(file_len(d));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, d.z as u32, d.w as u32, d.h as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let flags = if state.normalized { FLAG_NORMALIZED } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    for v in state.temperature.iter().chain(&state.salinity) {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_state(bytes: &[u8], path: &Path) -> Result<(OceanState<f32>, Dims)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected \"OSTX\""));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dims = Dims::new(word(8) as usize, word(12) as usize, word(16) as usize);
    let flags = word(20);
    let reserved = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
    if reserved != 0 || flags & !FLAG_NORMALIZED != 0 {
        return Err(Error::format(path, "non-zero reserved bits in header"));
    }
    dims.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let want = file_len(dims);
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!(
                "truncated or oversized payload: expected {want} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let n = dims.len();
    let temperature: Vec<f32> = values.by_ref().take(n).collect();
    let salinity: Vec<f32> = values.collect();
    let state = OceanState::new(dims, temperature, salinity, flags & FLAG_NORMALIZED != 0)?;
    Ok((state, dims))
}

/// Writes `state` to `path`; the state must match `geometry`'s grid.
pub fn write_state<R: Real>(state: &OceanState<R>, geometry: &GridGeometry, path: &Path) -> Result<()> {
    if state.dims != geometry.dims {
        return Err(Error::Validation(format!(
            "state dims {} do not match geometry dims {}",
            state.dims, geometry.dims
        )));
    }
    write_state_unchecked(state, path)
}

/// Writes a state without a geometry to compare against.
pub fn write_state_unchecked<R: Real>(state: &OceanState<R>, path: &Path) -> Result<()> {
    let bytes = encode_state(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_state(path: &Path) -> Result<(OceanState<f32>, Dims)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes, path)
}

//! Binary checkpoints: magic, version, a JSON header, then little-endian f32
//! arrays (density, appearance, Adam m/v for each).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{FrugalError, Result};
use crate::field::VoxelField;
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"FRUGALCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: Config,
    iteration: usize,
    adam_step: u64,
    density_len: usize,
    appearance_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub iteration: usize,
    pub field: VoxelField<f32>,
    pub adam: AdamState,
}

pub fn encode(config: &Config, iteration: usize, field: &VoxelField<f32>, adam: &AdamState) -> Result<Vec<u8>> {
    adam.check_shapes(field)?;
    let header = Header {
        config: config.clone(),
        iteration,
        adam_step: adam.step,
        density_len: field.density_raw.len(),
        appearance_len: field.appearance_raw.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| FrugalError::json("checkpoint header", e))?;
    let floats = 3 * (header.density_len + header.appearance_len);
    let mut out = Vec::with_capacity(20 + json.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for arr in [
        &field.density_raw,
        &field.appearance_raw,
        &adam.m_density,
        &adam.v_density,
        &adam.m_appearance,
        &adam.v_appearance,
    ] {
        for v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| FrugalError::CheckpointFormat("file is truncated".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_f32s(bytes: &[u8], pos: &mut usize, n: usize) -> Result<Vec<f32>> {
    let raw = take(bytes, pos, n.checked_mul(4).ok_or_else(|| FrugalError::CheckpointFormat("bad length".into()))?)?;
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(FrugalError::CheckpointFormat("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FrugalError::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let hlen = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| FrugalError::CheckpointFormat("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, hlen)?)
        .map_err(|e| FrugalError::CheckpointFormat(format!("header: {e}")))?;
    let (nd, na) = (header.density_len, header.appearance_len);
    let density_raw = read_f32s(bytes, &mut pos, nd)?;
    let appearance_raw = read_f32s(bytes, &mut pos, na)?;
    let adam = AdamState {
        m_density: read_f32s(bytes, &mut pos, nd)?,
        v_density: read_f32s(bytes, &mut pos, nd)?,
        m_appearance: read_f32s(bytes, &mut pos, na)?,
        v_appearance: read_f32s(bytes, &mut pos, na)?,
        step: header.adam_step,
    };
    if pos != bytes.len() {
        return Err(FrugalError::CheckpointFormat("trailing bytes after the arrays".into()));
    }
    let field = VoxelField {
        config: header.config.grid.clone(),
        density_raw,
        appearance_raw,
    };
    field
        .validate()
        .map_err(|e| FrugalError::CheckpointFormat(e.to_string()))?;
    Ok(Checkpoint {
        config: header.config,
        iteration: header.iteration,
        field,
        adam,
    })
}

pub fn save_checkpoint(
    path: &Path,
    config: &Config,
    iteration: usize,
    field: &VoxelField<f32>,
    adam: &AdamState,
) -> Result<()> {
    let bytes = encode(config, iteration, field, adam)?;
    std::fs::write(path, bytes).map_err(|e| FrugalError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| FrugalError::io(path, e))?;
    decode(&bytes)
}

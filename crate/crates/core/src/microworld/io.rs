//! Binary trajectory records.
//!
//! ```text
//! "RWTJ" | version u16 | T u32 | d u32 | block_len u32 | block (JSON) | T·d f32
//! ```
//!
//! All integers and floats are little-endian. The block carries the
//! condition, the provenance and the controller seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

use super::{Condition, Provenance, Trajectory};

const MAGIC: &[u8; 4] = b"RWTJ";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Block {
    condition: Condition,
    provenance: Provenance,
    sim_seed: u64,
}

pub fn trajectory_to_bytes(traj: &Trajectory) -> Result<Vec<u8>> {
    let block = serde_json::to_vec(&Block {
        condition: traj.condition.clone(),
        provenance: traj.provenance.clone(),
        sim_seed: traj.sim_seed,
    })?;
    let mut out = Vec::with_capacity(18 + block.len() + 4 * traj.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(traj.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(traj.frame_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(&block);
    for &x in traj.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("trajectory record is truncated".into()))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn u32_at(bytes: &[u8], at: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, at, 4)?.try_into().expect("4 bytes")))
}

pub fn trajectory_from_bytes(bytes: &[u8]) -> Result<Trajectory> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(Error::Format("not a trajectory record (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take(bytes, &mut at, 2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported trajectory version {version}")));
    }
    let t = u32_at(bytes, &mut at)? as usize;
    let d = u32_at(bytes, &mut at)? as usize;
    let block_len = u32_at(bytes, &mut at)? as usize;
    let block: Block = serde_json::from_slice(take(bytes, &mut at, block_len)?)
        .map_err(|e| Error::Format(format!("trajectory block: {e}")))?;
    if block.condition.layout().dim() != d {
        return Err(Error::Format(format!(
            "frame width {d} does not match the condition layout"
        )));
    }
    let n = t
        .checked_mul(d)
        .ok_or_else(|| Error::Format("trajectory size overflows".into()))?;
    let payload = take(bytes, &mut at, 4 * n)?;
    if at != bytes.len() {
        return Err(Error::Format("trailing bytes after trajectory payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Trajectory::new(data, t, block.condition, block.provenance, block.sim_seed)
        .map_err(|e| Error::Format(e.to_string()))
}

/// Writes `path` (binary) and `path` with a `.json` extension (readable mirror).
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    fsutil::write_atomic(path, &trajectory_to_bytes(traj)?)?;
    fsutil::write_json(&path.with_extension("json"), traj)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    trajectory_from_bytes(&fsutil::read(path)?)
}

const STREAM_MAGIC: &[u8; 4] = b"RWTS";

/// Concatenates records, each prefixed by its byte length:
/// `"RWTS" | version u16 | count u32 | (len u32 | record)*`.
pub fn trajectories_to_bytes(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(trajs.len() as u32).to_le_bytes());
    for t in trajs {
        let rec = trajectory_to_bytes(t)?;
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    Ok(out)
}

pub fn trajectories_from_bytes(bytes: &[u8]) -> Result<Vec<Trajectory>> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != STREAM_MAGIC {
        return Err(Error::Format("not a trajectory stream (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take(bytes, &mut at, 2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported trajectory stream version {version}")));
    }
    let n = u32_at(bytes, &mut at)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32_at(bytes, &mut at)? as usize;
        out.push(trajectory_from_bytes(take(bytes, &mut at, len)?)?);
    }
    if at != bytes.len() {
        return Err(Error::Format("trailing bytes after trajectory stream".into()));
    }
    Ok(out)
}

/// Writes a stream to `path`, plus a `.json` mirror when `mirror` is set.
pub fn write_trajectories(path: &Path, trajs: &[Trajectory], mirror: bool) -> Result<()> {
    fsutil::write_atomic(path, &trajectories_to_bytes(trajs)?)?;
    if mirror {
        fsutil::write_json(&path.with_extension("json"), &trajs)?;
    }
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    trajectories_from_bytes(&fsutil::read(path)?)
}

//! MPC1 clip files.
//!
//! A file is one JSON header line
//!
//! ```text
//! {"magic":"MPC1","P":3,"T":50,"J":15,"fps":25.0,"root_index":0,"joint_names":[...]}
//! ```
//!
//! terminated by `\n`, followed by `P * T * J * 3` little-endian float32
//! values in `[person][frame][joint][xyz]` order, in millimetres.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use hiersoc_core::motion::{MultiPersonClip, Skeleton};

use crate::error::{Error, Result};

pub const MAGIC: &str = "MPC1";
const MAX_HEADER_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    #[serde(rename = "P")]
    persons: usize,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "J")]
    joints: usize,
    fps: f64,
    root_index: usize,
    joint_names: Vec<String>,
}

/// Writes `clip`; positions are stored as float32.
pub fn write_clip<W: Write>(clip: &MultiPersonClip, mut w: W) -> Result<()> {
    let sk = clip.skeleton();
    let header = Header {
        magic: MAGIC.into(),
        persons: clip.person_count(),
        frames: clip.frame_count(),
        joints: clip.joint_count(),
        fps: sk.fps(),
        root_index: sk.root_index(),
        joint_names: sk.joint_names().to_vec(),
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("encoding clip header: {e}")))?;
    buf.push(b'\n');
    buf.reserve(clip.positions().len() * 4);
    for (i, &v) in clip.positions().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Data(format!("value {v} at index {i} does not fit float32")));
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_clip<R: Read>(r: R) -> Result<MultiPersonClip> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    (&mut r).take(MAX_HEADER_BYTES).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Data("malformed header: no terminating newline".into()));
    }
    line.pop();
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| Error::Data(format!("malformed header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Data(format!("malformed header: magic {:?}, expected {MAGIC:?}", header.magic)));
    }
    if header.joint_names.len() != header.joints {
        return Err(Error::Data(format!(
            "malformed header: {} joint names for J = {}",
            header.joint_names.len(),
            header.joints
        )));
    }
    let count = header
        .persons
        .checked_mul(header.frames)
        .and_then(|n| n.checked_mul(header.joints))
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Data("malformed header: dimensions overflow".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() as u128 != count as u128 * 4 {
        return Err(Error::Data(format!(
            "dimension mismatch: header needs {} payload bytes (P*T*J*3*4), file has {}",
            count as u128 * 4,
            payload.len()
        )));
    }
    let base = line.len() + 1;
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(Error::Data(format!("non-finite value at byte offset {}", base + 4 * i)));
        }
        data.push(f64::from(v));
    }
    let skeleton = Skeleton::new(header.joint_names, header.root_index, header.fps)
        .map_err(|e| Error::Data(format!("malformed header: {e}")))?;
    Ok(MultiPersonClip::new(skeleton, header.persons, header.frames, data)?)
}

pub fn save_clip(clip: &MultiPersonClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_clip(clip, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<MultiPersonClip> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::Io(format!("opening {}: {e}", path.display())))?;
    read_clip(f).map_err(|e| e.context(&path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip() -> MultiPersonClip {
        let sk = Skeleton::default_body(3, 25.0).unwrap();
        MultiPersonClip::from_fn(sk, 2, 4, |p, t, j| [p as f64 * 0.5, t as f64 - 1.25, j as f64 * 1e3]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let c = clip();
        let mut buf = Vec::new();
        write_clip(&c, &mut buf).unwrap();
        assert_eq!(read_clip(&buf[..]).unwrap(), c);
    }

    #[test]
    fn header_is_one_json_line() {
        let mut buf = Vec::new();
        write_clip(&clip(), &mut buf).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(v["magic"], "MPC1");
        assert_eq!(v["P"], 2);
        assert_eq!(v["T"], 4);
        assert_eq!(v["J"], 3);
        assert_eq!(buf.len() - nl - 1, 2 * 4 * 3 * 3 * 4);
    }
}

//! Binary checkpoints of named agent components.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FCSTCKPT"
//! version    u32      (currently 1)
//! env_steps  u64
//! config     u32 length + UTF-8 text
//! count      u32      number of components
//! component  repeated `count` times:
//!   name     u32 length + UTF-8
//!   sets     u32      number of parameter sets
//!   set      repeated:
//!     name     u32 length + UTF-8
//!     entries  u32
//!     entry    repeated:
//!       name     u32 length + UTF-8
//!       ndim     u32
//!       dims     ndim x u64
//!       payload  prod(dims) x f32
//! ```
//!
//! Values are stored as 32-bit floats and widened on load, so a round trip is
//! exact at 32-bit precision.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 8] = b"FCSTCKPT";
pub const VERSION: u32 = 1;

pub const COMPONENT_NAMES: [&str; 5] = ["world_model", "goal_codec", "manager", "worker", "abstract_wm"];

pub fn check_component_name(name: &str) -> Result<()> {
    if COMPONENT_NAMES.contains(&name) {
        Ok(())
    } else {
        Err(Error::Load {
            component: name.to_string(),
            detail: format!("unknown component (expected one of {})", COMPONENT_NAMES.join(", ")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub env_steps: u64,
    pub config: String,
    /// In save order.
    pub components: Vec<(String, Vec<ParameterSet>)>,
}

impl Checkpoint {
    pub fn component(&self, name: &str) -> Option<&[ParameterSet]> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, sets)| sets.as_slice())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.env_steps.to_le_bytes())?;
        write_str(w, &self.config)?;
        write_len(w, self.components.len())?;
        for (name, sets) in &self.components {
            write_str(w, name)?;
            write_len(w, sets.len())?;
            for set in sets {
                write_str(w, set.name())?;
                write_len(w, set.len())?;
                for (key, t) in set.entries() {
                    write_str(w, key)?;
                    write_len(w, t.shape().len())?;
                    for &d in t.shape() {
                        w.write_all(&(d as u64).to_le_bytes())?;
                    }
                    for &v in t.data() {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let env_steps = read_u64(r)?;
        let config = read_str(r)?;
        let count = read_u32(r)?;
        let mut components = Vec::new();
        for _ in 0..count {
            let name = read_str(r)?;
            let n_sets = read_u32(r)?;
            let mut sets = Vec::new();
            for _ in 0..n_sets {
                let mut set = ParameterSet::new(read_str(r)?);
                for _ in 0..read_u32(r)? {
                    let key = read_str(r)?;
                    let ndim = read_u32(r)? as usize;
                    let shape = (0..ndim)
                        .map(|_| read_u64(r).map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let len = shape.iter().product::<usize>();
                    let mut bytes = vec![0u8; len * 4];
                    read_exact(r, &mut bytes)?;
                    let data = bytes
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                        .collect();
                    set.insert(key, Tensor::new(shape, data)?)
                        .map_err(|e| Error::Format(e.to_string()))?;
                }
                sets.push(set);
            }
            components.push((name, sets));
        }
        Ok(Self {
            version,
            env_steps,
            config,
            components,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Rounds every value through f32, as a save/load cycle would.
pub fn round_to_f32(set: &ParameterSet) -> ParameterSet {
    let mut out = set.clone();
    for (_, t) in out.entries_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    out
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_len(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Format(format!("string length {n} is implausible")));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
}

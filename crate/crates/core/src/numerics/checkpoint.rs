//! Binary tensor checkpoints.
//!
//! Layout: magic `ESCKPT01`, a little-endian `u64` manifest length, the JSON
//! manifest (`[{name, shape, offset}]`, offsets counted in values from the
//! start of the data block), then every value as a little-endian `f32`.
//! Run metadata goes in a JSON sidecar next to the file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"ESCKPT01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub fn write_tensors(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut manifest = Vec::with_capacity(entries.len());
    let mut offset = 0;
    for (name, t) in entries {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in entries {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    // write-then-rename so an interrupted save never clobbers the previous file
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16 + hlen;
    if bytes.len() < data_start {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let n: usize = entry.shape.iter().product();
        let (s, e) = (entry.offset * 4, (entry.offset + n) * 4);
        if e > data.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past end of file", entry.name)));
        }
        let values = data[s..e]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((entry.name, Tensor::new(entry.shape, values)?));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `tensors`, matching by name.
pub fn load_params(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        store.set(id, t.1.clone())?;
    }
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let target = sidecar_path(path);
    let tmp = target.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(meta)?)?;
    fs::rename(tmp, target)?;
    Ok(())
}

pub fn read_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(sidecar_path(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

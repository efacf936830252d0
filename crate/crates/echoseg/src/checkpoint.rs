//! Versioned binary checkpoint container.
//!
//! Layout: magic `ESCK`, format version (u32 LE), header length (u64 LE),
//! JSON header, then each array's raw little-endian f32 payload at the
//! offset the header declares. Loading and re-saving reproduces the file
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::config::{EncoderSpec, SegDecoderSpec};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ESCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// "mae" or "mpl".
    pub kind: String,
    pub step: u64,
    pub encoder: EncoderSpec,
    pub decoder: Option<SegDecoderSpec>,
    /// SHA-256 of the resolved run config that produced this checkpoint.
    pub config_sha256: String,
    /// Data-stream RNG state for bit-compatible resumption.
    pub rng_seed: u64,
    pub rng_word_pos: String,
    pub optimizer_step: u64,
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, arr) in &self.arrays {
            let len = (arr.len() * 4) as u64;
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        #[derive(Serialize)]
        struct Header<'a> {
            meta: &'a CheckpointMeta,
            arrays: &'a [ArrayEntry],
        }
        let header = serde_json::to_vec(&Header { meta: &self.meta, arrays: &entries })
            .map_err(|e| Error::Format(e.to_string()))?;

        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&(header.len() as u64).to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&header).map_err(|e| Error::io(&tmp, e))?;
            let mut buf = Vec::new();
            for (_, arr) in &self.arrays {
                buf.clear();
                buf.reserve(arr.len() * 4);
                for v in arr.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
            }
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut fixed = [0u8; 16];
        f.read_exact(&mut fixed).map_err(|e| Error::io(path, e))?;
        if &fixed[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let header_len = u64::from_le_bytes(fixed[8..16].try_into().unwrap()) as usize;
        let mut header = vec![0u8; header_len];
        f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        struct Header {
            meta: CheckpointMeta,
            arrays: Vec<ArrayEntry>,
        }
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut data = Vec::new();
        f.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;

        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in &header.arrays {
            let start = e.offset as usize;
            let end = start + e.len as usize;
            if end > data.len() {
                return Err(Error::Format(format!("{}: array {} out of bounds", path.display(), e.name)));
            }
            let vals: Vec<f32> = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&e.shape), vals)
                .map_err(|err| Error::Format(format!("{}: array {}: {err}", path.display(), e.name)))?;
            arrays.push((e.name.clone(), arr));
        }
        Ok(Checkpoint { meta: header.meta, arrays })
    }

    pub fn array(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Arrays whose name starts with `prefix`, with the prefix stripped.
    pub fn arrays_with_prefix(&self, prefix: &str) -> Vec<(String, ArrayD<f32>)> {
        self.arrays
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, a)| (n[prefix.len()..].to_string(), a.clone()))
            .collect()
    }
}

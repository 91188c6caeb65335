//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "PICI" | version | meta_len | meta (UTF-8 `key=value` lines)
//!        | n_arrays | { name_len | name | rows | cols | rows·cols f64 LE }*
//! ```
//!
//! The meta block carries the network configuration under `model.*` keys plus
//! any caller metadata (stage, epoch, normalization constants, ...).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{ModelParams, NetworkConfig};
use crate::error::{PiciError, Result};

pub const MAGIC: &[u8; 4] = b"PICI";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Array2<f64>)>,
}

fn bad(msg: impl Into<String>) -> PiciError {
    PiciError::Checkpoint(msg.into())
}

pub fn config_to_meta(cfg: &NetworkConfig, meta: &mut BTreeMap<String, String>) {
    let entries = [
        ("model.dim", cfg.embed_dim),
        ("model.layers", cfg.n_layers),
        ("model.heads", cfg.n_heads),
        ("model.decoder_dim", cfg.decoder_dim),
        ("model.decoder_layers", cfg.decoder_layers),
        ("model.decoder_heads", cfg.decoder_heads),
        ("model.patch_size", cfg.patch_size),
        ("model.image_size", cfg.image_size),
        ("model.instance_dim", cfg.instance_dim),
        ("model.clusters", cfg.n_clusters),
    ];
    for (k, v) in entries {
        meta.insert(k.to_string(), v.to_string());
    }
}

pub fn config_from_meta(meta: &BTreeMap<String, String>) -> Result<NetworkConfig> {
    let get = |k: &str| -> Result<usize> {
        meta.get(k)
            .ok_or_else(|| bad(format!("missing {k}")))?
            .parse()
            .map_err(|_| bad(format!("bad integer for {k}")))
    };
    let cfg = NetworkConfig {
        embed_dim: get("model.dim")?,
        n_layers: get("model.layers")?,
        n_heads: get("model.heads")?,
        decoder_dim: get("model.decoder_dim")?,
        decoder_layers: get("model.decoder_layers")?,
        decoder_heads: get("model.decoder_heads")?,
        patch_size: get("model.patch_size")?,
        image_size: get("model.image_size")?,
        instance_dim: get("model.instance_dim")?,
        n_clusters: get("model.clusters")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        let mut meta = BTreeMap::new();
        config_to_meta(params.config(), &mut meta);
        Self {
            meta,
            arrays: params
                .named()
                .map(|(n, a)| (n.to_string(), a.clone()))
                .collect(),
        }
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        config_from_meta(&self.meta)
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::from_named(&self.network_config()?, &self.arrays)
    }

    pub fn array(&self, name: &str) -> Option<&Array2<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(arr.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(arr.ncols() as u32).to_le_bytes());
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a PICI checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("meta is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed meta line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let arr = Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?;
            arrays.push((name, arr));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let params = ModelParams::init(&NetworkConfig::tiny(), 1).unwrap();
        let bytes = Checkpoint::from_params(&params).to_bytes();
        assert_eq!(&bytes[..4], b"PICI");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn roundtrip_preserves_params_and_meta() {
        let params = ModelParams::init(&NetworkConfig::tiny(), 2).unwrap();
        let mut ck = Checkpoint::from_params(&params);
        ck.meta.insert("stage".into(), "train".into());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let restored = back.params().unwrap();
        assert_eq!(restored.tensors, params.tensors);
        assert_eq!(restored.config(), params.config());
    }

    #[test]
    fn corrupt_input_rejected() {
        let params = ModelParams::init(&NetworkConfig::tiny(), 3).unwrap();
        let bytes = Checkpoint::from_params(&params).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}

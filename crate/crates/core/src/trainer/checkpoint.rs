//! Binary checkpoint format.
//!
//! ```text
//! "FUNC"  u32 version
//! u32 len, canonical key=value text (network config, epoch, best val loss)
//! u32 array count
//! per array: u32 len, name, u8 rank, u32 dims[rank], f32 values
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::config::{float_text, KeyValues};
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::model::{FocusUNet, NetworkConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FUNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParamStore<f32>,
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
    pub best_val_loss: f64,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Incompatible(format!("{what} is not UTF-8")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &FocusUNet<f32>, epoch: usize, best_val_loss: f64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            params: model.params.clone(),
            epoch,
            best_val_loss,
        }
    }

    fn metadata(&self) -> KeyValues {
        let mut kv = self.config.to_key_values();
        kv.set("ckpt.epoch", self.epoch);
        kv.set("ckpt.best_val_loss", float_text(self.best_val_loss));
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.params.num_elements());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = self.metadata().to_text();
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.params.len());
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates a checkpoint: magic, version, metadata, and that
    /// the arrays match exactly what the stored config builds.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < 4 {
            return Err(Error::Truncated("missing header".into()));
        }
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta = KeyValues::parse(&r.string("metadata")?)?;
        let mut known: Vec<&str> = NetworkConfig::KEYS.to_vec();
        known.extend(["ckpt.epoch", "ckpt.best_val_loss"]);
        meta.reject_unknown(&known)
            .map_err(|e| Error::Incompatible(e.to_string()))?;
        for k in &known {
            if meta.get(k).is_none() {
                return Err(Error::Incompatible(format!("metadata lacks {k}")));
            }
        }
        let mut config = NetworkConfig::default();
        config.apply(&meta)?;
        let mut epoch = 0usize;
        let mut best_val_loss = 0.0f64;
        meta.read("ckpt.epoch", &mut epoch)?;
        meta.read("ckpt.best_val_loss", &mut best_val_loss)?;

        let count = r.u32("array count")? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("array name")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.saturating_mul(4), &format!("values of {name}"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new(shape, data)
                .map_err(|e| Error::Incompatible(format!("{name}: {e}")))?;
            params.insert(name, value)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Incompatible(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        // Validates names and shapes against the architecture.
        let model = FocusUNet::with_params(config.clone(), params)?;
        Ok(Checkpoint {
            config,
            params: model.params,
            epoch,
            best_val_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn into_model(self) -> Result<FocusUNet<f32>> {
        FocusUNet::with_params(self.config, self.params)
    }

    /// Fails unless the checkpoint was produced for `config`.
    pub fn check_compatible(&self, config: &NetworkConfig) -> Result<()> {
        if &self.config != config {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained with\n{}but the requested model is\n{}",
                self.config.to_key_values().to_text(),
                config.to_key_values().to_text()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::GateType;

    fn tiny() -> Checkpoint {
        let config = NetworkConfig {
            depth: 2,
            base_channels: 2,
            height: 8,
            width: 8,
            gate: GateType::Focus,
            ..NetworkConfig::default()
        };
        let model = FocusUNet::<f32>::build(config, 4).unwrap();
        Checkpoint::from_model(&model, 3, 0.125)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = tiny();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.best_val_loss, 0.125);
    }

    #[test]
    fn distinct_errors() {
        let bytes = tiny().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Truncated(_))
        ));
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! "G2RPOCKPT"            9 bytes
//! version                u32 LE
//! architecture digest    u64 LE
//! repeated until EOF:
//!   name length          u32 LE
//!   name                 UTF-8 bytes
//!   rank                 u32 LE
//!   dims                 rank × u64 LE
//!   values               product(dims) × f64 LE
//! ```

use std::path::Path;

use thiserror::Error;

use crate::flow_model::VelocityFieldModel;
use crate::harness::config::ExperimentConfig;

pub const MAGIC: &[u8; 9] = b"G2RPOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint magic mismatch")]
    Magic,
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint config digest mismatch: file has {found:#018x}, active config has {expected:#018x}")]
    Digest { found: u64, expected: u64 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint parameter `{name}`: {message}")]
    Parameter { name: String, message: String },
    #[error("checkpoint {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub fn to_bytes(model: &VelocityFieldModel, cfg: &ExperimentConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&cfg.architecture_digest().to_le_bytes());
    for p in model.params().iter() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value().shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value().values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Rebuilds a model for `cfg` from checkpoint bytes.
pub fn from_bytes(bytes: &[u8], cfg: &ExperimentConfig) -> Result<VelocityFieldModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let digest = r.u64("config digest")?;
    if digest != cfg.architecture_digest() {
        return Err(CheckpointError::Digest {
            found: digest,
            expected: cfg.architecture_digest(),
        });
    }
    let mut model = VelocityFieldModel::new(cfg.model_config(), 0);
    let mut loaded = vec![false; model.params().len()];
    while !r.done() {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| CheckpointError::Parameter {
            name: "?".into(),
            message: "name is not UTF-8".into(),
        })?;
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let bad = |message: String| CheckpointError::Parameter {
            name: name.clone(),
            message,
        };
        let id = model.params().find(&name).ok_or_else(|| bad("not part of this architecture".into()))?;
        if loaded[id.index()] {
            return Err(bad("appears twice".into()));
        }
        let target = model.params_mut().value_mut(id);
        if target.shape() != dims.as_slice() {
            return Err(bad(format!("shape {:?} does not match {:?}", dims, target.shape())));
        }
        let n = target.len();
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated("values"))?, "values")?;
        for (dst, chunk) in target.values_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        loaded[id.index()] = true;
    }
    if let Some(missing) = loaded.iter().position(|&l| !l) {
        let name = model.params().iter().nth(missing).map(|p| p.name().to_string()).unwrap_or_default();
        return Err(CheckpointError::Parameter {
            name,
            message: "missing from checkpoint".into(),
        });
    }
    Ok(model)
}

pub fn write(model: &VelocityFieldModel, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, cfg)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read(path: &Path, cfg: &ExperimentConfig) -> Result<VelocityFieldModel> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            hidden: vec![8, 8],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = small();
        let model = VelocityFieldModel::new(cfg.model_config(), 11);
        let back = from_bytes(&to_bytes(&model, &cfg), &cfg).unwrap();
        assert_eq!(back.params().flat_values(), model.params().flat_values());
        assert_eq!(to_bytes(&back, &cfg), to_bytes(&model, &cfg));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let cfg = small();
        let bytes = to_bytes(&VelocityFieldModel::new(cfg.model_config(), 1), &cfg);
        for cut in [0, 5, 12, 20, 40, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut], &cfg).is_err(), "cut at {cut}");
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong, &cfg).unwrap_err().to_string().contains("magic"));
        let mut wrong = bytes.clone();
        wrong[9] = 7;
        assert!(from_bytes(&wrong, &cfg).unwrap_err().to_string().contains("version"));
        let other = ExperimentConfig {
            num_conditions: 6,
            ..small()
        };
        assert!(from_bytes(&bytes, &other).unwrap_err().to_string().contains("config digest"));
    }
}

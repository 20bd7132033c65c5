//! Binary model checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic        8 bytes  "ASTCAPS\0"
//! version      u32
//! header_len   u64, then header_len bytes of JSON {config, class_names}
//! param_count  u32, then per parameter in name order:
//!     name_len u32, name bytes, rank u32, dims u64 x rank, values f64 x product(dims)
//! classes      u32
//! alpha        f64
//! prior        f64 x classes
//! conditionals f64 x (4 * classes * classes), head-major then class then label
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{BayesModel, HEADS};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ASTCAPS\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("invalid checkpoint header: {0}")]
    Header(String),
    #[error("shape mismatch: {}", describe(.0))]
    ShapeMismatch(Vec<ShapeMismatch>),
    #[error("parameter {0} is not part of the configured model")]
    UnknownParam(String),
    #[error("parameter {0} is missing from the checkpoint")]
    MissingParam(String),
    #[error("invalid checkpoint contents: {0}")]
    Invalid(String),
    #[error("{0} unexpected bytes after the end of the checkpoint")]
    TrailingBytes(usize),
}

/// A stored parameter whose shape disagrees with the configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMismatch {
    pub name: String,
    pub expected: Vec<usize>,
    pub found: Vec<usize>,
}

fn describe(m: &[ShapeMismatch]) -> String {
    m.iter()
        .map(|m| format!("parameter {} is {:?}, configuration expects {:?}", m.name, m.found, m.expected))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    class_names: Vec<String>,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        config: model.config,
        class_names: model.class_names.clone(),
    })
    .expect("header serializes");
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let b = &model.bayes;
    out.extend_from_slice(&(b.classes as u32).to_le_bytes());
    out.extend_from_slice(&b.alpha.to_le_bytes());
    let tables = b.prior.iter().chain(b.conditionals.iter().flatten().flatten());
    for v in tables {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn size(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64(what)?).map_err(|_| CheckpointError::Truncated(what))
    }
}

/// Decodes a checkpoint. With `expected`, parameter shapes are checked
/// against that configuration instead of the embedded one.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(CheckpointError::BadMagic);
    }
    let found = r.u32("version")?;
    if found != VERSION {
        return Err(CheckpointError::Version { found });
    }
    let header_len = r.size("header length")?;
    let header: Header =
        serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let config = expected.copied().unwrap_or(header.config);
    config.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.class_names.len() != config.classes {
        return Err(CheckpointError::Header(format!(
            "{} class names for {} classes",
            header.class_names.len(),
            config.classes
        )));
    }
    let shapes = config.param_shapes();

    let count = r.u32("parameter count")? as usize;
    let mut params = ParamSet::new();
    let mut mismatches = Vec::new();
    for _ in 0..count {
        let len = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|_| CheckpointError::Invalid("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("parameter rank")? as usize;
        let dims = (0..rank).map(|_| r.size("parameter shape")).collect::<Result<Vec<_>, _>>()?;
        let want = shapes.get(&name).ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let values = r.f64s(count.ok_or(CheckpointError::Truncated("parameter values"))?, "parameter values")?;
        if &dims != want {
            mismatches.push(ShapeMismatch {
                name,
                expected: want.clone(),
                found: dims,
            });
            continue;
        }
        let t = Tensor::new(dims, values).map_err(|e| CheckpointError::Invalid(format!("{name}: {e}")))?;
        params.insert(name, t);
    }
    if !mismatches.is_empty() {
        return Err(CheckpointError::ShapeMismatch(mismatches));
    }
    if let Some(missing) = shapes.keys().find(|k| params.get(k).is_none()) {
        return Err(CheckpointError::MissingParam(missing.clone()));
    }

    let classes = r.u32("fusion classes")? as usize;
    if classes != config.classes {
        return Err(CheckpointError::Invalid(format!(
            "fusion tables cover {classes} classes, model has {}",
            config.classes
        )));
    }
    let alpha = r.f64s(1, "fusion smoothing")?[0];
    let prior = r.f64s(classes, "fusion prior")?;
    let flat = r.f64s(HEADS * classes * classes, "fusion conditionals")?;
    let conditionals = flat
        .chunks(classes * classes)
        .map(|head| head.chunks(classes).map(<[f64]>::to_vec).collect())
        .collect();
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(Model {
        config,
        params,
        bayes: BayesModel {
            classes,
            alpha,
            prior,
            conditionals,
        },
        class_names: header.class_names,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Model, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::spatiotemporal::WindowLayout;

    fn model() -> Model {
        let cfg = ModelConfig::new(
            WindowLayout::new(12, 10),
            3,
            Architecture {
                hidden: 4,
                head2_width: 8,
                ..Architecture::default()
            },
        );
        Model::init(cfg, 2).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes, None).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejections() {
        let m = model();
        let bytes = to_bytes(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, None), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad, None), Err(CheckpointError::Version { found: 9 })));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3], None),
            Err(CheckpointError::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long, None), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn kernel_mismatch_names_param() {
        let m = model();
        let mut other = m.config;
        other.arch.conv_kernel = [3, 3];
        let err = from_bytes(&to_bytes(&m), Some(&other)).unwrap_err();
        assert!(err.to_string().contains("parameter conv.kernels is [8, 1, 5, 5]"), "{err}");
        match err {
            CheckpointError::ShapeMismatch(m) => assert!(m.iter().any(|m| m.name == "conv.kernels")),
            e => panic!("unexpected {e}"),
        }
    }
}

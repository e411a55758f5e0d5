//! Checkpoint files: magic string, format version, model configuration,
//! named tensors as (name-length, name, shape, little-endian 32-bit floats),
//! and a trailing content digest so corruption is an error rather than a
//! silent misload.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, Params, RtdHead};

const MAGIC: &[u8; 8] = b"CLOZEFIT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    VersionMismatch(u32),
    #[error("checkpoint truncated or corrupted: {0}")]
    Corrupt(String),
    #[error("checkpoint digest mismatch (file corrupted)")]
    DigestMismatch,
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("unexpected tensor {0:?} in checkpoint")]
    UnknownTensor(String),
    #[error("checkpoint config {found:?} does not match expected {expected:?}")]
    ConfigMismatch { expected: Box<ModelConfig>, found: Box<ModelConfig> },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// A loadable training artifact: model weights plus the optional binary
/// head used by the replaced-token-detection objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub rtd_head: Option<RtdHead<f32>>,
}

impl Checkpoint {
    pub fn require_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        if &self.config != expected {
            return Err(CheckpointError::ConfigMismatch {
                expected: Box::new(*expected),
                found: Box::new(self.config),
            });
        }
        Ok(())
    }
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(params: &Params<f32>, rtd_head: Option<&RtdHead<f32>>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let c = &params.config;
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_len] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.seed.to_le_bytes());

    let tensors = params.named_tensors();
    let head_tensors = rtd_head.map_or(0, |_| 2);
    buf.extend_from_slice(&((tensors.len() + head_tensors) as u32).to_le_bytes());
    for t in &tensors {
        write_tensor(&mut buf, &t.name, &t.shape, t.data);
    }
    if let Some(head) = rtd_head {
        write_tensor(&mut buf, "rtd_head.w", &[head.w.len()], &head.w);
        write_tensor(&mut buf, "rtd_head.b", &[1], &[head.b]);
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &dim in shape {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes a checkpoint file.
pub fn save(
    path: &Path,
    params: &Params<f32>,
    rtd_head: Option<&RtdHead<f32>>,
) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(params, rtd_head)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads and verifies a checkpoint file.
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}

/// Parses checkpoint bytes, verifying the digest and every tensor shape.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 32 {
        return Err(CheckpointError::Corrupt("shorter than its digest".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::DigestMismatch);
    }

    let mut r = Reader { bytes: body, at: 0 };
    if r.take(MAGIC.len())? != MAGIC.as_slice() {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let config = ModelConfig {
        vocab_size: r.u32()? as usize,
        d_model: r.u32()? as usize,
        n_layers: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        d_ff: r.u32()? as usize,
        max_len: r.u32()? as usize,
        seed: r.u64()?,
    };
    let mut params = Params::<f32>::zeros(&config)?;
    let n_tensors = r.u32()? as usize;

    let mut head_w: Option<Vec<f32>> = None;
    let mut head_b: Option<f32> = None;
    let mut filled = std::collections::HashSet::new();
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
        }
        match name.as_str() {
            "rtd_head.w" => head_w = Some(data),
            "rtd_head.b" => head_b = data.first().copied(),
            _ => {
                let mut slots = params.tensors_mut();
                let slot = slots
                    .iter_mut()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
                if slot.1.len() != count {
                    let expected = expected_shape(&params_shapes(&config), &name);
                    return Err(CheckpointError::ShapeMismatch { name, expected, found: shape });
                }
                slot.1.copy_from_slice(&data);
            }
        }
        if !filled.insert(name.clone()) {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor {name:?}")));
        }
    }
    if r.at != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after tensors".into()));
    }
    let expected_names: Vec<String> =
        params.named_tensors().into_iter().map(|t| t.name).collect();
    for name in expected_names {
        if !filled.contains(&name) {
            return Err(CheckpointError::Corrupt(format!("missing tensor {name:?}")));
        }
    }

    let rtd_head = match (head_w, head_b) {
        (Some(w), Some(b)) => Some(RtdHead { w, b }),
        (None, None) => None,
        _ => return Err(CheckpointError::Corrupt("partial rtd head".into())),
    };
    Ok(Checkpoint { config, params, rtd_head })
}

fn params_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    Params::<f32>::zeros(config)
        .expect("config validated by caller")
        .named_tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect()
}

fn expected_shape(shapes: &[(String, Vec<usize>)], name: &str) -> Vec<usize> {
    shapes
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, s)| s.clone())
        .unwrap_or_default()
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

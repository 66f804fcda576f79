//! Binary checkpoints: magic + version header, JSON config and training
//! history, a named-tensor table, then raw little-endian f64 blobs.
//!
//! Loading a checkpoint reproduces forward outputs bit-exactly.

use std::fs;
use std::path::Path;

use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamSet, Tensor};
use crate::train::TrainingHistory;

const MAGIC: &[u8; 4] = b"FPCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes (not a checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint parameters do not match the stored config: {0}")]
    Inconsistent(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Param,
    Buffer,
}

/// Write the model (and optional training history) to `path`.
pub fn save(
    model: &Model,
    history: Option<&TrainingHistory>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let config = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);

    let history = match history {
        Some(h) => serde_json::to_vec(h).expect("history serializes"),
        None => b"null".to_vec(),
    };
    out.extend_from_slice(&(history.len() as u32).to_le_bytes());
    out.extend_from_slice(&history);

    let entries: Vec<(Kind, &String, &Tensor)> = model
        .params
        .iter()
        .map(|(n, t)| (Kind::Param, n, t))
        .chain(model.buffers.iter().map(|(n, t)| (Kind::Buffer, n, t)))
        .collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (kind, name, tensor) in &entries {
        out.push(match kind {
            Kind::Param => 0,
            Kind::Buffer => 1,
        });
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, _, tensor) in &entries {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fs::write(path, out).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load a checkpoint, verifying magic, version, and that the stored tensor
/// set exactly matches what the stored config defines.
pub fn load(path: &Path) -> Result<(Model, Option<TrainingHistory>), CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }

    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let history_len = r.u32()? as usize;
    let history: Option<TrainingHistory> = serde_json::from_slice(r.take(history_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("history: {e}")))?;

    let n_entries = r.u32()? as usize;
    let mut table: Vec<(Kind, String, Vec<usize>)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let kind = match r.u8()? {
            0 => Kind::Param,
            1 => Kind::Buffer,
            k => return Err(CheckpointError::Corrupt(format!("entry kind {k}"))),
        };
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("entry name".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        table.push((kind, name, shape));
    }

    let mut params = ParamSet::new();
    let mut buffers = ParamSet::new();
    for (kind, name, shape) in &table {
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(shape, data);
        let dest = match kind {
            Kind::Param => &mut params,
            Kind::Buffer => &mut buffers,
        };
        if dest.contains(name) {
            return Err(CheckpointError::Corrupt(format!("duplicate entry {name:?}")));
        }
        dest.insert(name, tensor);
    }

    // the stored tensors must be exactly the set the config defines
    let skeleton = Model::build(config.clone(), 0)
        .map_err(|e| CheckpointError::Corrupt(format!("config does not build: {e}")))?;
    for (expect, got, label) in [
        (&skeleton.params, &params, "params"),
        (&skeleton.buffers, &buffers, "buffers"),
    ] {
        if expect.len() != got.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "{label}: {} stored, {} expected",
                got.len(),
                expect.len()
            )));
        }
        for (name, tensor) in expect.iter() {
            if !got.contains(name) {
                return Err(CheckpointError::Inconsistent(format!(
                    "{label}: missing {name:?}"
                )));
            }
            if got.get(name).shape() != tensor.shape() {
                return Err(CheckpointError::Inconsistent(format!(
                    "{label}: {name:?} shape {:?}, expected {:?}",
                    got.get(name).shape(),
                    tensor.shape()
                )));
            }
        }
    }

    Ok((
        Model {
            config,
            params,
            buffers,
        },
        history,
    ))
}

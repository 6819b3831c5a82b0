//! Length-prefixed binary checkpoints: a JSON header with the model
//! config, then named f64 tensors (parameters first, then optimizer
//! moments under `adam_m.` / `adam_v.` prefixes). Everything is
//! little-endian; bytes are a pure function of the saved state.

use moelab_core::model::{ModelConfig, ParamKind, Params};
use moelab_core::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"MOECKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unreadable header: {0}")]
    BadHeader(String),
    #[error("unknown parameter kind code {0}")]
    UnknownKind(u8),
    #[error("optimizer moments do not match the saved parameters")]
    MomentMismatch,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: u32,
    model: ModelConfig,
    optimizer_steps: usize,
    has_moments: bool,
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Embedding => 0,
        ParamKind::Attention => 1,
        ParamKind::DenseFfn => 2,
        ParamKind::ExpertFfn => 3,
        ParamKind::Router => 4,
        ParamKind::Norm => 5,
        ParamKind::OutputProjection => 6,
    }
}

fn kind_from_code(code: u8) -> Result<ParamKind, CheckpointError> {
    Ok(match code {
        0 => ParamKind::Embedding,
        1 => ParamKind::Attention,
        2 => ParamKind::DenseFfn,
        3 => ParamKind::ExpertFfn,
        4 => ParamKind::Router,
        5 => ParamKind::Norm,
        6 => ParamKind::OutputProjection,
        other => return Err(CheckpointError::UnknownKind(other)),
    })
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
    /// (first moments, second moments, optimizer step count); present
    /// when the checkpoint was saved with optimizer state.
    pub moments: Option<(Vec<Tensor>, Vec<Tensor>, usize)>,
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_tensor(
    w: &mut impl Write,
    name: &str,
    kind: ParamKind,
    tensor: &Tensor,
) -> io::Result<()> {
    write_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[kind_code(kind)])?;
    w.write_all(&[tensor.shape().len() as u8])?;
    for &d in tensor.shape() {
        write_u64(w, d as u64)?;
    }
    for &x in tensor.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, ParamKind, Tensor), CheckpointError> {
    let name_len = read_u64(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| CheckpointError::BadHeader(format!("tensor name: {e}")))?;
    let mut meta = [0u8; 2];
    r.read_exact(&mut meta)?;
    let kind = kind_from_code(meta[0])?;
    let ndim = meta[1] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let tensor = Tensor::new(&shape, data)
        .map_err(|e| CheckpointError::BadHeader(format!("tensor {name}: {e}")))?;
    Ok((name, kind, tensor))
}

pub fn write_checkpoint(
    w: &mut impl Write,
    config: &ModelConfig,
    params: &Params,
    moments: Option<(&[Tensor], &[Tensor], usize)>,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    let header = Header {
        schema: 1,
        model: config.clone(),
        optimizer_steps: moments.map_or(0, |(_, _, t)| t),
        has_moments: moments.is_some(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    write_u64(w, header_json.len() as u64)?;
    w.write_all(&header_json)?;

    let entry_count = params.len() * if moments.is_some() { 3 } else { 1 };
    write_u64(w, entry_count as u64)?;
    for entry in params.entries() {
        write_tensor(w, &entry.name, entry.kind, &entry.tensor)?;
    }
    if let Some((m, v, _)) = moments {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(CheckpointError::MomentMismatch);
        }
        for (entry, t) in params.entries().iter().zip(m) {
            write_tensor(w, &format!("adam_m.{}", entry.name), entry.kind, t)?;
        }
        for (entry, t) in params.entries().iter().zip(v) {
            write_tensor(w, &format!("adam_v.{}", entry.name), entry.kind, t)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = read_u64(r)? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let entry_count = read_u64(r)? as usize;
    let mut params = Params::default();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..entry_count {
        let (name, kind, tensor) = read_tensor(r)?;
        if let Some(rest) = name.strip_prefix("adam_m.") {
            if params.index_of(rest) != Some(m.len()) {
                return Err(CheckpointError::MomentMismatch);
            }
            m.push(tensor);
        } else if let Some(rest) = name.strip_prefix("adam_v.") {
            if params.index_of(rest) != Some(v.len()) {
                return Err(CheckpointError::MomentMismatch);
            }
            v.push(tensor);
        } else {
            params.push(name, kind, tensor);
        }
    }
    let moments = if header.has_moments {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(CheckpointError::MomentMismatch);
        }
        Some((m, v, header.optimizer_steps))
    } else {
        None
    };
    Ok(Checkpoint { config: header.model, params, moments })
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &Params,
    moments: Option<(&[Tensor], &[Tensor], usize)>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, params, moments)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use moelab_core::model::{build_model, ModelConfig};

    #[test]
    fn roundtrip_preserves_config_params_and_moments() {
        let cfg = ModelConfig::default();
        let params = build_model(&cfg, 5).unwrap();
        let m: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|e| {
                Tensor::new(
                    e.tensor.shape(),
                    e.tensor.data().iter().map(|x| x * 0.5).collect(),
                )
                .unwrap()
            })
            .collect();
        let v: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|e| Tensor::new(e.tensor.shape(), vec![0.25; e.tensor.numel()]).unwrap())
            .collect();

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &params, Some((&m, &v, 42))).unwrap();
        let loaded = read_checkpoint(&mut buf.as_slice()).unwrap();

        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.params, params);
        let (lm, lv, steps) = loaded.moments.unwrap();
        assert_eq!(lm, m);
        assert_eq!(lv, v);
        assert_eq!(steps, 42);
    }

    #[test]
    fn roundtrip_without_moments() {
        let cfg = ModelConfig::default();
        let params = build_model(&cfg, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &params, None).unwrap();
        let loaded = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.params, params);
        assert!(loaded.moments.is_none());
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let cfg = ModelConfig::default();
        let params = build_model(&cfg, 9).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_checkpoint(&mut a, &cfg, &params, None).unwrap();
        write_checkpoint(&mut b, &cfg, &params, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn garbage_is_rejected_not_misread() {
        assert!(matches!(
            read_checkpoint(&mut &b"NOTACKPT"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut truncated = Vec::new();
        let cfg = ModelConfig::default();
        let params = build_model(&cfg, 2).unwrap();
        write_checkpoint(&mut truncated, &cfg, &params, None).unwrap();
        truncated.truncate(truncated.len() / 2);
        assert!(read_checkpoint(&mut truncated.as_slice()).is_err());
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Velocities;
use super::params::{ModelParameters, ParamKind, ParamTensor};
use super::{ArchitectureConfig, Network, OptimizerConfig};
use crate::error::{Error, Result};
use crate::raster::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UTNC";
pub const CHECKPOINT_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// City ids in class-label order.
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchitectureConfig,
    pub state: TrainingState,
    pub params: ModelParameters<f32>,
    pub velocities: Option<Velocities<f32>>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    kind: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: ArchitectureConfig,
    training: TrainingState,
    tensors: Vec<IndexEntry>,
}

fn kind_str(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Weight => "weight",
        ParamKind::Affine => "affine",
        ParamKind::RunningStat => "running_stat",
    }
}

fn parse_kind(s: &str) -> Result<ParamKind> {
    Ok(match s {
        "weight" => ParamKind::Weight,
        "affine" => ParamKind::Affine,
        "running_stat" => ParamKind::RunningStat,
        other => return Err(Error::Checkpoint(format!("unknown tensor kind {other:?}"))),
    })
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, state: TrainingState, velocities: Option<Velocities<f32>>) -> Self {
        Checkpoint { arch: net.arch.clone(), state, params: net.params.clone(), velocities }
    }

    pub fn network(&self) -> Result<Network<f32>> {
        Network::from_parameters(self.arch.clone(), self.params.clone())
    }

    fn blobs(&self) -> Vec<(String, &ParamTensor<f32>)> {
        let mut v: Vec<(String, &ParamTensor<f32>)> = self.params.tensors.iter().map(|t| (t.name.clone(), t)).collect();
        if let Some(vel) = &self.velocities {
            for (t, _) in self.params.tensors.iter().zip(vel) {
                if t.kind.trainable() {
                    v.push((format!("{VELOCITY_PREFIX}{}", t.name), t));
                }
            }
        }
        v
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let vel_data = |name: &str| -> Option<&[f32]> {
            let inner = name.strip_prefix(VELOCITY_PREFIX)?;
            let i = self.params.tensors.iter().position(|t| t.name == inner)?;
            self.velocities.as_ref().map(|v| v[i].as_slice())
        };
        let mut body = Vec::new();
        let mut index = Vec::new();
        for (name, t) in self.blobs() {
            let data = if name.starts_with(VELOCITY_PREFIX) { vel_data(&name).unwrap_or(&[]) } else { &t.data[..] };
            if data.len() != t.data.len() {
                return Err(bad(format!("tensor {name} has {} values, shape needs {}", data.len(), t.data.len())));
            }
            index.push(IndexEntry { name: name.clone(), shape: t.shape.clone(), kind: kind_str(t.kind).into(), offset: body.len() as u64 });
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in data {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header { architecture: self.arch.clone(), training: self.state.clone(), tensors: index })?;
        let mut out = Vec::with_capacity(16 + header.len() + body.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let body_start = r.pos;
        let mut tensors = Vec::new();
        let mut vel_map = Vec::new();
        for e in &header.tensors {
            if (r.pos - body_start) as u64 != e.offset {
                return Err(bad(format!("tensor {} not at its indexed offset", e.name)));
            }
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            if name != e.name {
                return Err(bad(format!("blob {name} does not match index entry {}", e.name)));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != e.shape {
                return Err(bad(format!("tensor {name} shape differs from index")));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if let Some(inner) = name.strip_prefix(VELOCITY_PREFIX) {
                vel_map.push((inner.to_string(), data));
            } else {
                tensors.push(ParamTensor { name: name.to_string(), shape, kind: parse_kind(&e.kind)?, data });
            }
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        let params = ModelParameters { tensors };
        let velocities = if vel_map.is_empty() {
            None
        } else {
            let mut v = params.zeros_like();
            for (name, data) in vel_map {
                let i = params
                    .tensors
                    .iter()
                    .position(|t| t.name == name)
                    .ok_or_else(|| bad(format!("velocity for unknown tensor {name}")))?;
                v[i] = data;
            }
            Some(v)
        };
        if !params.all_finite() {
            return Err(bad("checkpoint contains non-finite parameters"));
        }
        let ck = Checkpoint { arch: header.architecture, state: header.training, params, velocities };
        // rejects tensors that do not fit the architecture
        ck.network()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Hex SHA-256 of a checkpoint file.
pub fn checkpoint_sha256(path: &Path) -> Result<String> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

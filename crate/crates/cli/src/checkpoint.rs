//! Binary checkpoints.
//!
//! ```text
//! "ECSP" | version u32 | config_len u32 | [model] text | record_count u32
//! record: kind u8 | name_len u32 | name | rows u64 | cols u64 | rows*cols f64
//! SHA-256 of every preceding byte (32 bytes)
//! ```
//!
//! All integers and floats are little-endian.

use crate::config::{model_section, RunConfig};
use cosparse::model::{Model, ParamStore, RopeTable};
use cosparse::numerics::Matrix;
use cosparse::trainer::AdamState;
use indexmap::IndexMap;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ECSP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_ADAM_M: u8 = 2;
const KIND_ADAM_V: u8 = 3;
const KIND_ADAM_SCALARS: u8 = 4;
const ADAM_SCALARS: &str = "adam";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot read checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
}

fn put_record(out: &mut Vec<u8>, kind: u8, name: &str, m: &Matrix) {
    out.push(kind);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str, CheckpointError> {
        std::str::from_utf8(self.take(n)?).map_err(|_| corrupt("name is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: Option<AdamState>) -> Self {
        Self { model, optimizer }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = model_section(self.model.config());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        let params = self.model.params();
        let buffers = self.model.buffers();
        let mut count = params.len() + buffers.len();
        if let Some(o) = &self.optimizer {
            count += 1 + o.first_moments().len() + o.second_moments().len();
        }
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, m) in params.iter() {
            put_record(&mut out, KIND_PARAM, name, m);
        }
        for (name, table) in buffers {
            put_record(&mut out, KIND_BUFFER, name, &Matrix::row_vector(table.freqs()));
        }
        if let Some(o) = &self.optimizer {
            let scalars = Matrix::row_vector(&[o.t() as f64, o.lr, o.weight_decay]);
            put_record(&mut out, KIND_ADAM_SCALARS, ADAM_SCALARS, &scalars);
            for (name, m) in o.first_moments() {
                put_record(&mut out, KIND_ADAM_M, name, m);
            }
            for (name, m) in o.second_moments() {
                put_record(&mut out, KIND_ADAM_V, name, m);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(corrupt("missing ECSP header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = r.str(cfg_len)?;
        let config = RunConfig::parse(cfg_text)
            .map_err(|e| corrupt(format!("config block: {e}")))?
            .model;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut buffers = IndexMap::new();
        let (mut m, mut v) = (IndexMap::new(), IndexMap::new());
        let mut scalars = None;
        for _ in 0..count {
            let kind = r.u8()?;
            let name_len = r.u32()? as usize;
            let name = r.str(name_len)?.to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| corrupt("tensor too large"))?;
            let data: Vec<f64> = r
                .take(len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mat = Matrix::from_vec(rows, cols, data).map_err(|e| corrupt(e.to_string()))?;
            let dup = match kind {
                KIND_PARAM => params.insert_new(name, mat),
                KIND_BUFFER => buffers.insert(name, RopeTable::from_freqs(mat.into_vec())).is_none(),
                KIND_ADAM_M => m.insert(name, mat).is_none(),
                KIND_ADAM_V => v.insert(name, mat).is_none(),
                KIND_ADAM_SCALARS if name == ADAM_SCALARS && mat.len() == 3 => scalars.replace(mat).is_none(),
                _ => return Err(corrupt(format!("unknown record kind {kind} for {name}"))),
            };
            if !dup {
                return Err(corrupt("repeated record"));
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after records"));
        }
        let model = Model::from_parts(config, params, buffers).map_err(|e| corrupt(e.to_string()))?;
        let optimizer = match scalars {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(corrupt("optimizer moments without optimizer scalars")),
            Some(s) => {
                let t = s.data()[0];
                if !(t >= 0.0 && t.fract() == 0.0) {
                    return Err(corrupt("bad optimizer step counter"));
                }
                let o = AdamState::from_parts(s.data()[1], s.data()[2], t as u64, m, v)
                    .map_err(|e| corrupt(e.to_string()))?;
                if !o.shapes_match(model.params()) {
                    return Err(corrupt("optimizer moments do not match weight shapes"));
                }
                Some(o)
            }
        };
        Ok(Self { model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<[u8; DIGEST_LEN], CheckpointError> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(bytes[bytes.len() - DIGEST_LEN..].try_into().expect("digest"))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Hex SHA-256 stored in the trailer of a checkpoint file.
pub fn checksum_hex(bytes: &[u8]) -> String {
    bytes[bytes.len().saturating_sub(DIGEST_LEN)..]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

trait InsertNew {
    fn insert_new(&mut self, name: String, m: Matrix) -> bool;
}

impl InsertNew for ParamStore {
    fn insert_new(&mut self, name: String, m: Matrix) -> bool {
        if self.contains(&name) {
            return false;
        }
        self.insert(name, m);
        true
    }
}

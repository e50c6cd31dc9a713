//! SSNC checkpoint files.
//!
//! ```text
//! "SSNC" | version u32 | config hash u64 | json len u32 | config json
//! param count u32, per param: name len u16 | name | rows u32 | cols u32 | f32 data
//! adam step u64, per param: first moment f32 data | second moment f32 data
//! epoch u64 | batch in epoch u64 | global step u64
//! loss count u64, per record: epoch u64 | step u64 | L_c f64 | has L_k u8 | L_k f64 | total f64 | lr f64
//! metric count u64, per record: epoch u64 | name len u16 | name | value f64
//! sha-256 of all preceding bytes (32 bytes)
//! ```
//!
//! Little-endian throughout. The config hash is the first 8 bytes of the
//! SHA-256 of the config json.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, LossRecord, MetricRecord, TrainConfig};
use crate::compose::{ModelConfig, SsnParameters};
use crate::error::{Result, SsnError};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSNC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: SsnParameters,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Next batch within `epoch`.
    pub batch_in_epoch: usize,
    pub global_step: u64,
    pub history: Vec<LossRecord>,
    pub metrics: Vec<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn hash_of(json: &[u8]) -> u64 {
    let d = Sha256::digest(json);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn err(m: impl Into<String>) -> SsnError {
    SsnError::Checkpoint(m.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| err("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("name is not utf-8"))
    }
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

impl Checkpoint {
    fn config_json(&self) -> Vec<u8> {
        serde_json::to_vec(&StoredConfig {
            model: self.params.config().clone(),
            train: self.config.clone(),
        })
        .expect("config serializes")
    }

    pub fn config_hash(&self) -> u64 {
        hash_of(&self.config_json())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let json = self.config_json();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&hash_of(&json).to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for e in self.params.entries() {
            put_name(&mut out, &e.name);
            out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
            put_f32s(&mut out, &e.value);
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            put_f32s(&mut out, m);
            put_f32s(&mut out, v);
        }
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&(self.batch_in_epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.global_step.to_le_bytes());
        out.extend_from_slice(&(self.history.len() as u64).to_le_bytes());
        for r in &self.history {
            out.extend_from_slice(&(r.epoch as u64).to_le_bytes());
            out.extend_from_slice(&r.step.to_le_bytes());
            out.extend_from_slice(&r.l_c.to_le_bytes());
            out.push(r.l_k.is_some() as u8);
            out.extend_from_slice(&r.l_k.unwrap_or(0.0).to_le_bytes());
            out.extend_from_slice(&r.total.to_le_bytes());
            out.extend_from_slice(&r.lr.to_le_bytes());
        }
        out.extend_from_slice(&(self.metrics.len() as u64).to_le_bytes());
        for m in &self.metrics {
            out.extend_from_slice(&(m.epoch as u64).to_le_bytes());
            put_name(&mut out, &m.name);
            out.extend_from_slice(&m.value.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a whole file; any inconsistency fails without a partial result.
    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 + 4 + DIGEST_LEN || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(err("not an SSNC checkpoint"));
        }
        let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch, file is corrupted"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let hash = r.u64()?;
        let json_len = r.u32()? as usize;
        let json = r.take(json_len)?;
        if hash_of(json) != hash {
            return Err(err("config hash does not match embedded config"));
        }
        let stored: StoredConfig =
            serde_json::from_slice(json).map_err(|e| err(format!("config: {e}")))?;

        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.name()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.f32s(rows * cols)?;
            named.push((name, Tensor::matrix(rows, cols, data)?));
        }
        let params = SsnParameters::from_named(&stored.model, named)
            .map_err(|e| err(format!("parameter table: {e}")))?;
        let step = r.u64()?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for e in params.entries() {
            let shape = e.value.shape().to_vec();
            m.push(Tensor::new(shape.clone(), r.f32s(e.value.len())?)?);
            v.push(Tensor::new(shape, r.f32s(e.value.len())?)?);
        }
        let epoch = r.u64()? as usize;
        let batch_in_epoch = r.u64()? as usize;
        let global_step = r.u64()?;
        let n = r.u64()?;
        let mut history = Vec::new();
        for _ in 0..n {
            let epoch = r.u64()? as usize;
            let step = r.u64()?;
            let l_c = r.f64()?;
            let has_lk = r.u8()?;
            let lk = r.f64()?;
            history.push(LossRecord {
                epoch,
                step,
                l_c,
                l_k: (has_lk != 0).then_some(lk),
                total: r.f64()?,
                lr: r.f64()?,
            });
        }
        let n = r.u64()?;
        let mut metrics = Vec::new();
        for _ in 0..n {
            let epoch = r.u64()? as usize;
            let name = r.name()?;
            metrics.push(MetricRecord {
                epoch,
                name,
                value: r.f64()?,
            });
        }
        if r.pos != body.len() {
            return Err(err(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            config: stored.train,
            params,
            optimizer: AdamState { step, m, v },
            epoch,
            batch_in_epoch,
            global_step,
            history,
            metrics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| SsnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| SsnError::io(path, e))?;
        Self::decode(&bytes)
    }
}

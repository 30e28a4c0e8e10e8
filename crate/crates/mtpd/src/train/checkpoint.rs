//! Versioned binary checkpoints.
//!
//! Layout (little-endian throughout):
//!   magic "MTPD", u32 version,
//!   u32 config-json length + bytes,
//!   u64 step, u64 rng seed, 16-byte rng word position,
//!   u32 freeze-mask entry count + length-prefixed UTF-8 names,
//!   u8 moments flag, u64 optimizer step (when flagged),
//!   u32 parameter record count, then records of
//!     { u32 name length, UTF-8 name, u64 element count, f32 payload }.
//! Optimizer moments ride as extra records named "m.<param>" / "v.<param>".
//! Round trips are bitwise; version or magic mismatches are rejected
//! outright, as are truncated files.

use super::optim::AdamW;
use super::TrainError;
use crate::model::{init_model, ModelConfig, MtpModel};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MTPD";
pub const VERSION: u32 = 1;

/// Everything needed to resume training deterministically.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub freeze: BTreeSet<String>,
    pub model: MtpModel,
    pub opt: Option<AdamW>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &MtpModel,
    opt: Option<&AdamW>,
    step: u64,
    rng_seed: u64,
    rng_word_pos: u128,
    freeze: &BTreeSet<String>,
) -> Result<(), TrainError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).expect("model config serializes");
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&rng_seed.to_le_bytes());
    buf.extend_from_slice(&rng_word_pos.to_le_bytes());
    buf.extend_from_slice(&(freeze.len() as u32).to_le_bytes());
    for name in freeze {
        write_str(&mut buf, name);
    }
    match opt {
        Some(o) => {
            buf.push(1);
            buf.extend_from_slice(&o.step.to_le_bytes());
        }
        None => buf.push(0),
    }
    let n_entries = model.params.len();
    let record_count = n_entries * if opt.is_some() { 3 } else { 1 };
    buf.extend_from_slice(&(record_count as u32).to_le_bytes());
    for e in model.params.entries() {
        write_record(&mut buf, &e.name, e.value.data());
    }
    if let Some(o) = opt {
        for (i, e) in model.params.entries().iter().enumerate() {
            write_record(&mut buf, &format!("m.{}", e.name), o.m[i].data());
            write_record(&mut buf, &format!("v.{}", e.name), o.v[i].data());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&buf))
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| TrainError::CheckpointIo {
            path: path.display().to_string(),
            source: e,
        })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TrainError::CheckpointIo {
            path: path.display().to_string(),
            source: e,
        })?;
    let mut r = Reader { buf: &bytes, off: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(TrainError::CheckpointFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TrainError::CheckpointFormat(format!(
            "unknown version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| TrainError::CheckpointFormat(format!("config: {e}")))?;
    let step = r.u64()?;
    let rng_seed = r.u64()?;
    let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let freeze_count = r.u32()?;
    let mut freeze = BTreeSet::new();
    for _ in 0..freeze_count {
        freeze.insert(r.string()?);
    }
    let has_moments = r.take(1)?[0] == 1;
    let opt_step = if has_moments { r.u64()? } else { 0 };

    let mut model = init_model(config.clone()).map_err(|e| {
        TrainError::CheckpointFormat(format!("config does not build a model: {e}"))
    })?;
    let mut opt = has_moments.then(|| AdamW::new(&model.params));
    if let Some(o) = opt.as_mut() {
        o.step = opt_step;
    }

    let record_count = r.u32()?;
    let mut filled = vec![false; model.params.len()];
    let mut filled_m = vec![false; model.params.len()];
    let mut filled_v = vec![false; model.params.len()];
    for _ in 0..record_count {
        let name = r.string()?;
        let count = r.u64()? as usize;
        let data = r.f32s(count)?;
        let (target, kind) = match name.strip_prefix("m.") {
            Some(base) => (base.to_string(), 1u8),
            None => match name.strip_prefix("v.") {
                Some(base) => (base.to_string(), 2),
                None => (name.clone(), 0),
            },
        };
        let idx = model
            .params
            .index_of(&target)
            .ok_or_else(|| TrainError::CheckpointFormat(format!("unknown parameter {name}")))?;
        let expect = model.params.tensor(idx).numel();
        if expect != count {
            return Err(TrainError::CheckpointFormat(format!(
                "parameter {name}: {count} elements, model expects {expect}"
            )));
        }
        match kind {
            0 => {
                model.params.set(idx, data);
                filled[idx] = true;
            }
            1 => {
                let o = opt.as_mut().ok_or_else(|| {
                    TrainError::CheckpointFormat("moment record without moments flag".into())
                })?;
                o.m[idx] = crate::Tensor::new(o.m[idx].shape().to_vec(), data);
                filled_m[idx] = true;
            }
            _ => {
                let o = opt.as_mut().ok_or_else(|| {
                    TrainError::CheckpointFormat("moment record without moments flag".into())
                })?;
                o.v[idx] = crate::Tensor::new(o.v[idx].shape().to_vec(), data);
                filled_v[idx] = true;
            }
        }
    }
    if let Some(i) = filled.iter().position(|f| !f) {
        return Err(TrainError::CheckpointFormat(format!(
            "missing parameter {}",
            model.params.entries()[i].name
        )));
    }
    if has_moments {
        if let Some(i) = filled_m
            .iter()
            .zip(&filled_v)
            .position(|(m, v)| !m || !v)
        {
            return Err(TrainError::CheckpointFormat(format!(
                "missing moments for {}",
                model.params.entries()[i].name
            )));
        }
    }
    Ok(Checkpoint {
        config,
        step,
        rng_seed,
        rng_word_pos,
        freeze,
        model,
        opt,
    })
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn write_record(buf: &mut Vec<u8>, name: &str, data: &[f32]) {
    write_str(buf, name);
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.off + n > self.buf.len() {
            return Err(TrainError::CheckpointFormat("truncated file".into()));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, TrainError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| TrainError::CheckpointFormat("non-UTF-8 name".into()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, TrainError> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ENDOSRCK" | version u32 | config echo (u64 len + utf-8)
//! step u64 | rng (seed u64, state u64, cached flag u8 [+ f64])
//! schedule: kind u8, param0 f64, param1 f64, T u32, beta f64 x T
//! 4 sections (params, ema, adam_m, adam_v):
//!   tensor count u32, then per tensor:
//!     name (u32 len + utf-8) | rank u32 | extents u32 x rank | f32 data
//! sha-256 over everything above (32 bytes)
//! ```
//!
//! Tensor payloads are 32-bit floats; save/load in f32 round-trips bitwise.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::denoiser::params::ParamSet;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::{Element, Tensor};
use crate::training::TrainState;

const MAGIC: &[u8; 8] = b"ENDOSRCK";
const VERSION: u32 = 1;

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn put_params<T: Element>(buf: &mut Vec<u8>, set: &ParamSet<T>) {
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, tensor) in set.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

/// Serialize a training state; tensor data is stored in single precision.
pub fn save<T: Element>(state: &TrainState<T>, config_echo: &str, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut buf, config_echo.as_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());

    let (seed, rng_state, cached) = state.rng.state();
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&rng_state.to_le_bytes());
    match cached {
        Some(v) => {
            buf.push(1);
            buf.extend_from_slice(&v.to_le_bytes());
        }
        None => buf.push(0),
    }

    match state.schedule.kind() {
        ScheduleKind::Linear {
            beta_start,
            beta_end,
        } => {
            buf.push(0);
            buf.extend_from_slice(&beta_start.to_le_bytes());
            buf.extend_from_slice(&beta_end.to_le_bytes());
        }
        ScheduleKind::Cosine { s } => {
            buf.push(1);
            buf.extend_from_slice(&s.to_le_bytes());
            buf.extend_from_slice(&0f64.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(state.schedule.steps() as u32).to_le_bytes());
    for &b in state.schedule.betas() {
        buf.extend_from_slice(&b.to_le_bytes());
    }

    put_params(&mut buf, &state.params);
    put_params(&mut buf, &state.ema_params);
    put_params(&mut buf, &state.adam_m);
    put_params(&mut buf, &state.adam_v);

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf).map_err(|e| CoreError::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::CheckpointFormat(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CoreError::CheckpointFormat("non-utf8 string".into()))
    }
}

fn read_params(c: &mut Cursor<'_>) -> Result<ParamSet<f32>> {
    let count = c.u32()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.string(name_len)?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(c.f32()?);
        }
        set.push(name, Tensor::new(shape, data)?);
    }
    Ok(set)
}

/// A loaded checkpoint: single-precision state plus the resolved-config
/// echo needed to rebuild the model around it.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub config_echo: String,
    pub state: TrainState<f32>,
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let buf = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if buf.len() < MAGIC.len() + 4 + 32 {
        return Err(CoreError::CheckpointFormat("file too short".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if &body[..8] != MAGIC {
        return Err(CoreError::CheckpointFormat(format!(
            "bad magic {:02x?} (format v{VERSION} expects {MAGIC:02x?})",
            &body[..8]
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CoreError::CheckpointFormat(
            "checksum mismatch: file corrupt".into(),
        ));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(CoreError::CheckpointFormat(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let echo_len = c.u64()? as usize;
    let config_echo = c.string(echo_len)?;
    let step = c.u64()?;
    let seed = c.u64()?;
    let rng_state = c.u64()?;
    let cached = match c.u8()? {
        0 => None,
        1 => Some(c.f64()?),
        other => {
            return Err(CoreError::CheckpointFormat(format!(
                "bad rng cache flag {other}"
            )))
        }
    };
    let rng = Rng::from_state(seed, rng_state, cached);

    let kind_tag = c.u8()?;
    let p0 = c.f64()?;
    let p1 = c.f64()?;
    let steps = c.u32()? as usize;
    let mut betas = Vec::with_capacity(steps);
    for _ in 0..steps {
        betas.push(c.f64()?);
    }
    let kind = match kind_tag {
        0 => ScheduleKind::Linear {
            beta_start: p0,
            beta_end: p1,
        },
        1 => ScheduleKind::Cosine { s: p0 },
        other => {
            return Err(CoreError::CheckpointFormat(format!(
                "unknown schedule kind {other}"
            )))
        }
    };
    let schedule = NoiseSchedule::from_betas(kind, betas)?;

    let params = read_params(&mut c)?;
    let ema_params = read_params(&mut c)?;
    let adam_m = read_params(&mut c)?;
    let adam_v = read_params(&mut c)?;
    if c.pos != body.len() {
        return Err(CoreError::CheckpointFormat(format!(
            "{} trailing bytes after sections",
            body.len() - c.pos
        )));
    }
    Ok(LoadedCheckpoint {
        config_echo,
        state: TrainState {
            step,
            params,
            ema_params,
            adam_m,
            adam_v,
            schedule,
            rng,
        },
    })
}

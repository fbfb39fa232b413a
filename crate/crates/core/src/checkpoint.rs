//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "EVFCKPT1"
//! version  u32       FORMAT_VERSION
//! header   u64 len + UTF-8 JSON (stage, progress, step, seed, model and
//!          data dims, stage transitions)
//! count    u32       number of parameter blobs
//! blob     u32 name len, name, u8 group, u32 rank, u64 dims…,
//!          u64 adam step, then value, first moment, second moment
//!          as f64 arrays of the tensor's length
//! digest   32 bytes  SHA-256 of everything above
//! ```
//!
//! Blobs are stored in parameter-creation order; loading matches them by
//! name and rejects any shape or group mismatch.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DataDims, Model, ModelConfig, Stage};
use crate::params::ParamGroup;
use crate::tensor::Tensor;
use crate::trainer::{Adam, AdamSlot, StageTransition, TrainState};

pub const MAGIC: &[u8; 8] = b"EVFCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    progress: [usize; 3],
    step: u64,
    seed: u64,
    model: ModelConfig,
    dims: DataDims,
    transitions: Vec<StageTransition>,
}

fn group_code(g: ParamGroup) -> u8 {
    ParamGroup::ALL.iter().position(|&x| x == g).expect("listed group") as u8
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        stage: state.stage,
        progress: state.progress,
        step: state.step,
        seed: state.seed,
        model: state.model.config,
        dims: state.model.dims,
        transitions: state.transitions.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(state.model.store.len() as u32).to_le_bytes());
    for ((id, p), slot) in state.model.store.iter().zip(&state.adam.slots) {
        debug_assert_eq!(slot.m.len(), p.value.len(), "slot {}", id.0);
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(group_code(p.group));
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&slot.step.to_le_bytes());
        for arr in [p.value.data(), &slot.m, &slot.v] {
            for x in arr {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("blob too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch, file is corrupt".into()));
    }
    let hlen = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = Model::new(header.model, header.dims, 0)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model has {}",
            model.store.len()
        )));
    }
    let mut slots: Vec<Option<AdamSlot>> = vec![None; count];
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let group = ParamGroup::ALL
            .get(r.u8()? as usize)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("bad group code for {name}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let step = r.u64()?;
        let n: usize = shape.iter().product();
        let value = r.f64s(n)?;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = model.store.get(id);
        if p.value.shape() != shape.as_slice() || p.group != group {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored {shape:?}/{} but model expects {:?}/{}",
                group.name(),
                p.value.shape(),
                p.group.name()
            )));
        }
        if slots[id.0].is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        model.store.set(id, Tensor::new(shape, value)?)?;
        slots[id.0] = Some(AdamSlot { m, v, step });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(TrainState {
        model,
        adam: Adam {
            slots: slots.into_iter().map(|s| s.expect("all slots filled")).collect(),
        },
        stage: header.stage,
        progress: header.progress,
        step: header.step,
        seed: header.seed,
        transitions: header.transitions,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let model = Model::new(
            ModelConfig::micro(),
            DataDims {
                vocab: 12,
                d_x: 1,
                horizon: 3,
                d_y: 1,
            },
            4,
        )
        .unwrap();
        let mut s = TrainState::new(model, 4);
        s.adam.slots[2].m[0] = 0.25;
        s.adam.slots[2].step = 7;
        s.step = 7;
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = state();
        let a = to_bytes(&s).unwrap();
        let back = from_bytes(&a).unwrap();
        assert_eq!(back.model.store, s.model.store);
        assert_eq!(back.adam, s.adam);
        assert_eq!(to_bytes(&back).unwrap(), a);
    }

    #[test]
    fn rejects_damage() {
        let a = to_bytes(&state()).unwrap();
        let mut flipped = a.clone();
        let k = flipped.len() / 2;
        flipped[k] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("digest")));
        let mut ver = a.clone();
        ver[8] = 9;
        assert!(matches!(from_bytes(&ver), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(from_bytes(&a[..a.len() - 40]).is_err());
        assert!(from_bytes(b"garbage").is_err());
    }
}

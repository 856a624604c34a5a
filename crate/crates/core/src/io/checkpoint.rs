//! Binary checkpoints: model spec, every parameter block and the optimizer
//! state, written so identical runs produce identical bytes.
//!
//! Layout (little-endian throughout):
//! magic `NVSCKPT\0`, u32 version, 64-byte config hash, u64 step,
//! u32 + bytes of the model spec as TOML, u32 block count, then per block:
//! u32 + name, u8 group, u64 length, values, Adam m, Adam v, u64 Adam steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::MpiMode;
use crate::optimizer::{AdamState, TrainState};
use crate::pipeline::{Group, Model, ModelSpec};

pub const MAGIC: &[u8; 8] = b"NVSCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: TrainState,
}

// Serialized mirror of ModelSpec, so the spec itself stays free of serde.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRecord {
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    n_coarse: usize,
    n_fine: usize,
    mode: MpiMode,
    extractor_hidden: usize,
    decoder_hidden: usize,
    decoder_layers: usize,
    density_scale: f64,
    fine_density_bias: f64,
}

impl From<&ModelSpec> for SpecRecord {
    fn from(s: &ModelSpec) -> Self {
        Self {
            width: s.width,
            height: s.height,
            near: s.near,
            far: s.far,
            n_coarse: s.n_coarse,
            n_fine: s.n_fine,
            mode: s.mode,
            extractor_hidden: s.extractor_hidden,
            decoder_hidden: s.decoder_hidden,
            decoder_layers: s.decoder_layers,
            density_scale: s.density_scale,
            fine_density_bias: s.fine_density_bias,
        }
    }
}

impl From<SpecRecord> for ModelSpec {
    fn from(s: SpecRecord) -> Self {
        Self {
            width: s.width,
            height: s.height,
            near: s.near,
            far: s.far,
            n_coarse: s.n_coarse,
            n_fine: s.n_fine,
            mode: s.mode,
            extractor_hidden: s.extractor_hidden,
            decoder_hidden: s.decoder_hidden,
            decoder_layers: s.decoder_layers,
            density_scale: s.density_scale,
            fine_density_bias: s.fine_density_bias,
        }
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut hash = [b'0'; 64];
        let h = self.config_hash.as_bytes();
        hash[..h.len().min(64)].copy_from_slice(&h[..h.len().min(64)]);
        out.extend_from_slice(&hash);
        out.extend_from_slice(&self.state.step.to_le_bytes());
        let spec = toml::to_string(&SpecRecord::from(&self.state.model.spec)).expect("spec serializes");
        put_bytes(&mut out, spec.as_bytes());
        let blocks = &self.state.model.params.blocks;
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        let adam = &self.state.adam;
        for (i, b) in blocks.iter().enumerate() {
            put_bytes(&mut out, b.name.as_bytes());
            out.push(match b.group {
                Group::Coarse => 0,
                Group::Fine => 1,
            });
            out.extend_from_slice(&(b.values.len() as u64).to_le_bytes());
            put_f64s(&mut out, &b.values);
            put_f64s(&mut out, &adam.m[i]);
            put_f64s(&mut out, &adam.v[i]);
            out.extend_from_slice(&adam.steps[i].to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = String::from_utf8(r.take(64)?.to_vec())
            .map_err(|_| Error::Format("checkpoint hash is not text".into()))?;
        let step = r.u64()?;
        let spec_text = r.string()?;
        let spec: SpecRecord =
            toml::from_str(&spec_text).map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
        let mut model = Model::new(spec.into())?;
        let count = r.u32()? as usize;
        if count != model.params.blocks.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} blocks, model expects {}",
                model.params.blocks.len()
            )));
        }
        let mut adam = AdamState::new(&model.params);
        for (i, block) in model.params.blocks.iter_mut().enumerate() {
            let name = r.string()?;
            let group = match r.take(1)?[0] {
                0 => Group::Coarse,
                1 => Group::Fine,
                g => return Err(Error::Format(format!("bad group tag {g}"))),
            };
            let len = r.u64()? as usize;
            if name != block.name || group != block.group || len != block.values.len() {
                return Err(Error::Format(format!(
                    "block {name:?} ({len} values) does not match model block {:?} ({} values)",
                    block.name,
                    block.values.len()
                )));
            }
            block.values = r.f64s(len)?;
            adam.m[i] = r.f64s(len)?;
            adam.v[i] = r.f64s(len)?;
            adam.steps[i] = r.u64()?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config_hash,
            state: TrainState { model, adam, step },
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

//! Binary checkpoint container and per-model save/restore.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "SXR1" | version | len kind | kind | len config | config (TOML)
//! | block count | { len name | name | ndim | dims… | f32 payload }…
//! | CRC-32 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Finding;
use crate::diffusion::{DenoiserConfig, DenoiserNet, DiffusionTrainer, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::{ClassifierConfig, ClassifierNet, Classify};
use crate::nn::Params;
use crate::optim::{AdamConfig, AdamState};
use crate::pggan::{GanConfig, GanTrainer, GrowthSchedule};
use crate::rng::{Rng, RngState};

pub const MAGIC: &[u8; 4] = b"SXR1";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_DIFFUSION: &str = "diffusion";
pub const KIND_PGGAN: &str = "pggan";
pub const KIND_CLASSIFIER: &str = "classifier";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    /// Canonical TOML snapshot of the run configuration and loop state.
    pub config: String,
    pub blocks: Vec<ParamBlock>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(kind: &str, config: String) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            blocks: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        put_u32(&mut out, self.blocks.len());
        for b in &self.blocks {
            put_str(&mut out, &b.name);
            put_u32(&mut out, b.shape.len());
            b.shape.iter().for_each(|d| put_u32(&mut out, *d));
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32("version")? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = r.string("kind")?;
        let config = r.string("config")?;
        let count = r.u32("block count")?;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("block name")?;
            let ndim = r.u32("rank")?;
            let shape = (0..ndim).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Checkpoint(format!("block {name} is too large")))?;
            let raw = r.take(numel.saturating_mul(4), &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blocks.push(ParamBlock { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last block".into()));
        }
        Ok(Self { kind, config, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn push_params(&mut self, params: &Params) {
        for (name, t) in params.iter() {
            self.blocks.push(ParamBlock {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
    }

    pub fn load_params(&self, params: &mut Params) -> Result<()> {
        params.load_values(|name| self.block(name).map(|b| (&b.shape[..], &b.data[..])))
    }

    /// Stores Adam moments as `adam.<key>.m.<param>` / `adam.<key>.v.<param>`.
    pub fn push_adam(&mut self, key: &str, opt: &AdamState, params: &Params) {
        let (m, v) = opt.moments();
        for (i, (name, t)) in params.iter().enumerate() {
            for (tag, buf) in [("m", &m[i]), ("v", &v[i])] {
                self.blocks.push(ParamBlock {
                    name: format!("adam.{key}.{tag}.{name}"),
                    shape: t.shape().to_vec(),
                    data: buf.clone(),
                });
            }
        }
    }

    pub fn load_adam(&self, key: &str, config: AdamConfig, step: u64, params: &Params) -> Result<AdamState> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            for (tag, out) in [("m", &mut m), ("v", &mut v)] {
                let block_name = format!("adam.{key}.{tag}.{name}");
                let b = self
                    .block(&block_name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing block {block_name}")))?;
                if b.shape != t.shape() {
                    return Err(Error::Checkpoint(format!("block {block_name} has shape {:?}", b.shape)));
                }
                out.push(b.data.clone());
            }
        }
        Ok(AdamState::from_parts(config, step, m, v))
    }

    fn state<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        toml::from_str(&self.config)
            .map_err(|e| Error::Checkpoint(format!("{} checkpoint config: {e}", self.kind)))
    }
}

fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("checkpoint state serialises to TOML")
}

fn decode_rng(text: &str) -> Result<Rng> {
    Ok(Rng::from_state(&RngState::decode(text)?))
}

#[derive(Serialize, Deserialize)]
struct DiffusionState {
    step: u64,
    batch_size: usize,
    rng: String,
    adam_step: u64,
    model: DenoiserConfig,
    schedule: ScheduleConfig,
    adam: AdamConfig,
}

pub fn save_diffusion(trainer: &DiffusionTrainer) -> Checkpoint {
    let state = DiffusionState {
        step: trainer.step,
        batch_size: trainer.batch_size,
        rng: trainer.rng.state().encode(),
        adam_step: trainer.opt.step_count(),
        model: trainer.net.config().clone(),
        schedule: trainer.schedule_config,
        adam: trainer.opt.config,
    };
    let mut ck = Checkpoint::new(KIND_DIFFUSION, to_toml(&state));
    ck.push_params(trainer.net.params());
    ck.push_adam("net", &trainer.opt, trainer.net.params());
    ck
}

pub fn restore_diffusion(ck: &Checkpoint) -> Result<DiffusionTrainer> {
    ck.expect_kind(KIND_DIFFUSION)?;
    let s: DiffusionState = ck.state()?;
    let mut net = DenoiserNet::new(s.model, &mut Rng::seed_from_u64(0))?;
    ck.load_params(net.params_mut())?;
    let mut trainer = DiffusionTrainer::new(net, s.schedule, s.adam, s.batch_size, decode_rng(&s.rng)?)?;
    trainer.opt = ck.load_adam("net", s.adam, s.adam_step, trainer.net.params())?;
    trainer.step = s.step;
    Ok(trainer)
}

#[derive(Serialize, Deserialize)]
struct GanState {
    step: u64,
    stage: usize,
    stage_step: u64,
    batch_size: usize,
    rng: String,
    gen_adam_step: u64,
    disc_adam_step: u64,
    model: GanConfig,
    adam: AdamConfig,
    growth: GrowthSchedule,
}

pub fn save_gan(trainer: &GanTrainer) -> Checkpoint {
    let state = GanState {
        step: trainer.step,
        stage: trainer.stage(),
        stage_step: trainer.stage_step,
        batch_size: trainer.batch_size,
        rng: trainer.rng.state().encode(),
        gen_adam_step: trainer.opt_g.step_count(),
        disc_adam_step: trainer.opt_d.step_count(),
        model: trainer.gen.config().clone(),
        adam: trainer.adam,
        growth: trainer.schedule.clone(),
    };
    let mut ck = Checkpoint::new(KIND_PGGAN, to_toml(&state));
    ck.push_params(trainer.gen.params());
    ck.push_params(trainer.disc.params());
    ck.push_adam("gen", &trainer.opt_g, trainer.gen.params());
    ck.push_adam("disc", &trainer.opt_d, trainer.disc.params());
    ck
}

pub fn restore_gan(ck: &Checkpoint) -> Result<GanTrainer> {
    ck.expect_kind(KIND_PGGAN)?;
    let s: GanState = ck.state()?;
    let mut t = GanTrainer::new(s.model, s.growth, s.adam, s.batch_size, Rng::seed_from_u64(0))?;
    for _ in 0..s.stage {
        t.grow()?;
    }
    ck.load_params(t.gen.params_mut())?;
    ck.load_params(t.disc.params_mut())?;
    t.opt_g = ck.load_adam("gen", s.adam, s.gen_adam_step, t.gen.params())?;
    t.opt_d = ck.load_adam("disc", s.adam, s.disc_adam_step, t.disc.params())?;
    t.rng = decode_rng(&s.rng)?;
    t.step = s.step;
    t.stage_step = s.stage_step;
    Ok(t)
}

#[derive(Serialize, Deserialize)]
struct ClassifierState {
    classes: Vec<String>,
    model: ClassifierConfig,
}

pub fn save_classifier(net: &ClassifierNet) -> Checkpoint {
    let state = ClassifierState {
        classes: net.classes().iter().map(|c| c.label().to_string()).collect(),
        model: net.config().clone(),
    };
    let mut ck = Checkpoint::new(KIND_CLASSIFIER, to_toml(&state));
    ck.push_params(net.params());
    ck
}

pub fn restore_classifier(ck: &Checkpoint) -> Result<ClassifierNet> {
    ck.expect_kind(KIND_CLASSIFIER)?;
    let s: ClassifierState = ck.state()?;
    let classes = s
        .classes
        .iter()
        .map(|l| Finding::from_label(l).ok_or_else(|| Error::Checkpoint(format!("unknown class {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut net = ClassifierNet::new(s.model, classes, &mut Rng::seed_from_u64(0))?;
    ck.load_params(net.params_mut())?;
    Ok(net)
}

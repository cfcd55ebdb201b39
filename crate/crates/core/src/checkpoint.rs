//! Versioned binary checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "TDFN"                      magic
//! u32                         format version
//! u32 n, n × u32              geometry + architecture fields
//! u8 len, bytes               phase tag ("init" | "task" | "fpg")
//! u64                         seed
//! u32 len, bytes              config snapshot (key = value lines)
//! u32 count, count × param    param = u16 name len, name, u8 rank,
//!                                     rank × u32 dims, f32 values
//! u8 flag [optimizer]         optimizer = u64 step, 4 × f32 hyper,
//!                                     u32 count, count × (u16 name len,
//!                                     name, u32 len, len × f32 m,
//!                                     len × f32 v)
//! u64                         CRC-64/XZ of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use tdfn_tensor::AdamState;
use thiserror::Error;

use crate::geometry::{Architecture, Geometry};
use crate::model::TdfnModel;

pub const MAGIC: &[u8; 4] = b"TDFN";
pub const FORMAT_VERSION: u32 = 1;
const GEOMETRY_FIELDS: usize = 14;
const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Init,
    Task,
    Fpg,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Task => "task",
            Phase::Fpg => "fpg",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Phase> {
        match tag {
            "init" => Some(Phase::Init),
            "task" => Some(Phase::Task),
            "fpg" => Some(Phase::Fpg),
            _ => None,
        }
    }
}

/// Adam state together with the names of the parameters it tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub names: Vec<String>,
    pub adam: AdamState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TdfnModel,
    pub phase: Phase,
    pub seed: u64,
    /// Epochs completed in `phase`.
    pub epochs: u32,
    /// Training configuration as `key = value` lines.
    pub config: String,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(model: TdfnModel, phase: Phase, seed: u64, config: String) -> Self {
        Checkpoint {
            model,
            phase,
            seed,
            epochs: 0,
            config,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend(MAGIC);
        w.extend(FORMAT_VERSION.to_le_bytes());
        let fields = geometry_fields(&self.model.geometry, &self.model.arch);
        w.extend((fields.len() as u32).to_le_bytes());
        for f in fields {
            w.extend(f.to_le_bytes());
        }
        let tag = self.phase.tag().as_bytes();
        w.push(tag.len() as u8);
        w.extend(tag);
        w.extend(self.seed.to_le_bytes());
        w.extend(self.epochs.to_le_bytes());
        w.extend((self.config.len() as u32).to_le_bytes());
        w.extend(self.config.as_bytes());

        let store = &self.model.store;
        w.extend((store.len() as u32).to_le_bytes());
        for (name, t) in store.iter() {
            put_name(&mut w, name);
            w.push(t.rank() as u8);
            for &d in t.shape() {
                w.extend((d as u32).to_le_bytes());
            }
            put_floats(&mut w, t.data());
        }

        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                let a = &opt.adam;
                w.extend(a.step_count.to_le_bytes());
                for h in [a.learning_rate, a.beta1, a.beta2, a.epsilon] {
                    w.extend(h.to_le_bytes());
                }
                w.extend((opt.names.len() as u32).to_le_bytes());
                for (i, name) in opt.names.iter().enumerate() {
                    put_name(&mut w, name);
                    let m = a.first_moment.get(i).map(Vec::as_slice).unwrap_or(&[]);
                    let v = a.second_moment.get(i).map(Vec::as_slice).unwrap_or(&[]);
                    w.extend((m.len() as u32).to_le_bytes());
                    put_floats(&mut w, m);
                    put_floats(&mut w, v);
                }
            }
        }
        let sum = CHECKSUM.checksum(&w);
        w.extend(sum.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, at: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated);
        }
        let body_len = bytes.len() - 8;
        r.bytes = &bytes[..body_len];
        let ckpt = parse_body(&mut r)?;
        if r.at != body_len {
            return Err(CheckpointError::Malformed(format!(
                "{} unexpected trailing bytes",
                body_len - r.at
            )));
        }
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
        let computed = CHECKSUM.checksum(&bytes[..body_len]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        Ok(ckpt)
    }
}

fn parse_body(r: &mut Reader) -> Result<Checkpoint> {
    let n = r.u32()? as usize;
    if n != GEOMETRY_FIELDS {
        return Err(CheckpointError::Malformed(format!("{n} geometry fields, expected {GEOMETRY_FIELDS}")));
    }
    let mut f = [0usize; GEOMETRY_FIELDS];
    for v in f.iter_mut() {
        *v = r.u32()? as usize;
    }
    let geometry = Geometry {
        image_side: f[0],
        lowres_side: f[1],
        lrc_patch: f[2],
        roi_side: f[3],
        hrc_patch: f[4],
        region_grid: f[5],
        embed_dim: f[6],
        num_classes: f[7],
    };
    let arch = Architecture {
        layers: f[8],
        heads: f[9],
        ff_dim: f[10],
        classifier_hidden: f[11],
        reconstructor_hidden: f[12],
        fpg_hidden: f[13],
    };
    // Refuse absurd sizes before building the model.
    if f.iter().any(|&x| x > 4096) || arch.layers > 64 {
        return Err(CheckpointError::Malformed("implausible geometry".into()));
    }
    let tag_len = r.u8()? as usize;
    let tag = r.string(tag_len)?;
    let phase = Phase::from_tag(&tag).ok_or_else(|| CheckpointError::Malformed(format!("unknown phase tag {tag:?}")))?;
    let seed = r.u64()?;
    let epochs = r.u32()?;
    let cfg_len = r.u32()? as usize;
    let config = r.string(cfg_len)?;

    let mut model = TdfnModel::new(geometry, arch, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} parameter blocks, architecture has {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown parameter {name}")))?;
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(CheckpointError::Malformed(format!("shape mismatch for {name}")));
        }
        if std::mem::replace(&mut seen[id_index(&model, &name)], true) {
            return Err(CheckpointError::Malformed(format!("duplicate parameter {name}")));
        }
        let data = r.floats(model.store.get(id).numel())?;
        model
            .store
            .set(id, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step_count = r.u64()?;
            let mut hyper = [0f32; 4];
            for h in hyper.iter_mut() {
                *h = r.f32()?;
            }
            let mut adam = AdamState::new(hyper[0], hyper[1], hyper[2], hyper[3]);
            adam.step_count = step_count;
            let n = r.u32()? as usize;
            let mut names = Vec::new();
            for _ in 0..n {
                names.push(r.name()?);
                let len = r.u32()? as usize;
                adam.first_moment.push(r.floats(len)?);
                adam.second_moment.push(r.floats(len)?);
            }
            Some(OptimizerState { names, adam })
        }
        x => return Err(CheckpointError::Malformed(format!("bad optimizer flag {x}"))),
    };

    Ok(Checkpoint {
        model,
        phase,
        seed,
        epochs,
        config,
        optimizer,
    })
}

fn id_index(model: &TdfnModel, name: &str) -> usize {
    model.store.iter().position(|(n, _)| n == name).unwrap()
}

pub fn geometry_fields(g: &Geometry, a: &Architecture) -> [u32; GEOMETRY_FIELDS] {
    [
        g.image_side,
        g.lowres_side,
        g.lrc_patch,
        g.roi_side,
        g.hrc_patch,
        g.region_grid,
        g.embed_dim,
        g.num_classes,
        a.layers,
        a.heads,
        a.ff_dim,
        a.classifier_hidden,
        a.reconstructor_hidden,
        a.fpg_hidden,
    ]
    .map(|x| x as u32)
}

fn put_name(w: &mut Vec<u8>, name: &str) {
    w.extend((name.len() as u16).to_le_bytes());
    w.extend(name.as_bytes());
}

fn put_floats(w: &mut Vec<u8>, data: &[f32]) {
    for x in data {
        w.extend(x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        self.string(len)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

//! Binary container for parameters and generated datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMKD" | version u32 | count u32 | entry*
//! entry := name_len u32 | name (UTF-8) | dtype u8 | rank u8 | dims u32*rank | payload
//! ```
//!
//! `dtype` 0 is `f64`, 1 is `i64`; the payload is `8 * product(dims)` bytes.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::data::{Split, SyntheticExample};
use crate::model::{ModelConfig, ModelParameters, Role};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"EMKD";
pub const VERSION: u32 = 1;

const MODEL_CONFIG_KEY: &str = "meta/model_config";
const STEP_KEY: &str = "meta/step";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("truncated payload: {what} needs {needed} bytes at offset {offset}, {available} left")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("entry name at offset {0} is not UTF-8")]
    BadName(usize),
    #[error("duplicate entry {0:?}")]
    Duplicate(String),
    #[error("entry {name:?} has unknown dtype code {code}")]
    BadDtype { name: String, code: u8 },
    #[error("entry {0:?} is too large")]
    TooLarge(String),
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
    #[error("missing entry {0:?}")]
    Missing(String),
    #[error("entry {name:?}: {msg}")]
    Malformed { name: String, msg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Payload {
    pub fn ints(data: Vec<i64>) -> Self {
        Payload::I64 {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::F64(t) => t.shape(),
            Payload::I64 { shape, .. } => shape,
        }
    }

    fn bitwise_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Payload::F64(a), Payload::F64(b)) => a.bitwise_eq(b),
            (a, b) => a == b,
        }
    }
}

/// Named entries, kept sorted by name so encoding is canonical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Payload>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, payload: Payload) {
        self.entries.insert(name.into(), payload);
    }

    pub fn get(&self, name: &str) -> Result<&Payload, CheckpointError> {
        self.entries
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        match self.get(name)? {
            Payload::F64(t) => Ok(t),
            Payload::I64 { .. } => Err(malformed(name, "expected f64 data")),
        }
    }

    pub fn ints(&self, name: &str) -> Result<&[i64], CheckpointError> {
        match self.get(name)? {
            Payload::I64 { data, .. } => Ok(data),
            Payload::F64(_) => Err(malformed(name, "expected i64 data")),
        }
    }

    /// Same names and bit-identical payloads; `NaN`s compare by bits.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (code, shape) = match payload {
                Payload::F64(t) => (0u8, t.shape()),
                Payload::I64 { shape, .. } => (1u8, shape.as_slice()),
            };
            out.push(code);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match payload {
                Payload::F64(t) => t
                    .data()
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I64 { data, .. } => data
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic.to_vec()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let count = r.u32("entry count")?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::BadName(name_at))?
                .to_string();
            let code = r.u8("dtype")?;
            if code > 1 {
                return Err(CheckpointError::BadDtype { name, code });
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let bytes_len = shape
                .iter()
                .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::TooLarge(name.clone()))?;
            let raw = r.take(bytes_len, "payload")?;
            let words = raw.chunks_exact(8).map(|c| c.try_into().unwrap());
            let payload = if code == 0 {
                let data = words.map(f64::from_le_bytes).collect();
                Payload::F64(
                    Tensor::new(shape, data).map_err(|e| malformed(&name, &e.to_string()))?,
                )
            } else {
                Payload::I64 {
                    shape,
                    data: words.map(i64::from_le_bytes).collect(),
                }
            };
            if entries.contains_key(&name) {
                return Err(CheckpointError::Duplicate(name));
            }
            entries.insert(name, payload);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        Ok(Self::decode(&std::fs::read(path)?)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                what,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn malformed(name: &str, msg: &str) -> CheckpointError {
    CheckpointError::Malformed {
        name: name.to_string(),
        msg: msg.to_string(),
    }
}

fn config_to_ints(c: &ModelConfig) -> Vec<i64> {
    let role = match c.role {
        Role::Teacher => 0,
        Role::Student => 1,
    };
    [
        c.vocab_size,
        c.hidden_dim,
        c.num_layers,
        c.num_heads,
        c.patch_grid[0],
        c.patch_grid[1],
        c.patch_dim,
        c.vision_tokens_out[0],
        c.vision_tokens_out[1],
        c.mlp_ratio,
        c.max_seq_len,
        role,
    ]
    .iter()
    .map(|&v| v as i64)
    .collect()
}

fn config_from_ints(v: &[i64]) -> Result<ModelConfig, CheckpointError> {
    let bad = |msg: &str| malformed(MODEL_CONFIG_KEY, msg);
    if v.len() != 12 {
        return Err(bad(&format!("expected 12 fields, found {}", v.len())));
    }
    let mut u = Vec::with_capacity(11);
    for &x in &v[..11] {
        u.push(usize::try_from(x).map_err(|_| bad("negative field"))?);
    }
    let role = match v[11] {
        0 => Role::Teacher,
        1 => Role::Student,
        r => return Err(bad(&format!("unknown role code {r}"))),
    };
    Ok(ModelConfig {
        vocab_size: u[0],
        hidden_dim: u[1],
        num_layers: u[2],
        num_heads: u[3],
        patch_grid: [u[4], u[5]],
        patch_dim: u[6],
        vision_tokens_out: [u[7], u[8]],
        mlp_ratio: u[9],
        max_seq_len: u[10],
        role,
    })
}

/// Parameters plus their config and the training step they were saved at.
pub fn params_to_checkpoint(params: &ModelParameters, step: usize) -> Checkpoint {
    let mut ck = Checkpoint::new();
    for (name, t) in &params.tensors {
        ck.insert(name.clone(), Payload::F64(t.clone()));
    }
    ck.insert(MODEL_CONFIG_KEY, Payload::ints(config_to_ints(&params.config)));
    ck.insert(
        STEP_KEY,
        Payload::I64 {
            shape: vec![],
            data: vec![step as i64],
        },
    );
    ck
}

/// Inverse of [`params_to_checkpoint`]; returns the parameters and step.
pub fn params_from_checkpoint(ck: &Checkpoint) -> crate::Result<(ModelParameters, usize)> {
    let config = config_from_ints(ck.ints(MODEL_CONFIG_KEY)?)?;
    let step = match ck.ints(STEP_KEY)? {
        [s] if *s >= 0 => *s as usize,
        _ => return Err(malformed(STEP_KEY, "expected one non-negative value").into()),
    };
    let mut tensors = BTreeMap::new();
    for (name, payload) in &ck.entries {
        if name.starts_with("meta/") {
            continue;
        }
        match payload {
            Payload::F64(t) => {
                tensors.insert(name.clone(), t.clone());
            }
            Payload::I64 { .. } => return Err(malformed(name, "parameters must be f64").into()),
        }
    }
    Ok((ModelParameters::from_tensors(&config, tensors)?, step))
}

pub fn save_params(params: &ModelParameters, step: usize, path: impl AsRef<Path>) -> crate::Result<()> {
    params_to_checkpoint(params, step).save(path)
}

pub fn load_params(path: impl AsRef<Path>) -> crate::Result<(ModelParameters, usize)> {
    params_from_checkpoint(&Checkpoint::load(path)?)
}

fn to_ints(v: &[usize]) -> Vec<i64> {
    v.iter().map(|&x| x as i64).collect()
}

fn to_usizes(name: &str, v: &[i64]) -> Result<Vec<usize>, CheckpointError> {
    v.iter()
        .map(|&x| usize::try_from(x).map_err(|_| malformed(name, "negative id")))
        .collect()
}

/// One split of generated examples, `{split}/{index:06}/{field}` per tensor.
pub fn examples_to_checkpoint(split: Split, examples: &[SyntheticExample]) -> Checkpoint {
    let tag = split_tag(split);
    let mut ck = Checkpoint::new();
    ck.insert(
        "meta/examples",
        Payload::I64 {
            shape: vec![],
            data: vec![examples.len() as i64],
        },
    );
    for (i, ex) in examples.iter().enumerate() {
        let key = |field: &str| format!("{tag}/{i:06}/{field}");
        ck.insert(key("patch_grid"), Payload::F64(ex.patch_grid.clone()));
        ck.insert(key("symbols"), Payload::ints(to_ints(&ex.symbols)));
        ck.insert(key("prompt_ids"), Payload::ints(to_ints(&ex.prompt_ids)));
        ck.insert(key("response_ids"), Payload::ints(to_ints(&ex.response_ids)));
        ck.insert(key("labels"), Payload::ints(ex.labels.clone()));
    }
    ck
}

pub fn examples_from_checkpoint(ck: &Checkpoint, split: Split) -> crate::Result<Vec<SyntheticExample>> {
    let tag = split_tag(split);
    let n = match ck.ints("meta/examples")? {
        [n] if *n >= 0 => *n as usize,
        _ => return Err(malformed("meta/examples", "expected one non-negative value").into()),
    };
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let key = |field: &str| format!("{tag}/{i:06}/{field}");
        let ids = |field: &str| -> Result<Vec<usize>, CheckpointError> {
            let k = key(field);
            to_usizes(&k, ck.ints(&k)?)
        };
        out.push(SyntheticExample {
            patch_grid: ck.tensor(&key("patch_grid"))?.clone(),
            symbols: ids("symbols")?,
            prompt_ids: ids("prompt_ids")?,
            response_ids: ids("response_ids")?,
            labels: ck.ints(&key("labels"))?.to_vec(),
        });
    }
    Ok(out)
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}

//! Binary checkpoint format shared by all models.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "AMJL"                      4 bytes magic
//! version                     u32
//! role                        u8   (0x00 generic, 0x01 imputer, 0x02 actor, 0x03 critic)
//! layer count L               u32
//! dims                        (L + 1) × u32
//! activation tags             L × u8
//! dropout rates               L × f64
//! per layer: weights, biases  row-major f64
//! extra length N              u32
//! extra                       N bytes, role-specific metadata
//! ```

use std::path::Path;

use super::{Activation, DenseNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AMJL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Generic,
    Imputer,
    Actor,
    Critic,
}

impl ModelRole {
    pub fn tag(self) -> u8 {
        match self {
            ModelRole::Generic => 0x00,
            ModelRole::Imputer => 0x01,
            ModelRole::Actor => 0x02,
            ModelRole::Critic => 0x03,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0x00 => Some(ModelRole::Generic),
            0x01 => Some(ModelRole::Imputer),
            0x02 => Some(ModelRole::Actor),
            0x03 => Some(ModelRole::Critic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: ModelRole,
    pub net: DenseNet,
    pub extra: Vec<u8>,
}

impl Checkpoint {
    pub fn new(role: ModelRole, net: DenseNet) -> Self {
        Checkpoint {
            role,
            net,
            extra: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let layers = self.net.layers();
        let mut out = Vec::with_capacity(32 + self.net.param_count() * 8 + self.extra.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.role.tag());
        out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for d in self.net.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend(layers.iter().map(|l| l.activation().tag()));
        for l in layers {
            out.extend_from_slice(&l.dropout().to_le_bytes());
        }
        for l in layers {
            for v in l.weights().iter().chain(l.biases()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.extra.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.extra);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                what: "checkpoint",
                expected: u32::from_be_bytes(*MAGIC),
                found: u32::from_be_bytes(magic.try_into().unwrap()),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("unsupported version {version}"),
            });
        }
        let role_tag = r.take(1)?[0];
        let role = ModelRole::from_tag(role_tag).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("unknown role tag {role_tag:#04x}"),
        })?;
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "zero layers".into(),
            });
        }
        let dims = (0..=n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let activations = r
            .take(n)?
            .iter()
            .map(|&t| {
                Activation::from_tag(t).ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    detail: format!("unknown activation tag {t}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dropout = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for i in 0..n {
            let count = dims[i]
                .checked_mul(dims[i + 1])
                .filter(|c| c * 8 <= bytes.len())
                .ok_or(Error::Truncated {
                    what: "checkpoint",
                    needed: usize::MAX,
                    found: bytes.len(),
                })?;
            weights.push((0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            biases.push((0..dims[i + 1]).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        let extra_len = r.u32()? as usize;
        let extra = r.take(extra_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let net = DenseNet::from_parts(&dims, &activations, &dropout, weights, biases)?;
        Ok(Checkpoint { role, net, extra })
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            what: "checkpoint",
            needed: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

//! `FOCI` weight files, little-endian throughout:
//!
//! ```text
//! "FOCI" | version u32 | count u32 | count x entry | ["OPTS" | count u32 | count x entry]
//! entry = name_len u32 | name utf-8 | rank u32 | rank x extent u32 | f32 values
//! ```
//!
//! Ranks are written without trailing unit extents, so a `(c, 1, 1, 1)`
//! vector is stored with rank 1.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FOCI";
pub const OPTS_TAG: &[u8; 4] = b"OPTS";
pub const VERSION: u32 = 1;

pub type Named = (String, Tensor<f32>);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub params: Vec<Named>,
    /// Optimizer state of a training checkpoint.
    pub optimizer: Option<Vec<Named>>,
}

impl WeightFile {
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        Self {
            params: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_section(&mut out, &self.params);
        if let Some(opts) = &self.optimizer {
            out.extend_from_slice(OPTS_TAG);
            write_section(&mut out, opts);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let head = &bytes[..bytes.len().min(4)];
        if head != &MAGIC[..head.len()] {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 0 };
        r.take(4)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let params = read_section(&mut r)?;
        let optimizer = if r.remaining() == 0 {
            None
        } else {
            let tag = r.take(4.min(r.remaining()))?;
            if tag != &OPTS_TAG[..tag.len()] {
                return Err(Error::WeightFormat(
                    "unexpected bytes after parameters".into(),
                ));
            }
            if tag.len() < 4 {
                return Err(Error::Truncated);
            }
            Some(read_section(&mut r)?)
        };
        if r.remaining() != 0 {
            return Err(Error::WeightFormat(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Ok(Self { params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn write_section(out: &mut Vec<u8>, entries: &[Named]) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        let rank = dims.iter().rposition(|&d| d != 1).map_or(1, |i| i + 1);
        out.extend_from_slice(&(rank as u32).to_le_bytes());
        for &d in &dims[..rank] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("four bytes"),
        ))
    }
}

fn read_section(r: &mut Reader<'_>) -> Result<Vec<Named>> {
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::WeightFormat("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::WeightFormat(format!(
                "parameter {name} has rank {rank}"
            )));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank) {
            *d = r.u32()? as usize;
            if *d == 0 {
                return Err(Error::WeightFormat(format!(
                    "parameter {name} has a zero extent"
                )));
            }
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::WeightFormat(format!("parameter {name} is too large")))?;
        let raw = r.take(numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

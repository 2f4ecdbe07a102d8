//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "PFLW"
//! version    u32
//! config     u32 x 7  num_modules feature_dim hidden_dim embed_dim heads head_dim max_ways
//!            f64 x 4  beta0 xi variance_epsilon decay_horizon
//! blocks     u32 count, then per block:
//!            u32 name length, name (utf-8), u32 rank, u64 x rank dims, f64 x numel values
//! ```
//!
//! Blocks appear in the canonical order of [`GradNetParams::blocks`].

use std::io::{Read, Write};
use std::path::Path;

use super::{GradNetConfig, GradNetParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFLW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, cfg: &GradNetConfig, params: &GradNetParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.num_modules, cfg.feature_dim, cfg.hidden_dim, cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.max_ways] {
        let v = u32::try_from(v).map_err(|_| bad("config value exceeds u32"))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [cfg.beta0, cfg.xi, cfg.variance_epsilon, cfg.decay_horizon] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let blocks = params.blocks();
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        buf.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(b.name.as_bytes());
        buf.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in b.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated checkpoint"))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(GradNetConfig, GradNetParams)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut ints = [0usize; 7];
    for v in &mut ints {
        *v = c.u32()? as usize;
    }
    let [num_modules, feature_dim, hidden_dim, embed_dim, heads, head_dim, max_ways] = ints;
    let cfg = GradNetConfig {
        num_modules,
        feature_dim,
        hidden_dim,
        embed_dim,
        heads,
        head_dim,
        max_ways,
        beta0: c.f64()?,
        xi: c.f64()?,
        variance_epsilon: c.f64()?,
        decay_horizon: c.f64()?,
    };
    cfg.validate().map_err(|e| bad(format!("invalid stored config: {e}")))?;

    // Shapes and names are fixed by the config; build a template and fill it.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut params = GradNetParams::init(&cfg, &mut rng)?;
    let expected: Vec<(String, Vec<usize>)> = params.blocks().into_iter().map(|b| (b.name, b.shape)).collect();
    let count = c.u32()? as usize;
    if count != expected.len() {
        return Err(bad(format!("{count} blocks, config implies {}", expected.len())));
    }
    let mut flat = Vec::with_capacity(params.num_params());
    for (name, shape) in &expected {
        let len = c.u32()? as usize;
        let got = std::str::from_utf8(c.take(len)?).map_err(|_| bad("block name is not utf-8"))?;
        if got != name {
            return Err(bad(format!("expected block {name}, found {got}")));
        }
        let rank = c.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(c.u64()? as usize);
        }
        if &dims != shape {
            return Err(bad(format!("block {name} has shape {dims:?}, expected {shape:?}")));
        }
        for _ in 0..shape.iter().product::<usize>() {
            flat.push(c.f64()?);
        }
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes after last block"));
    }
    params.assign_flat(&flat)?;
    Ok((cfg, params))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &GradNetConfig, params: &GradNetParams) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let result = std::fs::File::create(&tmp)
        .map_err(Error::from)
        .and_then(|f| write_checkpoint(std::io::BufWriter::new(f), cfg, params))
        .and_then(|_| std::fs::rename(&tmp, path).map_err(Error::from));
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GradNetConfig, GradNetParams)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use super::params::{Adam, ParamStore};
use crate::autodiff::Tensor;
use crate::binio::{put_f64s, put_u32, put_u64, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Optimizer steps completed.
    pub step: usize,
    /// Resolved entropy budget of the variance hinge.
    pub gamma_sig: f64,
    pub params: ParamStore,
    pub adam: Adam,
}

fn put_store(buf: &mut Vec<u8>, s: &ParamStore) {
    put_u64(buf, s.blocks.len() as u64);
    for (name, t) in &s.blocks {
        put_u64(buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put_u64(buf, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(buf, d as u64);
        }
        put_f64s(buf, t.data());
    }
}

fn read_store(r: &mut Reader) -> Result<ParamStore> {
    let n = r.len("block count")?;
    let mut s = ParamStore::default();
    for _ in 0..n {
        let len = r.len("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "block name")?)
            .map_err(|_| Error::Parse { offset: at, message: "block name is not UTF-8".into() })?
            .to_string();
        let ndim = r.len("rank")?;
        let shape = (0..ndim).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("implausible shape"))?;
        let data = r.f64s(count, "block data")?;
        s.insert(name, Tensor::new(shape, data)?);
    }
    Ok(s)
}

fn same_layout(a: &ParamStore, b: &ParamStore) -> bool {
    a.blocks.len() == b.blocks.len() && a.blocks.iter().zip(&b.blocks).all(|((n, x), (m, y))| n == m && x.shape() == y.shape())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_u64(&mut buf, self.step as u64);
        buf.extend_from_slice(&self.config.hash());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        put_u64(&mut buf, cfg.len() as u64);
        buf.extend_from_slice(&cfg);
        put_f64s(&mut buf, &[self.gamma_sig]);
        put_store(&mut buf, &self.params);
        put_store(&mut buf, &self.adam.m);
        put_store(&mut buf, &self.adam.v);
        put_u64(&mut buf, self.adam.t);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse { offset: 0, message: "bad magic, not an XMCK file".into() });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible { what: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
        }
        let step = r.len("step")?;
        let hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
        let len = r.len("config length")?;
        let at = r.pos;
        let config: TrainConfig = serde_json::from_slice(r.take(len, "config")?)
            .map_err(|e| Error::Parse { offset: at, message: format!("config: {e}") })?;
        if config.hash() != hash {
            return Err(Error::Parse { offset: at, message: "config does not match its stored hash".into() });
        }
        let gamma_sig = r.f64("gamma_sig")?;
        let params = read_store(&mut r)?;
        let m = read_store(&mut r)?;
        let v = read_store(&mut r)?;
        let t = r.u64("adam step")?;
        if !same_layout(&params, &m) || !same_layout(&params, &v) {
            return Err(r.err("optimizer moments do not match the parameter layout"));
        }
        if r.pos != buf.len() {
            return Err(r.err("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { config, step, gamma_sig, params, adam: Adam { m, v, t } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

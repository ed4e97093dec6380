//! Binary checkpoints: a versioned header followed by named f64 blobs
//! (parameters, running statistics, optimizer moments) sorted by name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lfda_autograd::Array;

use crate::config::Config;
use crate::error::{LfdaError, Result};
use crate::training::{Moments, Trainer};

const MAGIC: &[u8; 8] = b"LFDACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub config_toml: String,
    pub step: u64,
    pub config_hash: String,
    pub data_hash: String,
}

fn blobs(trainer: &Trainer) -> BTreeMap<String, Array> {
    let mut out = BTreeMap::new();
    for p in trainer.model.all_params() {
        out.insert(format!("param/{}", p.name()), p.value().clone());
    }
    for bn in trainer.model.norms() {
        for b in bn.branches() {
            let base = b.gamma.name().strip_suffix(".gamma").expect("gamma naming");
            let n = b.running_mean.len();
            out.insert(
                format!("bn/{base}.running_mean"),
                Array::from_vec(&[n], b.running_mean.clone()).expect("shape"),
            );
            out.insert(
                format!("bn/{base}.running_var"),
                Array::from_vec(&[n], b.running_var.clone()).expect("shape"),
            );
        }
    }
    for (name, s) in &trainer.adam.state {
        out.insert(format!("adam_m/{name}"), s.m.clone());
        out.insert(format!("adam_v/{name}"), s.v.clone());
        out.insert(format!("adam_t/{name}"), Array::from_vec(&[1], vec![s.t as f64]).expect("shape"));
    }
    out
}

pub fn to_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let toml = trainer.config.to_toml()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut buf, &toml);
    buf.extend_from_slice(&(trainer.step as u64).to_le_bytes());
    put_str(&mut buf, &trainer.config.hash());
    put_str(&mut buf, &trainer.config.data.hash());
    let blobs = blobs(trainer);
    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, a) in &blobs {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
        for d in a.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in a.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LfdaError::io(dir, e))?;
    }
    fs::write(path, to_bytes(trainer)?).map_err(|e| LfdaError::io(path, e))
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

fn parse(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, Array>)> {
    let bad = |m: &str| LfdaError::format(path, m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint"));
    }
    match r.u32() {
        Some(VERSION) => {}
        Some(v) => return Err(bad(&format!("unsupported checkpoint version {v}"))),
        None => return Err(bad("truncated header")),
    }
    let header = (|| {
        Some(CheckpointHeader {
            config_toml: r.string()?,
            step: r.u64()?,
            config_hash: r.string()?,
            data_hash: r.string()?,
        })
    })()
    .ok_or_else(|| bad("truncated header"))?;
    let count = r.u32().ok_or_else(|| bad("truncated header"))?;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let blob = (|| {
            let name = r.string()?;
            let ndims = r.u32()? as usize;
            if ndims > 8 {
                return None;
            }
            let shape: Vec<usize> = (0..ndims).map(|_| r.u64().map(|d| d as usize)).collect::<Option<_>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
            let raw = r.take(n.checked_mul(8)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Some((name, Array::from_vec(&shape, data).ok()?))
        })()
        .ok_or_else(|| bad("truncated or malformed blob"))?;
        blobs.insert(blob.0, blob.1);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, blobs))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| LfdaError::io(path, e))?;
    Ok(parse(&bytes, path)?.0)
}

/// Rebuild the trainer recorded in a checkpoint.
pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| LfdaError::io(path, e))?;
    let (header, mut blobs) = parse(&bytes, path)?;
    let config = Config::from_toml(&header.config_toml)?;
    if config.hash() != header.config_hash || config.data.hash() != header.data_hash {
        return Err(LfdaError::format(path, "stored hashes do not match the stored config"));
    }
    let mut trainer = Trainer::new(config)?;
    trainer.step = header.step as usize;
    let take = |blobs: &mut BTreeMap<String, Array>, name: String, shape: &[usize]| -> Result<Array> {
        let a = blobs
            .remove(&name)
            .ok_or_else(|| LfdaError::format(path, format!("missing blob {name}")))?;
        if a.shape() != shape {
            return Err(LfdaError::format(path, format!("blob {name} has shape {:?}", a.shape())));
        }
        Ok(a)
    };
    for p in trainer.model.all_params_mut() {
        let shape = p.value().shape().to_vec();
        *p.value_mut() = take(&mut blobs, format!("param/{}", p.name()), &shape)?;
    }
    for bn in trainer.model.norms_mut() {
        for b in 0..bn.num_branches() {
            let state = bn.branch_mut(b);
            let base = state.gamma.name().strip_suffix(".gamma").expect("gamma naming").to_string();
            let n = state.running_mean.len();
            state.running_mean = take(&mut blobs, format!("bn/{base}.running_mean"), &[n])?.into_vec();
            state.running_var = take(&mut blobs, format!("bn/{base}.running_var"), &[n])?.into_vec();
        }
    }
    let names: Vec<String> = blobs
        .keys()
        .filter_map(|k| k.strip_prefix("adam_t/").map(str::to_string))
        .collect();
    let shapes: BTreeMap<String, Vec<usize>> = trainer
        .model
        .all_params()
        .iter()
        .map(|p| (p.name().to_string(), p.value().shape().to_vec()))
        .collect();
    for name in names {
        let shape = shapes
            .get(&name)
            .ok_or_else(|| LfdaError::format(path, format!("optimizer state for unknown parameter {name}")))?;
        let t = take(&mut blobs, format!("adam_t/{name}"), &[1])?.item();
        let m = take(&mut blobs, format!("adam_m/{name}"), shape)?;
        let v = take(&mut blobs, format!("adam_v/{name}"), shape)?;
        trainer.adam.state.insert(name, Moments { m, v, t: t as u64 });
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(LfdaError::format(path, format!("unexpected blob {extra}")));
    }
    Ok(trainer)
}

/// Load for continued training; refuses when the checkpoint was produced
/// under a different config or dataset.
pub fn resume(path: &Path, config: &Config, data_hash: &str) -> Result<Trainer> {
    let header = read_header(path)?;
    if header.config_hash != config.hash() {
        return Err(LfdaError::Mismatch(format!(
            "{} was trained with config {}, not {}",
            path.display(),
            header.config_hash,
            config.hash()
        )));
    }
    if header.data_hash != data_hash {
        return Err(LfdaError::Mismatch(format!(
            "{} was trained on dataset {}, not {data_hash}",
            path.display(),
            header.data_hash
        )));
    }
    load(path)
}

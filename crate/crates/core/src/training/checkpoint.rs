//! Binary checkpoint format.
//!
//! ```text
//! "VIKC" | version u32 | sha256(config) [32] | config TOML (u32 length + bytes)
//! tensor table: count u32, then per tensor name (u32 length + bytes),
//!               rank u32, dims u64 each, offset u64 (elements into payload)
//! payload: element count u64, then f32 values
//! optimizer: flag u8; if set: step u64, first moments, second moments (f32)
//! rng: flag u8; if set: seed [32], stream u64, word position u128
//! progress: epoch u64, global step u64
//! ```
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::Tensor;
use crate::training::optim::OptimState;

pub const MAGIC: &[u8; 4] = b"VIKC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Backbone<f32>,
    pub optim: Option<OptimState<f32>>,
    pub rng: Option<ChaCha8Rng>,
    pub epoch: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn config(&self) -> &BackboneConfig {
        self.model.config()
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Config the caller expects; its digest must match the stored one.
    pub expected: Option<BackboneConfig>,
    /// Accept a digest mismatch (with a warning) instead of failing.
    pub allow_mismatch: bool,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}
fn put_f32s(b: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let cfg_text = ck.model.config().to_toml();
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    put_u32(&mut b, VERSION);
    b.extend_from_slice(&ck.model.config().digest());
    put_u32(&mut b, cfg_text.len() as u32);
    b.extend_from_slice(cfg_text.as_bytes());
    let params = ck.model.params();
    put_u32(&mut b, params.len() as u32);
    let mut offset = 0u64;
    for p in &params {
        put_u32(&mut b, p.name.len() as u32);
        b.extend_from_slice(p.name.as_bytes());
        put_u32(&mut b, p.tensor.rank() as u32);
        for &d in p.tensor.shape() {
            put_u64(&mut b, d as u64);
        }
        put_u64(&mut b, offset);
        offset += p.tensor.len() as u64;
    }
    put_u64(&mut b, offset);
    for p in &params {
        put_f32s(&mut b, p.tensor);
    }
    match &ck.optim {
        Some(o) => {
            b.push(1);
            put_u64(&mut b, o.step);
            for t in o.m.iter().chain(&o.v) {
                put_f32s(&mut b, t);
            }
        }
        None => b.push(0),
    }
    match &ck.rng {
        Some(r) => {
            b.push(1);
            b.extend_from_slice(&r.get_seed());
            put_u64(&mut b, r.get_stream());
            b.extend_from_slice(&r.get_word_pos().to_le_bytes());
        }
        None => b.push(0),
    }
    put_u64(&mut b, ck.epoch);
    put_u64(&mut b, ck.step);
    b
}

/// Writes atomically: the previous file stays intact until the new one is complete.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck);
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
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
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8], opts: &LoadOptions) -> Result<Checkpoint> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let config = BackboneConfig::from_toml_str(text)?;
    let reference = opts.expected.as_ref().unwrap_or(&config);
    if reference.digest() != digest || config.digest() != digest {
        if !opts.allow_mismatch {
            return Err(Error::Config("checkpoint config digest does not match the expected config".into()));
        }
        log::warn!("checkpoint config digest mismatch accepted by override");
    }
    let mut model = Backbone::<f32>::new(&config, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        table.push((name, shape, offset));
    }
    let total = r.u64()? as usize;
    let payload = r.f32s(total)?;
    {
        let mut params = model.params_mut();
        if params.len() != table.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, the config defines {}",
                table.len(),
                params.len()
            )));
        }
        for (p, (name, shape, offset)) in params.iter_mut().zip(&table) {
            let n: usize = shape.iter().product();
            if &p.name != name || p.tensor.shape() != shape.as_slice() || offset + n > payload.len() {
                return Err(Error::Format(format!(
                    "tensor {name} {shape:?} does not match model tensor {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            *p.tensor = Tensor::new(shape, payload[*offset..offset + n].to_vec())?;
        }
    }
    let optim = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.tensor.shape().to_vec()).collect();
            let read = |r: &mut Reader| -> Result<Vec<Tensor<f32>>> {
                shapes.iter().map(|s| Tensor::new(s, r.f32s(s.iter().product())?)).collect()
            };
            let m = read(&mut r)?;
            let v = read(&mut r)?;
            Some(OptimState { step, m, v })
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    let rng = match r.u8()? {
        0 => None,
        1 => {
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            let mut g = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
            g.set_stream(stream);
            g.set_word_pos(pos);
            Some(g)
        }
        f => return Err(Error::Format(format!("bad rng flag {f}"))),
    };
    let epoch = r.u64()?;
    let step = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, optim, rng, epoch, step })
}

pub fn load_checkpoint(path: &Path, opts: &LoadOptions) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, opts).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

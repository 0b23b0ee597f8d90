//! Single-file model checkpoints.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   b"DFLCKPT\0"
//! version      u32       currently 1
//! config_len   u32       length of the config block in bytes
//! config       UTF-8     `key = value` lines (same keys as run configs)
//! n_tensors    u32
//! per tensor, in canonical parameter order:
//!   name_len   u32
//!   name       UTF-8
//!   ndim       u32
//!   dims       u64 × ndim
//!   data       f64 × product(dims), row-major
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DFLCKPT\0";
pub const VERSION: u32 = 1;

pub fn config_to_text(c: &ModelConfig) -> String {
    format!(
        "n_layer = {}\nd_model = {}\nn_head = {}\nd_ff = {}\nvocab_size = {}\ncontext = {}\nbackward_derivative = {}\nresidual_backward = {}\n",
        c.n_layer,
        c.d_model,
        c.n_head,
        c.d_ff,
        c.vocab_size,
        c.context,
        c.backward_derivative,
        c.residual_backward
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::new(1, 1, 1, 2, 1);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let int = || {
            v.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad integer for {k}: `{v}`")))
        };
        match k {
            "n_layer" => c.n_layer = int()?,
            "d_model" => c.d_model = int()?,
            "n_head" => c.n_head = int()?,
            "d_ff" => c.d_ff = int()?,
            "vocab_size" => c.vocab_size = int()?,
            "context" => c.context = int()?,
            "backward_derivative" => c.backward_derivative = v.parse()?,
            "residual_backward" => c.residual_backward = v.parse()?,
            _ => return Err(Error::Checkpoint(format!("unknown config key `{k}`"))),
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn save(model: &Model, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = config_to_text(&model.config);
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    let named = model.params.named();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

pub fn load(mut r: impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let config = config_from_text(&read_string(&mut r, cfg_len)?)?;
    // Shapes and names come from a freshly built model; weights are overwritten.
    let mut model = Model::init(config, &RngState::new(0))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let n = read_u32(&mut r)? as usize;
    if n != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {n}",
            expected.len()
        )));
    }
    for ((name, shape), slot) in expected.into_iter().zip(model.params.tensors_mut()) {
        let name_len = read_u32(&mut r)? as usize;
        let got = read_string(&mut r, name_len)?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{got}`")));
        }
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {dims:?}, expected {shape:?}"
            )));
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(read_u64(&mut r)?.to_le_bytes()));
        }
        *slot = Tensor::new(dims, data)?;
    }
    Ok(model)
}

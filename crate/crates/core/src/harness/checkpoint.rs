//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "VLSGCKPT"
//! version  u32
//! config   u32 length + UTF-8 `key = value` text (model and training keys)
//! epoch    u64
//! step     u64
//! rng      32-byte seed, u64 stream, u128 word position
//! records  u32 count, then per record:
//!          u32 length + UTF-8 path, u8 dtype (1 = f64), u8 ndim,
//!          ndim x u64 dims, raw f64 values
//! ```
//!
//! Record paths are prefixed with `param/`, `buffer/`, `adam_m/` or `adam_v/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::optim::AdamW;
use super::train::{load_configs, TrainState};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{manifest_for, Manifest, ModelParams};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"VLSGCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_record(out: &mut Vec<u8>, path: &str, m: &Mat) {
    put_str(out, path);
    out.push(DTYPE_F64);
    out.push(2);
    put_u64(out, m.rows() as u64);
    put_u64(out, m.cols() as u64);
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `state` to bytes.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &format!("{}{}", state.model_cfg.to_kv(), state.train_cfg.to_kv()));
    put_u64(&mut out, state.epoch as u64);
    put_u64(&mut out, state.optimizer.step);
    out.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut out, state.rng.get_stream());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let mut records: Vec<(String, &Mat)> = Vec::new();
    records.extend(state.params.iter().map(|(k, m)| (format!("param/{k}"), m)));
    records.extend(state.params.buffers().map(|(k, m)| (format!("buffer/{k}"), m)));
    records.extend(state.optimizer.m.iter().map(|(k, m)| (format!("adam_m/{k}"), m)));
    records.extend(state.optimizer.v.iter().map(|(k, m)| (format!("adam_v/{k}"), m)));
    put_u32(&mut out, records.len() as u32);
    for (path, m) in records {
        put_record(&mut out, &path, m);
    }
    out
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

/// Parses a checkpoint and checks that its parameters match the manifest of
/// its embedded config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let (model_cfg, train_cfg) = load_configs(&r.str()?)?;
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for _ in 0..r.u32()? {
        let path = r.str()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("{path}: unsupported dtype {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [c] => (1, *c),
            [rr, c] => (*rr, *c),
            _ => return Err(Error::Checkpoint(format!("{path}: unsupported rank {ndim}"))),
        };
        let raw = r.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let m = Mat::from_vec(rows, cols, data);
        let (kind, name) = path
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("record `{path}` has no kind prefix")))?;
        let target = match kind {
            "param" => &mut params,
            "buffer" => &mut buffers,
            "adam_m" => &mut adam_m,
            "adam_v" => &mut adam_v,
            _ => return Err(Error::Checkpoint(format!("record `{path}` has unknown kind"))),
        };
        if target.insert(name.to_string(), m).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{path}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let params = ModelParams::from_maps(params, buffers);
    check_manifest(&model_cfg, &params)?;
    let moments = |m: &BTreeMap<String, Mat>| Manifest { entries: m.iter().map(|(k, v)| (k.clone(), v.shape())).collect() };
    let want = params.manifest();
    for (label, mom) in [("first moments", &adam_m), ("second moments", &adam_v)] {
        let diff = want.diff(&moments(mom));
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!("optimizer {label} do not match parameters: {}", diff.join("; "))));
        }
    }
    let optimizer = AdamW { weight_decay: train_cfg.weight_decay, step, m: adam_m, v: adam_v };
    Ok(TrainState { model_cfg, train_cfg, params, optimizer, epoch, rng })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}

/// Refuses `params` unless they match the manifest (and buffers) of `cfg`.
pub fn check_manifest(cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut diff = manifest_for(cfg).diff(&params.manifest());
    let want_buffers = Manifest {
        entries: crate::params::buffer_specs(cfg).into_iter().map(|s| (s.path, s.shape)).collect(),
    };
    let have_buffers = Manifest { entries: params.buffers().map(|(k, v)| (k.clone(), v.shape())).collect() };
    diff.extend(want_buffers.diff(&have_buffers));
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("parameter manifest mismatch: {}", diff.join("; "))))
    }
}

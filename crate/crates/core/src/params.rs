//! Parameter storage, the parameter manifest, and deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::{alignment, decoder, language, vision};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Initial alignment temperature; stored as its logarithm.
pub const INIT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal at two standard deviations, std [`INIT_STD`].
    TruncNormal,
    /// Truncated normal at two standard deviations with the given std.
    ScaledNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// One learnable tensor (or persistent buffer) declared by a module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: (usize, usize),
    pub init: Init,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self { path: path.into(), shape: (rows, cols), init }
    }
}

/// Declares `prefix.weight (in, out)` and `prefix.bias (1, out)`.
pub(crate) fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), d_in, d_out, Init::TruncNormal));
    out.push(ParamSpec::new(format!("{prefix}.bias"), 1, d_out, Init::Zeros));
}

pub(crate) fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    out.push(ParamSpec::new(format!("{prefix}.gamma"), 1, dim, Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.beta"), 1, dim, Init::Zeros));
}

/// Path and shape of every parameter, in path order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, (usize, usize))>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, (r, c))| r * c).sum()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.iter().any(|(p, _)| p == path)
    }

    pub fn shape(&self, path: &str) -> Option<(usize, usize)> {
        self.entries.iter().find(|(p, _)| p == path).map(|(_, s)| *s)
    }

    /// Human-readable differences of `other` relative to `self`.
    pub fn diff(&self, other: &Manifest) -> Vec<String> {
        let a: BTreeMap<_, _> = self.entries.iter().cloned().collect();
        let b: BTreeMap<_, _> = other.entries.iter().cloned().collect();
        let mut out = Vec::new();
        for (path, shape) in &a {
            match b.get(path) {
                None => out.push(format!("missing {path}")),
                Some(s) if s != shape => out.push(format!(
                    "shape mismatch at {path}: expected {}x{}, found {}x{}",
                    shape.0, shape.1, s.0, s.1
                )),
                _ => {}
            }
        }
        for path in b.keys() {
            if !a.contains_key(path) {
                out.push(format!("unexpected {path}"));
            }
        }
        out
    }
}

/// Every learnable parameter of the model described by `cfg`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    vision::param_specs(cfg, &mut specs);
    language::param_specs(cfg, &mut specs);
    alignment::param_specs(cfg, &mut specs);
    decoder::param_specs(cfg, &mut specs);
    specs.sort_by(|a, b| a.path.cmp(&b.path));
    specs
}

/// Non-learned persistent state (normalization running estimates).
pub fn buffer_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    decoder::buffer_specs(cfg, &mut specs);
    specs.sort_by(|a, b| a.path.cmp(&b.path));
    specs
}

pub fn manifest_for(cfg: &ModelConfig) -> Manifest {
    Manifest { entries: param_specs(cfg).into_iter().map(|s| (s.path, s.shape)).collect() }
}

/// All learnable parameters by hierarchical path, plus persistent buffers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    values: BTreeMap<String, Mat>,
    buffers: BTreeMap<String, Mat>,
}

impl ModelParams {
    pub fn from_maps(values: BTreeMap<String, Mat>, buffers: BTreeMap<String, Mat>) -> Self {
        Self { values, buffers }
    }

    pub fn get(&self, path: &str) -> Option<&Mat> {
        self.values.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Mat> {
        self.values.get_mut(path)
    }

    /// Looks up a parameter that the manifest guarantees to exist.
    pub fn expect(&self, path: &str) -> Result<&Mat> {
        self.values
            .get(path)
            .ok_or_else(|| Error::Usage(format!("parameter `{path}` is not in this parameter set")))
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Mat) {
        self.values.insert(path.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.values.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.values.iter_mut()
    }

    pub fn buffer(&self, path: &str) -> Option<&Mat> {
        self.buffers.get(path)
    }

    pub fn buffer_mut(&mut self, path: &str) -> Option<&mut Mat> {
        self.buffers.get_mut(path)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.buffers.iter()
    }

    pub fn insert_buffer(&mut self, path: impl Into<String>, value: Mat) {
        self.buffers.insert(path.into(), value);
    }

    pub fn manifest(&self) -> Manifest {
        Manifest { entries: self.values.iter().map(|(k, v)| (k.clone(), v.shape())).collect() }
    }

    pub fn scalar_count(&self) -> usize {
        self.values.values().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.values().all(|m| m.all_finite())
    }

    /// Zeroes every listed parameter (used to switch fusion sublayers off in tests).
    pub fn zero(&mut self, path: &str) -> Result<()> {
        let m = self
            .values
            .get_mut(path)
            .ok_or_else(|| Error::Usage(format!("parameter `{path}` is not in this parameter set")))?;
        m.data_mut().iter_mut().for_each(|x| *x = 0.0);
        Ok(())
    }
}

/// Builds the parameter set for `cfg`, deterministic in `(cfg, seed)`.
///
/// Each tensor draws from its own stream keyed by `seed` and its path, so
/// parameters shared between two ablation configurations start identical.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<(ModelParams, Manifest)> {
    cfg.validate()?;
    let mut params = ModelParams::default();
    for spec in param_specs(cfg) {
        let value = init_tensor(&spec, seed);
        params.values.insert(spec.path, value);
    }
    for spec in buffer_specs(cfg) {
        let value = init_tensor(&spec, seed);
        params.buffers.insert(spec.path, value);
    }
    let manifest = params.manifest();
    Ok((params, manifest))
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Mat {
    let (r, c) = spec.shape;
    match spec.init {
        Init::Zeros => Mat::zeros(r, c),
        Init::Ones => Mat::filled(r, c, 1.0),
        Init::Const(v) => Mat::filled(r, c, v),
        Init::TruncNormal | Init::ScaledNormal(_) => {
            let std = if let Init::ScaledNormal(s) = spec.init { s } else { INIT_STD };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.path.as_bytes()));
            Mat::from_fn(r, c, |_, _| std * trunc_normal(&mut rng))
        }
    }
}

fn trunc_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

//! Multi-head (cross) attention, the feed-forward block, and the standard
//! self-attention encoder blocks built from them.
//!
//! `mhca` and `ffn` contain no residuals and no normalization: callers add
//! residual connections exactly where the fusion equations place them.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{linear_specs, norm_specs, ModelParams, ParamSpec};

/// Projection layout of one attention instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub prefix: String,
    /// Width of the queries and of the output.
    pub model_dim: usize,
    /// Width of the key/value source sequence before projection.
    pub kv_dim: usize,
    pub num_heads: usize,
}

impl AttentionSpec {
    pub fn new(prefix: impl Into<String>, model_dim: usize, kv_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(Error::Shape(format!("{num_heads} heads do not divide model dim {model_dim}")));
        }
        Ok(Self { prefix: prefix.into(), model_dim, kv_dim, num_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let p = &self.prefix;
        linear_specs(out, &format!("{p}.q"), self.model_dim, self.model_dim);
        linear_specs(out, &format!("{p}.k"), self.kv_dim, self.model_dim);
        linear_specs(out, &format!("{p}.v"), self.kv_dim, self.model_dim);
        linear_specs(out, &format!("{p}.o"), self.model_dim, self.model_dim);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnSpec {
    pub prefix: String,
    pub model_dim: usize,
    pub hidden_dim: usize,
}

impl FfnSpec {
    pub fn new(prefix: impl Into<String>, model_dim: usize, hidden_dim: usize) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(Error::Shape("ffn hidden dim must be >= 1".into()));
        }
        Ok(Self { prefix: prefix.into(), model_dim, hidden_dim })
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        linear_specs(out, &format!("{}.fc1", self.prefix), self.model_dim, self.hidden_dim);
        linear_specs(out, &format!("{}.fc2", self.prefix), self.hidden_dim, self.model_dim);
    }
}

/// `x · W + b` with `W` at `{prefix}.weight` and `b` at `{prefix}.bias`.
pub fn linear(g: &mut Graph, params: &ModelParams, prefix: &str, x: Var) -> Var {
    let w = g.param(params, &format!("{prefix}.weight"));
    let b = g.param(params, &format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Multi-head attention of `query` over `kv`:
/// per head `softmax(Q K^T / sqrt(d_k) + mask) V`, heads concatenated and
/// output-projected.
///
/// `query` is `(batch*N_q, model_dim)`, `kv` is `(batch*N_k, kv_dim)`.
/// `key_padding[j] == true` excludes key `j` (indexed over the stacked batch).
pub fn mhca(
    g: &mut Graph,
    params: &ModelParams,
    spec: &AttentionSpec,
    query: Var,
    kv: Var,
    key_padding: Option<&[bool]>,
    batch: usize,
) -> Result<Var> {
    let (qv, kvv) = (g.value(query), g.value(kv));
    if qv.cols() != spec.model_dim {
        return Err(Error::Shape(format!("{}: query width {} != model dim {}", spec.prefix, qv.cols(), spec.model_dim)));
    }
    if kvv.cols() != spec.kv_dim {
        return Err(Error::Shape(format!("{}: key/value width {} != kv dim {}", spec.prefix, kvv.cols(), spec.kv_dim)));
    }
    if batch == 0 || qv.rows() % batch != 0 || kvv.rows() % batch != 0 {
        return Err(Error::Shape(format!(
            "{}: {} query rows / {} key rows not divisible by batch {batch}",
            spec.prefix,
            qv.rows(),
            kvv.rows()
        )));
    }
    if !qv.all_finite() || !kvv.all_finite() {
        return Err(Error::Numeric(format!("{} attention inputs", spec.prefix)));
    }
    let nk = kvv.rows() / batch;
    if let Some(mask) = key_padding {
        if mask.len() != kvv.rows() {
            return Err(Error::Shape(format!("{}: key mask length {} != {}", spec.prefix, mask.len(), kvv.rows())));
        }
        if let Some(sample) = mask.chunks(nk).position(|m| m.iter().all(|&x| x)) {
            return Err(Error::DegenerateMask { sample });
        }
    }
    let p = &spec.prefix;
    let q = linear(g, params, &format!("{p}.q"), query);
    let k = linear(g, params, &format!("{p}.k"), kv);
    let v = linear(g, params, &format!("{p}.v"), kv);
    let heads = g.attention(q, k, v, spec.num_heads, batch, key_padding);
    Ok(linear(g, params, &format!("{p}.o"), heads))
}

/// `fc2(gelu(fc1(x)))`, applied row-wise.
pub fn ffn(g: &mut Graph, params: &ModelParams, spec: &FfnSpec, x: Var) -> Result<Var> {
    let xv = g.value(x);
    if xv.cols() != spec.model_dim {
        return Err(Error::Shape(format!("{}: input width {} != {}", spec.prefix, xv.cols(), spec.model_dim)));
    }
    if !xv.all_finite() {
        return Err(Error::Numeric(format!("{} ffn input", spec.prefix)));
    }
    let h = linear(g, params, &format!("{}.fc1", spec.prefix), x);
    let h = g.gelu(h);
    Ok(linear(g, params, &format!("{}.fc2", spec.prefix), h))
}

pub(crate) fn layer_norm(g: &mut Graph, params: &ModelParams, prefix: &str, x: Var) -> Var {
    let gamma = g.param(params, &format!("{prefix}.gamma"));
    let beta = g.param(params, &format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta)
}

/// Where layer normalization sits in a self-attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    /// `x + f(LN(x))` (vision blocks).
    Pre,
    /// `LN(x + f(x))` (language layers).
    Post,
}

/// A standard self-attention encoder block: attention and FFN sublayers,
/// each with a residual and a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub prefix: String,
    pub attn: AttentionSpec,
    pub ffn: FfnSpec,
    pub norm: NormPlacement,
}

impl EncoderBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, hidden: usize, norm: NormPlacement) -> Result<Self> {
        Ok(Self {
            prefix: prefix.to_string(),
            attn: AttentionSpec::new(format!("{prefix}.attn"), dim, dim, heads)?,
            ffn: FfnSpec::new(format!("{prefix}.ffn"), dim, hidden)?,
            norm,
        })
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.attn.param_specs(out);
        self.ffn.param_specs(out);
        norm_specs(out, &format!("{}.norm1", self.prefix), self.attn.model_dim);
        norm_specs(out, &format!("{}.norm2", self.prefix), self.attn.model_dim);
    }

    pub fn forward(&self, g: &mut Graph, params: &ModelParams, x: Var, key_padding: Option<&[bool]>, batch: usize) -> Result<Var> {
        let n1 = format!("{}.norm1", self.prefix);
        let n2 = format!("{}.norm2", self.prefix);
        match self.norm {
            NormPlacement::Pre => {
                let h = layer_norm(g, params, &n1, x);
                let a = mhca(g, params, &self.attn, h, h, key_padding, batch)?;
                let x = g.add(x, a);
                let h = layer_norm(g, params, &n2, x);
                let f = ffn(g, params, &self.ffn, h)?;
                Ok(g.add(x, f))
            }
            NormPlacement::Post => {
                let a = mhca(g, params, &self.attn, x, x, key_padding, batch)?;
                let x = g.add(x, a);
                let x = layer_norm(g, params, &n1, x);
                let f = ffn(g, params, &self.ffn, x)?;
                let x = g.add(x, f);
                Ok(layer_norm(g, params, &n2, x))
            }
        }
    }
}

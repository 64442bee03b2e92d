//! A small reverse-mode automatic differentiation tape over [`Mat`] values.
//!
//! Every forward computation in the crate records its operations on a
//! [`Graph`]. Activations for a whole mini-batch are stacked row-wise, so a
//! batch of `B` sequences of length `N` with width `C` is one `(B*N, C)`
//! matrix; ops that need to see the per-sample structure (attention, spatial
//! gathers, per-sample alignment) carry the batch size explicitly.
//!
//! Shape mismatches inside this module are programming errors and panic; the
//! model-level functions validate their inputs and return [`crate::Error`]s
//! before reaching here.

use std::collections::BTreeMap;

use crate::params::ModelParams;
use crate::tensor::{gemm, Mat, MatMut, MatRef};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel index for [`Graph::gather`] positions that read as zero.
pub const GATHER_ZERO: u32 = u32::MAX;

const NORM_EPS: f64 = 1e-5;
/// Added to vector norms before dividing in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Probability clamp used by the binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

/// Statistics recorded by a batch normalization node running in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub name: String,
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64>, batch_stats: bool },
    Attention(Box<AttnCache>),
    Gather { a: Var, index: Vec<u32> },
    ConcatCols(Var, Var),
    SpatialMix { a: Var, taps: Vec<(u32, u32, f64)> },
    Bce { x: Var, targets: Vec<f64>, probs: Vec<f64> },
    Align(Box<AlignCache>),
}

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    nq: usize,
    nk: usize,
    probs: Vec<f64>,
}

struct AlignCache {
    zv: Var,
    zl: Var,
    log_tau: Var,
    labels: Vec<bool>,
    batch: usize,
    sims: Vec<f64>,
    pixel_loss: Vec<f64>,
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    per_node: Vec<Option<Mat>>,
    params: BTreeMap<String, Var>,
}

impl Grads {
    /// Gradient with respect to `v`, or `None` when nothing downstream of `v`
    /// reached the loss.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.per_node[v.0].as_ref()
    }

    /// Gradient for a named parameter, if it took part in the graph.
    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.get(name).and_then(|v| self.wrt(*v))
    }

    /// All parameter gradients, keyed by parameter path.
    pub fn into_param_map(mut self) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.per_node[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    batch_stats: Vec<BatchStats>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that does receive a gradient (used by gradient checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node holding parameter `name`, created on first use.
    ///
    /// Panics if `name` is not in `params`; parameter paths are fixed by the
    /// manifest so a miss is a wiring bug.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let value = params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from parameter set"))
            .clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Batch statistics recorded by training-mode batch normalization nodes.
    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds the `(1, cols)` row vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let r = r.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Adds the `(p, cols)` block `tile` to every consecutive group of `p`
    /// rows of `a` (positional embeddings over a stacked batch).
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Var {
        let t = self.value(tile).clone();
        let mut out = self.value(a).clone();
        assert_eq!(t.cols(), out.cols(), "add_tiled width");
        assert_eq!(out.rows() % t.rows(), 0, "add_tiled period");
        let period = t.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += t.data()[i % period];
        }
        let ng = self.ng(a) || self.ng(tile);
        self.push(out, Op::AddTiled(a, tile), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `(1, cols)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut xhat = Mat::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Per-column normalization over all rows (every sample and position of a
    /// stacked feature map).
    ///
    /// With `running = None` the batch statistics are used and recorded under
    /// `name`; with `Some((mean, var))` the frozen estimates are applied.
    pub fn batch_norm(&mut self, name: &str, x: Var, gamma: Var, beta: Var, running: Option<(&[f64], &[f64])>) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let (mean, var_biased, batch_stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, true)
            }
        };
        if batch_stats {
            let unbiased = if n > 1 {
                var_biased.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
            } else {
                var_biased.clone()
            };
            self.batch_stats.push(BatchStats { name: name.to_string(), mean: mean.clone(), var: unbiased });
        }
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xv = self.value(x);
        let mut xhat = Mat::zeros(n, c);
        for r in 0..n {
            let src = xv.row(r);
            for (j, o) in xhat.row_mut(r).iter_mut().enumerate() {
                *o = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let out = affine_cols(&xhat, self.value(gamma), self.value(beta));
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, ng)
    }

    /// Multi-head scaled dot-product attention over a stacked batch.
    ///
    /// `q` is `(batch*nq, d)`, `k` and `v` are `(batch*nk, d)`. Keys whose
    /// `key_mask` entry is `true` get zero weight. Heads split `d` into
    /// contiguous column blocks and are concatenated back in the output.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize, key_mask: Option<&[bool]>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.shape(), kv.shape());
        assert_eq!(d % heads, 0, "model dim not divisible by heads");
        assert_eq!(qv.rows() % batch, 0);
        assert_eq!(kv.rows() % batch, 0);
        let nq = qv.rows() / batch;
        let nk = kv.rows() / batch;
        if let Some(m) = key_mask {
            assert_eq!(m.len(), batch * nk, "key mask length");
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let mut out = Mat::zeros(batch * nq, d);
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
                gemm(
                    MatRef::block(qv.data(), d, b * nq, nq, h * dk, dk),
                    MatRef::block(kv.data(), d, b * nk, nk, h * dk, dk).t(),
                    MatMut::block(p, nk, 0, nq, 0, nk),
                    scale,
                    0.0,
                );
                let mask = key_mask.map(|m| &m[b * nk..(b + 1) * nk]);
                for row in p.chunks_mut(nk) {
                    softmax_in_place(row, mask);
                }
                gemm(
                    MatRef::block(p, nk, 0, nq, 0, nk),
                    MatRef::block(vv.data(), d, b * nk, nk, h * dk, dk),
                    MatMut::block(out.data_mut(), d, b * nq, nq, h * dk, dk),
                    1.0,
                    0.0,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention(Box::new(AttnCache { q, k, v, heads, batch, nq, nk, probs })), ng)
    }

    /// Attention weights of an attention node, laid out `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    /// Element gather: output element `i` is `a.data[index[i]]`, or zero for
    /// [`GATHER_ZERO`]. Covers row selection, embedding lookup, patch merging
    /// and im2col.
    pub fn gather(&mut self, a: Var, index: Vec<u32>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = self.value(a).data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        let ng = self.ng(a);
        self.push(Mat::from_vec(rows, cols, data), Op::Gather { a, index }, ng)
    }

    /// Selects whole rows of `a`.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let cols = self.value(a).cols();
        let mut index = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            index.extend((0..cols).map(|c| (r * cols + c) as u32));
        }
        self.gather(a, index, rows.len(), cols)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat_cols rows");
        let mut out = Mat::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    /// Row mixing: output row `o` accumulates `w * a.row(i)` for every tap
    /// `(o, i, w)`. Used for bilinear resampling.
    pub fn spatial_mix(&mut self, a: Var, taps: Vec<(u32, u32, f64)>, out_rows: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Mat::zeros(out_rows, c);
        for &(o, i, w) in &taps {
            let src = av.row(i as usize);
            for (d, s) in out.row_mut(o as usize).iter_mut().zip(src) {
                *d += w * s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SpatialMix { a, taps }, ng)
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `targets`, with the
    /// probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), targets.len(), "bce target length");
        let n = targets.len() as f64;
        let probs: Vec<f64> = xv.data().iter().map(|&z| sigmoid(z)).collect();
        let mut total = 0.0;
        for (&p, &y) in probs.iter().zip(targets) {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let ng = self.ng(x);
        self.push(Mat::scalar(total / n), Op::Bce { x, targets: targets.to_vec(), probs }, ng)
    }

    /// Sigmoid text-to-pixel alignment loss, averaged over every pixel row.
    ///
    /// `zv` is `(batch*n, d)`, `zl` is `(batch, d)`, `log_tau` is `1x1`.
    /// Pixel `j` of sample `b` scores `cos(zv[j], zl[b]) / exp(log_tau)`;
    /// positives pay `-ln σ(s)`, negatives `-ln(1 - σ(s))`.
    pub fn alignment_loss(&mut self, zv: Var, zl: Var, log_tau: Var, labels: &[bool], batch: usize) -> Var {
        let (zvv, zlv) = (self.value(zv), self.value(zl));
        assert_eq!(zlv.rows(), batch);
        assert_eq!(zvv.cols(), zlv.cols());
        assert_eq!(zvv.rows(), labels.len());
        assert_eq!(zvv.rows() % batch, 0);
        let n = zvv.rows() / batch;
        let tau = self.value(log_tau).item().exp();
        let mut sims = Vec::with_capacity(labels.len());
        let mut pixel_loss = Vec::with_capacity(labels.len());
        for b in 0..batch {
            let l = zlv.row(b);
            let nl = norm(l) + COSINE_EPS;
            for j in 0..n {
                let r = b * n + j;
                let v = zvv.row(r);
                let cos = dot(v, l) / ((norm(v) + COSINE_EPS) * nl);
                let s = cos / tau;
                sims.push(s);
                pixel_loss.push(if labels[r] { softplus(-s) } else { softplus(s) });
            }
        }
        let value = pixel_loss.iter().sum::<f64>() / pixel_loss.len() as f64;
        let ng = self.ng(zv) || self.ng(zl) || self.ng(log_tau);
        let cache = AlignCache { zv, zl, log_tau, labels: labels.to_vec(), batch, sims, pixel_loss };
        self.push(Mat::scalar(value), Op::Align(Box::new(cache)), ng)
    }

    /// Per-pixel losses and temperature-scaled similarities of an alignment node.
    pub fn alignment_maps(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Align(c) => Some((&c.pixel_loss, &c.sims)),
            _ => None,
        }
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Grads { per_node: grads, params: self.params.clone() }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    gemm(MatRef::full(g), MatRef::full(bv).t(), MatMut::full(&mut ga), 1.0, 0.0);
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Mat::zeros(bv.rows(), bv.cols());
                    gemm(MatRef::full(av).t(), MatRef::full(g), MatMut::full(&mut gb), 1.0, 0.0);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*row) {
                    accumulate(grads, *row, column_sums(g));
                }
            }
            Op::AddTiled(a, tile) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*tile) {
                    let t = self.value(*tile);
                    let mut gt = Mat::zeros(t.rows(), t.cols());
                    let period = t.len();
                    for (i, v) in g.data().iter().enumerate() {
                        gt.data_mut()[i % period] += v;
                    }
                    accumulate(grads, *tile, gt);
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.map(|x| x * s));
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let x = self.value(*a);
                    let ga = Mat::from_vec(
                        x.rows(),
                        x.cols(),
                        x.data().iter().zip(g.data()).map(|(&x, &g)| g * gelu_grad(x)).collect(),
                    );
                    accumulate(grads, *a, ga);
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    let x = self.value(*a);
                    let ga = Mat::from_vec(
                        x.rows(),
                        x.cols(),
                        x.data().iter().zip(g.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect(),
                    );
                    accumulate(grads, *a, ga);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma).data();
                let (n, c) = xhat.shape();
                if self.ng(*gamma) || self.ng(*beta) {
                    let (gg, gb) = affine_param_grads(g, xhat);
                    if self.ng(*gamma) {
                        accumulate(grads, *gamma, gg);
                    }
                    if self.ng(*beta) {
                        accumulate(grads, *beta, gb);
                    }
                }
                if self.ng(*x) {
                    let mut gx = Mat::zeros(n, c);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(d, x)| d * x).sum();
                        let k = inv_std[r] / c as f64;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = k * (c as f64 * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let gam = self.value(*gamma).data();
                let (n, c) = xhat.shape();
                if self.ng(*gamma) || self.ng(*beta) {
                    let (gg, gb) = affine_param_grads(g, xhat);
                    if self.ng(*gamma) {
                        accumulate(grads, *gamma, gg);
                    }
                    if self.ng(*beta) {
                        accumulate(grads, *beta, gb);
                    }
                }
                if self.ng(*x) {
                    let mut gx = Mat::zeros(n, c);
                    if *batch_stats {
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for r in 0..n {
                            for j in 0..c {
                                let d = g.get(r, j) * gam[j];
                                s1[j] += d;
                                s2[j] += d * xhat.get(r, j);
                            }
                        }
                        for r in 0..n {
                            for j in 0..c {
                                let d = g.get(r, j) * gam[j];
                                let v = inv_std[j] / n as f64 * (n as f64 * d - s1[j] - xhat.get(r, j) * s2[j]);
                                gx.set(r, j, v);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                gx.set(r, j, g.get(r, j) * gam[j] * inv_std[j]);
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention(c) => self.backprop_attention(c, g, grads),
            Op::Gather { a, index } => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    let dst = ga.data_mut();
                    for (&i, &v) in index.iter().zip(g.data()) {
                        if i != GATHER_ZERO {
                            dst[i as usize] += v;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                if self.ng(*a) {
                    let ga = Mat::from_fn(g.rows(), ca, |r, c| g.get(r, c));
                    accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = Mat::from_fn(g.rows(), cb, |r, c| g.get(r, ca + c));
                    accumulate(grads, *b, gb);
                }
            }
            Op::SpatialMix { a, taps } => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for &(o, i, w) in taps {
                        let src = g.row(o as usize).to_vec();
                        for (d, s) in ga.row_mut(i as usize).iter_mut().zip(&src) {
                            *d += w * s;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Bce { x, targets, probs } => {
                if self.ng(*x) {
                    let up = g.item() / targets.len() as f64;
                    let xv = self.value(*x);
                    let data = probs
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                                up * (p - y)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(grads, *x, Mat::from_vec(xv.rows(), xv.cols(), data));
                }
            }
            Op::Align(c) => self.backprop_alignment(c, g.item(), grads),
        }
    }

    fn backprop_attention(&self, c: &AttnCache, g: &Mat, grads: &mut [Option<Mat>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.cols();
        let dk = d / c.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (nq, nk) = (c.nq, c.nk);
        let mut gq = Mat::zeros(qv.rows(), d);
        let mut gk = Mat::zeros(kv.rows(), d);
        let mut gv = Mat::zeros(vv.rows(), d);
        let mut dp = vec![0.0; nq * nk];
        for b in 0..c.batch {
            for h in 0..c.heads {
                let p = &c.probs[(b * c.heads + h) * nq * nk..(b * c.heads + h + 1) * nq * nk];
                let g_blk = MatRef::block(g.data(), d, b * nq, nq, h * dk, dk);
                // dV = P^T dO
                gemm(
                    MatRef::block(p, nk, 0, nq, 0, nk).t(),
                    g_blk,
                    MatMut::block(gv.data_mut(), d, b * nk, nk, h * dk, dk),
                    1.0,
                    0.0,
                );
                // dP = dO V^T, then the softmax Jacobian in place.
                gemm(
                    g_blk,
                    MatRef::block(vv.data(), d, b * nk, nk, h * dk, dk).t(),
                    MatMut::block(&mut dp, nk, 0, nq, 0, nk),
                    1.0,
                    0.0,
                );
                for (dp_row, p_row) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                    let s: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                    for (x, &pv) in dp_row.iter_mut().zip(p_row) {
                        *x = pv * (*x - s);
                    }
                }
                gemm(
                    MatRef::block(&dp, nk, 0, nq, 0, nk),
                    MatRef::block(kv.data(), d, b * nk, nk, h * dk, dk),
                    MatMut::block(gq.data_mut(), d, b * nq, nq, h * dk, dk),
                    scale,
                    0.0,
                );
                gemm(
                    MatRef::block(&dp, nk, 0, nq, 0, nk).t(),
                    MatRef::block(qv.data(), d, b * nq, nq, h * dk, dk),
                    MatMut::block(gk.data_mut(), d, b * nk, nk, h * dk, dk),
                    scale,
                    0.0,
                );
            }
        }
        if self.ng(c.q) {
            accumulate(grads, c.q, gq);
        }
        if self.ng(c.k) {
            accumulate(grads, c.k, gk);
        }
        if self.ng(c.v) {
            accumulate(grads, c.v, gv);
        }
    }

    fn backprop_alignment(&self, c: &AlignCache, up: f64, grads: &mut [Option<Mat>]) {
        let (zvv, zlv) = (self.value(c.zv), self.value(c.zl));
        let dim = zvv.cols();
        let n = zvv.rows() / c.batch;
        let tau = self.value(c.log_tau).item().exp();
        let scale = up / c.labels.len() as f64;
        let mut gzv = Mat::zeros(zvv.rows(), dim);
        let mut gzl = Mat::zeros(zlv.rows(), dim);
        let mut glt = 0.0;
        for b in 0..c.batch {
            let l = zlv.row(b);
            let l_norm = norm(l);
            let nl = l_norm + COSINE_EPS;
            for j in 0..n {
                let r = b * n + j;
                let v = zvv.row(r);
                let v_norm = norm(v);
                let nv = v_norm + COSINE_EPS;
                let s = c.sims[r];
                let y = if c.labels[r] { 1.0 } else { 0.0 };
                // d loss / d s = σ(s) - y
                let ds = scale * (sigmoid(s) - y);
                glt += ds * (-s);
                let dcos = ds / tau;
                let vl = dot(v, l);
                let base = 1.0 / (nv * nl);
                let kv = if v_norm > 0.0 { vl / (nv * nv * nl * v_norm) } else { 0.0 };
                let kl = if l_norm > 0.0 { vl / (nv * nl * nl * l_norm) } else { 0.0 };
                let gv_row = gzv.row_mut(r);
                for i in 0..dim {
                    gv_row[i] += dcos * (l[i] * base - v[i] * kv);
                }
                let gl_row = gzl.row_mut(b);
                for i in 0..dim {
                    gl_row[i] += dcos * (v[i] * base - l[i] * kl);
                }
            }
        }
        if self.ng(c.zv) {
            accumulate(grads, c.zv, gzv);
        }
        if self.ng(c.zl) {
            accumulate(grads, c.zl, gzl);
        }
        if self.ng(c.log_tau) {
            accumulate(grads, c.log_tau, Mat::scalar(glt));
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn affine_cols(xhat: &Mat, gamma: &Mat, beta: &Mat) -> Mat {
    let (gam, bet) = (gamma.data(), beta.data());
    assert_eq!(gam.len(), xhat.cols());
    assert_eq!(bet.len(), xhat.cols());
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((o, g), b) in out.row_mut(r).iter_mut().zip(gam).zip(bet) {
            *o = *o * g + b;
        }
    }
    out
}

fn affine_param_grads(g: &Mat, xhat: &Mat) -> (Mat, Mat) {
    let c = xhat.cols();
    let mut gg = Mat::zeros(1, c);
    let mut gb = Mat::zeros(1, c);
    for r in 0..g.rows() {
        for j in 0..c {
            let v = g.get(r, j);
            gg.data_mut()[j] += v * xhat.get(r, j);
            gb.data_mut()[j] += v;
        }
    }
    (gg, gb)
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Softmax with max-subtraction; `true` entries of `mask` are excluded and get
/// exactly zero weight.
pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    if let Some(m) = mask {
        for (x, &masked) in row.iter_mut().zip(m) {
            if masked {
                *x = f64::NEG_INFINITY;
            }
        }
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

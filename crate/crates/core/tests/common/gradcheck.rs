//! Finite-difference gradient checks: central differences with step
//! [`FD_STEP`] in double precision. Each check returns the worst relative
//! error, or a description of the first entry over tolerance.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use vlseg::attention::{ffn, mhca, AttentionSpec, FfnSpec};
use vlseg::decoder::{task_loss, NormMode};
use vlseg::graph::Graph;
use vlseg::harness::pipeline::{compute_losses, forward_pipeline, Model};
use vlseg::params::{param_specs, ModelParams, ParamSpec};
use vlseg::{init_params, Mat};

use super::*;

pub const COMPONENT_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;

type Check = Result<f64, String>;

fn params_from_specs(specs: &[ParamSpec], seed: u64, scale: f64) -> ModelParams {
    let mut r = rng(seed);
    let mut p = ModelParams::default();
    for s in specs {
        p.insert(s.path.clone(), random_mat(&mut r, s.shape.0, s.shape.1, scale));
    }
    p
}

/// Scalar readout `sum(out * w)` so every output entry matters.
fn readout(g: &mut Graph, out: vlseg::Var, w: &Mat) -> vlseg::Var {
    let wv = g.constant(w.clone());
    let prod = g.matmul(out, wv);
    let (r, _) = g.value(prod).shape();
    let ones = g.constant(Mat::filled(1, r, 1.0));
    g.matmul(ones, prod)
}

/// Tracks the worst error and fails on the first entry over `tol`.
struct Worst {
    tol: f64,
    worst: f64,
}

impl Worst {
    fn new(tol: f64) -> Self {
        Self { tol, worst: 0.0 }
    }

    fn add(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) -> Result<(), String> {
        let e = rel_err(analytic, numeric);
        self.worst = self.worst.max(e);
        if e <= self.tol {
            Ok(())
        } else {
            Err(format!("{}: analytic {analytic} numeric {numeric} rel {e:.3e}", what()))
        }
    }

    fn input(&mut self, name: &str, grad: &Mat, x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Result<(), String> {
        for idx in 0..x.len() {
            let num = fd_mat(x, idx, f);
            self.add(|| format!("d{name}[{idx}]"), grad.data()[idx], num)?;
        }
        Ok(())
    }

    fn params(
        &mut self,
        params: &mut ModelParams,
        paths: &[String],
        grads: &BTreeMap<String, Mat>,
        f: &dyn Fn(&ModelParams) -> f64,
    ) -> Result<(), String> {
        for path in paths {
            for idx in 0..params.get(path).unwrap().len() {
                let a = grads.get(path).map_or(0.0, |g| g.data()[idx]);
                let num = fd_param(params, path, idx, f);
                self.add(|| format!("{path}[{idx}]"), a, num)?;
            }
        }
        Ok(())
    }
}

fn all_paths(p: &ModelParams) -> Vec<String> {
    p.iter().map(|(k, _)| k.clone()).collect()
}

/// Multi-head cross-attention with a key mask: every parameter and both inputs.
pub fn attention() -> Check {
    let mut r = rng(11);
    let mut w = Worst::new(COMPONENT_TOL);
    for (heads, dq, dkv, nq, nk, batch) in [(1, 4, 4, 3, 5, 1), (2, 4, 6, 4, 3, 2), (4, 8, 4, 2, 6, 2)] {
        let spec = AttentionSpec::new("a", dq, dkv, heads).unwrap();
        let mut specs = Vec::new();
        spec.param_specs(&mut specs);
        let mut params = params_from_specs(&specs, r.random(), 0.5);
        let q = random_mat(&mut r, batch * nq, dq, 1.0);
        let kv = random_mat(&mut r, batch * nk, dkv, 1.0);
        let rw = random_mat(&mut r, dq, 1, 1.0);
        let mut mask = vec![false; batch * nk];
        mask[nk - 1] = true;

        let eval = |p: &ModelParams, q: &Mat, kv: &Mat| {
            let mut g = Graph::new();
            let qv = g.input(q.clone());
            let kvv = g.input(kv.clone());
            let out = mhca(&mut g, p, &spec, qv, kvv, Some(&mask), batch).unwrap();
            let loss = readout(&mut g, out, &rw);
            let grads = g.backward(loss);
            (g.value(loss).item(), grads.wrt(qv).cloned().unwrap(), grads.wrt(kvv).cloned().unwrap(), grads.into_param_map())
        };
        let (_, gq, gkv, gp) = eval(&params, &q, &kv);
        let paths = all_paths(&params);
        w.params(&mut params, &paths, &gp, &|p| eval(p, &q, &kv).0)?;
        w.input("q", &gq, &q, &|m| eval(&params, m, &kv).0)?;
        w.input("kv", &gkv, &kv, &|m| eval(&params, &q, m).0)?;
    }
    Ok(w.worst)
}

pub fn feed_forward() -> Check {
    let mut r = rng(12);
    let mut w = Worst::new(COMPONENT_TOL);
    let spec = FfnSpec::new("f", 5, 7).unwrap();
    let mut specs = Vec::new();
    spec.param_specs(&mut specs);
    let mut params = params_from_specs(&specs, 3, 0.7);
    let x = random_mat(&mut r, 6, 5, 1.5);
    let rw = random_mat(&mut r, 5, 1, 1.0);
    let eval = |p: &ModelParams, x: &Mat| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = ffn(&mut g, p, &spec, xv).unwrap();
        let loss = readout(&mut g, out, &rw);
        let grads = g.backward(loss);
        (g.value(loss).item(), grads.wrt(xv).cloned().unwrap(), grads.into_param_map())
    };
    let (_, gx, gp) = eval(&params, &x);
    let paths = all_paths(&params);
    w.params(&mut params, &paths, &gp, &|p| eval(p, &x).0)?;
    w.input("x", &gx, &x, &|m| eval(&params, m).0)?;
    Ok(w.worst)
}

/// The sigmoid-cosine loss with respect to both embeddings and the log-temperature.
pub fn alignment_loss() -> Check {
    let mut r = rng(13);
    let mut w = Worst::new(COMPONENT_TOL);
    let (batch, pixels, dim) = (2, 4, 3);
    // Cosine curvature scales with 1/|z|^2; norms of a few units keep the
    // O(h^2) truncation of the central difference well under tolerance.
    let zv = random_mat(&mut r, batch * pixels, dim, 3.0);
    let zl = random_mat(&mut r, batch, dim, 3.0);
    let tau = Mat::scalar((0.3f64).ln());
    let labels: Vec<bool> = (0..batch * pixels).map(|i| i % 3 == 0).collect();
    let eval = |zv: &Mat, zl: &Mat, tau: &Mat| {
        let mut g = Graph::new();
        let a = g.input(zv.clone());
        let b = g.input(zl.clone());
        let t = g.input(tau.clone());
        let loss = g.alignment_loss(a, b, t, &labels, batch);
        let grads = g.backward(loss);
        (g.value(loss).item(), grads.wrt(a).cloned().unwrap(), grads.wrt(b).cloned().unwrap(), grads.wrt(t).cloned().unwrap())
    };
    let (_, ga, gb, gt) = eval(&zv, &zl, &tau);
    w.input("zv", &ga, &zv, &|m| eval(m, &zl, &tau).0)?;
    w.input("zl", &gb, &zl, &|m| eval(&zv, m, &tau).0)?;
    w.input("log_tau", &gt, &tau, &|m| eval(&zv, &zl, m).0)?;
    Ok(w.worst)
}

/// One sample on the 2x2 stage-3 map of the micro chain; both projections
/// and the temperature go through the real head.
pub fn alignment_heads() -> Check {
    let cfg = vlseg::ModelConfig { align_stages: vec![3], ..micro_config() };
    let (mut params, _) = init_params(&cfg, 5).unwrap();
    let mut r = rng(14);
    for (k, m) in params.iter_mut() {
        if k.starts_with("align.") && !k.ends_with("log_tau") {
            *m = random_mat(&mut r, m.rows(), m.cols(), 1.5);
        }
    }
    let v = random_mat(&mut r, 4, cfg.channels(3), 3.0);
    let cls = random_mat(&mut r, 1, cfg.lang_dim, 3.0);
    let labels = vec![vlseg::alignment::PixelLabelMap { side: 2, positive: vec![true, false, false, true] }];
    let eval = |p: &ModelParams| {
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let cv = g.constant(cls.clone());
        let (zv, zl) = vlseg::alignment::project_features(&mut g, p, &cfg, 3, vv, cv).unwrap();
        let tau = g.param(p, "align.stage3.log_tau");
        let loss = vlseg::alignment::stage_alignment_loss(&mut g, zv, zl, &labels, tau).unwrap();
        let grads = g.backward(loss);
        (g.value(loss).item(), grads.into_param_map())
    };
    let grads = eval(&params).1;
    let paths: Vec<String> = all_paths(&params).into_iter().filter(|k| k.starts_with("align.")).collect();
    if paths.len() != 5 {
        return Err(format!("expected 5 alignment tensors, found {paths:?}"));
    }
    let mut w = Worst::new(COMPONENT_TOL);
    w.params(&mut params, &paths, &grads, &|p| eval(p).0)?;
    Ok(w.worst)
}

pub fn task_loss_logits() -> Check {
    let mut r = rng(15);
    let x = random_mat(&mut r, 10, 1, 3.0);
    let gt: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
    let eval = |x: &Mat| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let loss = task_loss(&mut g, xv, &gt).unwrap();
        let grads = g.backward(loss);
        (g.value(loss).item(), grads.wrt(xv).cloned().unwrap())
    };
    let mut w = Worst::new(COMPONENT_TOL);
    w.input("logits", &eval(&x).1, &x, &|m| eval(m).0)?;
    Ok(w.worst)
}

/// Full model on the micro config: 50 randomly sampled scalars per module.
pub fn end_to_end_micro() -> Check {
    let cfg = micro_config();
    let model = Model::new(&cfg).unwrap();
    let (mut params, _) = init_params(&cfg, 21).unwrap();
    // Trunc-normal 0.02 init leaves most signals tiny; widen weights so every
    // path carries a measurable gradient. The decoder ReLUs make the loss
    // piecewise smooth, and a step of 1e-3 straddles a kink for most random
    // instances; this seed does not.
    let mut r = rng(31);
    for (k, m) in params.iter_mut() {
        if k.ends_with(".weight") || k.ends_with("embed") {
            *m = random_mat(&mut r, m.rows(), m.cols(), 0.3);
        }
    }
    let batch = random_batch(&cfg, 2, 23);
    let loss_of = |p: &ModelParams| {
        let mut g = Graph::new();
        let out = forward_pipeline(&mut g, p, &model, &batch, NormMode::Train).unwrap();
        let l = compute_losses(&mut g, p, &cfg, &out, &batch.gts).unwrap();
        (g, l.total)
    };
    let (g, total) = loss_of(&params);
    let grads = g.backward(total).into_param_map();
    let value = |p: &ModelParams| {
        let (g, t) = loss_of(p);
        g.value(t).item()
    };

    let specs = param_specs(&cfg);
    let mut w = Worst::new(END_TO_END_TOL);
    for module in ["vision.", "language.", "align.", "decoder."] {
        let entries: Vec<(String, usize)> = specs
            .iter()
            .filter(|s| s.path.starts_with(module))
            .flat_map(|s| (0..s.shape.0 * s.shape.1).map(move |i| (s.path.clone(), i)))
            .collect();
        if entries.is_empty() {
            return Err(format!("no parameters under {module}"));
        }
        for (path, idx) in entries.choose_multiple(&mut r, 50) {
            let a = grads.get(path).map_or(0.0, |g| g.data()[*idx]);
            let num = fd_param(&mut params, path, *idx, &value);
            w.add(|| format!("{path}[{idx}]"), a, num)?;
        }
    }
    Ok(w.worst)
}

//! AdamW with decoupled weight decay and polynomial learning-rate decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Mat;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base * (1 - t / t_max)^power`, clamped to zero past `t_max`.
pub fn poly_lr(base: f64, t: usize, t_max: usize, power: f64) -> f64 {
    if t_max == 0 || t >= t_max {
        return 0.0;
    }
    base * (1.0 - t as f64 / t_max as f64).powf(power)
}

/// Biases, normalization gains/offsets and temperatures are not decayed.
pub fn decays(path: &str) -> bool {
    !["bias", "gamma", "beta", "log_tau"].iter().any(|s| path.ends_with(s))
}

/// First and second moments per parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        let zeros = |p: &ModelParams| p.iter().map(|(k, m)| (k.clone(), Mat::zeros(m.rows(), m.cols()))).collect();
        Self { weight_decay, step: 0, m: zeros(params), v: zeros(params) }
    }

    /// One update at learning rate `lr`. Parameters without a gradient entry
    /// (unused by the graph) still receive weight decay and moment decay.
    pub fn update(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Mat>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (path, w) in params.iter_mut() {
            let (Some(m), Some(v)) = (self.m.get_mut(path), self.v.get_mut(path)) else {
                return Err(Error::Checkpoint(format!("optimizer has no moments for {path}")));
            };
            let g = grads.get(path);
            if let Some(g) = g {
                if g.shape() != w.shape() {
                    return Err(Error::Shape(format!("gradient shape mismatch at {path}")));
                }
            }
            let wd = if decays(path) { self.weight_decay } else { 0.0 };
            let wdata = w.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..wdata.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = BETA1 * md[i] + (1.0 - BETA1) * gi;
                vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                wdata[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + wd * wdata[i]);
            }
        }
        Ok(())
    }
}

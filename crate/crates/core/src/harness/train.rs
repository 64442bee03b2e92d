//! Training loop, evaluation over a scene list, and the epoch log.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{poly_lr, AdamW};
use super::pipeline::{compute_losses, forward_pipeline, predict_probabilities, Batch, Model};
use crate::config::{format_f64, parse_kv, parse_num, ModelConfig};
use crate::decoder::{NormMode, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{evaluate, evaluate_probabilities, EvalReport};
use crate::params::{init_params, ModelParams};
use crate::synthdata::{Scene, Vocab};

/// Optimization settings. Architecture and ablation switches live in
/// [`ModelConfig`]; the model seed there drives initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    /// Seeds the batch shuffling stream.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, base_lr: 3e-4, lr_power: 0.9, weight_decay: 0.01, shuffle_seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs: must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch_size: must be >= 1".to_string());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            v.push("base_lr: must be finite and > 0".to_string());
        }
        if !(self.lr_power >= 0.0) {
            v.push("lr_power: must be >= 0".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            v.push("weight_decay: must be >= 0".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", format_f64(self.base_lr)),
            ("lr_power", format_f64(self.lr_power)),
            ("weight_decay", format_f64(self.weight_decay)),
            ("shuffle_seed", self.shuffle_seed.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        self.kv_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Returns `Ok(false)` for keys that are not training fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "base_lr" => self.base_lr = parse_num(key, value)?,
            "lr_power" => self.lr_power = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "shuffle_seed" => self.shuffle_seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Reads a combined `key = value` file into model and training configs.
pub fn load_configs(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut m = ModelConfig::default();
    let mut t = TrainConfig::default();
    for (k, v) in parse_kv(text)? {
        if !m.set(&k, &v)? && !t.set(&k, &v)? {
            return Err(Error::Parse(format!("unknown config key `{k}`")));
        }
    }
    Ok((m, t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub task: f64,
    pub align: f64,
    pub total: f64,
    /// mIoU of the training-mode predictions seen during the epoch.
    pub train_miou: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,step,lr,L_task,L_align,L_total,train_mIoU";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            self.epoch, self.step, self.lr, self.task, self.align, self.total, self.train_miou
        )
    }
}

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(s, "{}", l.csv_row());
    }
    s
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let (params, _) = init_params(model_cfg, model_cfg.seed)?;
        let optimizer = AdamW::new(&params, train_cfg.weight_decay);
        Ok(Self {
            model_cfg: model_cfg.clone(),
            train_cfg: train_cfg.clone(),
            params,
            optimizer,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(train_cfg.shuffle_seed),
        })
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.train_cfg.epochs * n_train.div_ceil(self.train_cfg.batch_size)
    }

    /// Runs one epoch and returns its log row.
    pub fn run_epoch(&mut self, model: &Model, scenes: &[Scene], vocab: &Vocab) -> Result<EpochLog> {
        if scenes.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let tc = &self.train_cfg;
        let t_max = self.total_steps(scenes.len());
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut task_sum, mut align_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut preds = Vec::with_capacity(scenes.len());
        let mut gts = Vec::with_capacity(scenes.len());
        let mut lr = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let picked: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let batch = Batch::from_scenes(&picked, vocab, self.model_cfg.max_tokens)?;
            let mut g = Graph::new();
            let out = forward_pipeline(&mut g, &self.params, model, &batch, NormMode::Train)?;
            let losses = compute_losses(&mut g, &self.params, &self.model_cfg, &out, &batch.gts)?;
            let (task, align, total) =
                (g.value(losses.task).item(), g.value(losses.align).item(), g.value(losses.total).item());
            if !(task.is_finite() && align.is_finite() && total.is_finite()) {
                let ids: Vec<String> = picked.iter().map(|s| format!("{}:{:?}", s.id, s.expression)).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} step {} (task {task}, align {align}, total {total}); batch [{}]",
                    self.epoch + 1,
                    self.optimizer.step,
                    ids.join(", ")
                )));
            }
            let n = picked.len() as f64;
            task_sum += task * n;
            align_sum += align * n;
            total_sum += total * n;
            let s2 = self.model_cfg.image_size * self.model_cfg.image_size;
            for (logits, gt) in g.value(out.logits).data().chunks(s2).zip(&batch.gts) {
                preds.push(logits.iter().map(|&l| l > 0.0).collect::<Vec<bool>>());
                gts.push(gt.clone());
            }

            let grads = g.backward(losses.total).into_param_map();
            lr = poly_lr(tc.base_lr, self.optimizer.step as usize, t_max, tc.lr_power);
            self.optimizer.update(&mut self.params, &grads, lr)?;
            for stats in g.batch_stats() {
                update_running(&mut self.params, &stats.name, "running_mean", &stats.mean)?;
                update_running(&mut self.params, &stats.name, "running_var", &stats.var)?;
            }
        }
        self.epoch += 1;
        let count = scenes.len() as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            step: self.optimizer.step,
            lr,
            task: task_sum / count,
            align: align_sum / count,
            total: total_sum / count,
            train_miou: evaluate(&preds, &gts)?.miou,
        })
    }
}

fn update_running(params: &mut ModelParams, name: &str, which: &str, batch: &[f64]) -> Result<()> {
    let path = format!("{name}.{which}");
    let buf = params
        .buffer_mut(&path)
        .ok_or_else(|| Error::Checkpoint(format!("missing buffer {path}")))?;
    for (r, b) in buf.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
    Ok(())
}

/// Trains from scratch for `train_cfg.epochs` epochs. `on_epoch` sees every
/// log row as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    scenes: &[Scene],
    vocab: &Vocab,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainState, Vec<EpochLog>)> {
    if scenes.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let model = Model::new(model_cfg)?;
    let mut state = TrainState::new(model_cfg, train_cfg)?;
    let mut logs = Vec::with_capacity(train_cfg.epochs);
    for _ in 0..train_cfg.epochs {
        let log = state.run_epoch(&model, scenes, vocab)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok((state, logs))
}

/// Evaluation-mode probabilities for every scene, in input order.
pub fn predict_scenes(params: &ModelParams, model: &Model, scenes: &[Scene], vocab: &Vocab, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let batch = Batch::from_scenes(&refs, vocab, model.cfg.max_tokens)?;
        out.extend(predict_probabilities(params, model, &batch)?);
    }
    Ok(out)
}

/// Full report (metrics plus a 101-point PR curve) over `scenes`.
pub fn evaluate_scenes(params: &ModelParams, model: &Model, scenes: &[Scene], vocab: &Vocab, batch_size: usize) -> Result<EvalReport> {
    let probs = predict_scenes(params, model, scenes, vocab, batch_size)?;
    let gts: Vec<Vec<bool>> = scenes.iter().map(|s| s.gt_mask.clone()).collect();
    evaluate_probabilities(&probs, &gts, 101)
}

//! Full forward pass wiring both encoders, the alignment heads and the decoder.

use crate::alignment::{
    auxiliary_stage_loss, downsample_labels, project_features, stage_alignment_loss, total_alignment_loss,
    AlignmentHead, PixelLabelMap, SampleEmbeddings, StageEmbedding, StageLoss,
};
use crate::config::{AlignMode, ModelConfig};
use crate::decoder::{decode, task_loss, total_loss, NormMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::language::{cls_rows, embed_tokens, language_stage_forward, LanguageStage, TokenEmbedding};
use crate::params::ModelParams;
use crate::synthdata::{tokenize, Scene, Vocab};
use crate::vision::{patch_embed, vision_stage_forward, ImageTensor, LangContext, PatchEmbed, VisionStage};

/// Layer inventory derived from a config; cheap to build, reused across steps.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub patch: PatchEmbed,
    pub tokens: TokenEmbedding,
    pub vision: Vec<VisionStage>,
    pub language: Vec<LanguageStage>,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch: PatchEmbed::new(cfg),
            tokens: TokenEmbedding::new(cfg),
            vision: cfg.stages().map(|i| VisionStage::new(cfg, i)).collect::<Result<_>>()?,
            language: cfg.stages().map(|i| LanguageStage::new(cfg, i)).collect::<Result<_>>()?,
        })
    }
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<ImageTensor>,
    /// `batch * max_tokens` ids, sample-major.
    pub token_ids: Vec<usize>,
    /// `true` marks `[PAD]`.
    pub padding: Vec<bool>,
    pub gts: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_scenes(scenes: &[&Scene], vocab: &Vocab, max_tokens: usize) -> Result<Self> {
        let mut b = Batch { images: Vec::new(), token_ids: Vec::new(), padding: Vec::new(), gts: Vec::new() };
        for s in scenes {
            let t = tokenize(vocab, &s.expression, max_tokens)?;
            b.images.push(s.image());
            b.token_ids.extend(t.ids);
            b.padding.extend(t.padding);
            b.gts.push(s.gt_mask.clone());
        }
        Ok(b)
    }
}

/// Per-stage intermediate features, all stacked over the batch.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub stage: usize,
    pub side: usize,
    /// Vision features before fusion.
    pub v: Var,
    /// Language features of this stage.
    pub l: Var,
    /// Row 0 of every sample's `l`.
    pub cls: Var,
    pub m_hat: Var,
    pub m: Var,
    /// Input of the next vision stage; `None` on the last stage.
    pub f_v: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub batch: usize,
    /// `(batch*S*S, 1)` mask logits.
    pub logits: Var,
    pub stages: Vec<StageFeatures>,
}

/// Runs both encoders and the decoder. Language stage 1 runs first; vision
/// stage `i` fuses `L_i`; language stage `i+1` fuses `F_V` of stage `i`.
pub fn forward_pipeline(g: &mut Graph, params: &ModelParams, model: &Model, batch: &Batch, mode: NormMode) -> Result<ForwardOutput> {
    let cfg = &model.cfg;
    let b = batch.len();
    if b == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    if batch.token_ids.len() != b * cfg.max_tokens || batch.padding.len() != batch.token_ids.len() {
        return Err(Error::Shape(format!(
            "batch of {b} needs {} token ids and padding flags",
            b * cfg.max_tokens
        )));
    }
    let pad = batch.padding.as_slice();
    let cls_idx = cls_rows(b, cfg.max_tokens);

    let mut x = patch_embed(g, params, &model.patch, &batch.images)?;
    let l0 = embed_tokens(g, params, &model.tokens, &batch.token_ids)?;
    let mut l = language_stage_forward(g, params, &model.language[0], l0, None, pad, b)?;
    let mut stages = Vec::with_capacity(cfg.num_stages);
    for (i, vstage) in model.vision.iter().enumerate() {
        let out = vision_stage_forward(g, params, vstage, x, Some(LangContext { features: l, padding: pad }), b)?;
        let cls = g.select_rows(l, &cls_idx);
        stages.push(StageFeatures {
            stage: i + 1,
            side: out.side,
            v: out.v,
            l,
            cls,
            m_hat: out.m_hat,
            m: out.m,
            f_v: out.f_v,
        });
        if let Some(next) = model.language.get(i + 1) {
            let f_v = out.f_v.ok_or_else(|| Error::Shape(format!("vision stage {} produced no downsampled output", i + 1)))?;
            l = language_stage_forward(g, params, next, l, Some(f_v), pad, b)?;
            x = f_v;
        }
    }
    let m_hats: Vec<Var> = stages.iter().map(|s| s.m_hat).collect();
    let logits = decode(g, params, cfg, &m_hats, b, mode)?;
    Ok(ForwardOutput { batch: b, logits, stages })
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub task: Var,
    /// Pooled alignment (or auxiliary) loss; exact zero when no stage is enabled.
    pub align: Var,
    pub align_empty: bool,
    pub stage_align: Vec<(usize, Var)>,
    pub total: Var,
}

/// Label maps for every sample at every stage resolution; `out[s][b]`.
pub fn stage_labels(cfg: &ModelConfig, gts: &[Vec<bool>]) -> Result<Vec<Vec<PixelLabelMap>>> {
    let sides: Vec<usize> = cfg.stages().map(|i| cfg.stage_side(i)).collect();
    let mut per_stage = vec![Vec::with_capacity(gts.len()); sides.len()];
    for gt in gts {
        for (s, map) in downsample_labels(gt, cfg.image_size, &sides)?.into_iter().enumerate() {
            per_stage[s].push(map);
        }
    }
    Ok(per_stage)
}

/// Task, alignment and total losses. Alignment reads the pre-fusion `V_i`
/// and `CLS_i` of each enabled stage.
pub fn compute_losses(g: &mut Graph, params: &ModelParams, cfg: &ModelConfig, out: &ForwardOutput, gts: &[Vec<bool>]) -> Result<LossReport> {
    if gts.len() != out.batch {
        return Err(Error::Shape(format!("{} masks for a batch of {}", gts.len(), out.batch)));
    }
    let flat: Vec<bool> = gts.iter().flatten().copied().collect();
    let task = task_loss(g, out.logits, &flat)?;
    let labels = stage_labels(cfg, gts)?;
    let mut stage_losses = Vec::new();
    for st in &out.stages {
        if !cfg.align_enabled(st.stage) {
            continue;
        }
        let maps = &labels[st.stage - 1];
        let loss = match cfg.align_mode {
            AlignMode::Alignment => {
                let (zv, zl) = project_features(g, params, cfg, st.stage, st.v, st.cls)?;
                let log_tau = g.param(params, &AlignmentHead::new(cfg, st.stage).log_tau_path());
                stage_alignment_loss(g, zv, zl, maps, log_tau)?
            }
            AlignMode::Auxiliary => auxiliary_stage_loss(g, params, st.stage, st.v, maps)?,
        };
        stage_losses.push(StageLoss { stage: st.stage, loss, pixels: st.side * st.side });
    }
    let (align, align_empty) = total_alignment_loss(g, &stage_losses, cfg.align_norm);
    let total = total_loss(g, task, align, cfg.lambda_align);
    Ok(LossReport {
        task,
        align,
        align_empty,
        stage_align: stage_losses.iter().map(|s| (s.stage, s.loss)).collect(),
        total,
    })
}

/// Evaluation-mode prediction for a batch: per-sample sigmoid probabilities.
pub fn predict_probabilities(params: &ModelParams, model: &Model, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let out = forward_pipeline(&mut g, params, model, batch, NormMode::Eval)?;
    let s = model.cfg.image_size;
    Ok(g.value(out.logits)
        .data()
        .chunks(s * s)
        .map(|c| c.iter().map(|&l| crate::graph::sigmoid(l)).collect())
        .collect())
}

/// Evaluation-mode alignment embeddings of every enabled alignment stage.
/// `sample_ids` label the batch rows in order.
pub fn stage_embeddings(params: &ModelParams, model: &Model, batch: &Batch, sample_ids: &[usize]) -> Result<Vec<SampleEmbeddings>> {
    let cfg = &model.cfg;
    if cfg.align_mode != AlignMode::Alignment || cfg.align_stages.is_empty() {
        return Err(Error::Usage("embedding export needs alignment heads (align_mode = alignment, non-empty align_stages)".into()));
    }
    if sample_ids.len() != batch.len() {
        return Err(Error::Shape(format!("{} sample ids for a batch of {}", sample_ids.len(), batch.len())));
    }
    let mut g = Graph::new();
    let out = forward_pipeline(&mut g, params, model, batch, NormMode::Eval)?;
    let labels = stage_labels(cfg, &batch.gts)?;
    let mut samples: Vec<SampleEmbeddings> =
        sample_ids.iter().map(|&id| SampleEmbeddings { sample_id: id, stages: Vec::new() }).collect();
    for st in &out.stages {
        if !cfg.align_enabled(st.stage) {
            continue;
        }
        let (zv, zl) = project_features(&mut g, params, cfg, st.stage, st.v, st.cls)?;
        let n = st.side * st.side;
        for (b, sample) in samples.iter_mut().enumerate() {
            sample.stages.push(StageEmbedding {
                stage: st.stage,
                zv: g.value(zv).slice_rows(b * n, (b + 1) * n),
                zl: g.value(zl).row(b).to_vec(),
                labels: labels[st.stage - 1][b].clone(),
            });
        }
    }
    Ok(samples)
}

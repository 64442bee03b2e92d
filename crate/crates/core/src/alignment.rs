//! Feature-based alignment: per-stage projections of `V_i` and `CLS_i` into a
//! shared space and the sigmoid text-to-pixel contrastive loss.

use std::io::{self, Write};

use crate::attention::linear;
use crate::config::{AlignMode, AlignNorm, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{linear_specs, Init, ModelParams, ParamSpec, INIT_TAU};
use crate::tensor::Mat;

/// Parameter paths of one stage's alignment head.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentHead {
    pub stage: usize,
    pub vision_dim: usize,
    pub lang_dim: usize,
    pub align_dim: usize,
}

impl AlignmentHead {
    pub fn new(cfg: &ModelConfig, stage: usize) -> Self {
        Self { stage, vision_dim: cfg.channels(stage), lang_dim: cfg.lang_dim, align_dim: cfg.align_dim }
    }

    pub fn prefix(&self) -> String {
        format!("align.stage{}", self.stage)
    }

    pub fn log_tau_path(&self) -> String {
        format!("{}.log_tau", self.prefix())
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let p = self.prefix();
        linear_specs(out, &format!("{p}.vision_proj"), self.vision_dim, self.align_dim);
        linear_specs(out, &format!("{p}.lang_proj"), self.lang_dim, self.align_dim);
        out.push(ParamSpec::new(self.log_tau_path(), 1, 1, Init::Const(INIT_TAU.ln())));
    }
}

/// Ground-truth relevance at one stage resolution. `positive[j]` is the
/// `Z+` membership of pixel `j`; everything else is in `Z-`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelLabelMap {
    pub side: usize,
    pub positive: Vec<bool>,
}

impl PixelLabelMap {
    pub fn positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn negatives(&self) -> usize {
        self.positive.len() - self.positives()
    }
}

/// Downsamples a full-resolution binary mask to each side in `sides`: a
/// cell is positive iff at least half of the pixels it covers are positive.
pub fn downsample_labels(gt: &[bool], size: usize, sides: &[usize]) -> Result<Vec<PixelLabelMap>> {
    if gt.len() != size * size {
        return Err(Error::Shape(format!("mask of side {size} needs {} pixels, got {}", size * size, gt.len())));
    }
    sides
        .iter()
        .map(|&side| {
            if side == 0 || size % side != 0 {
                return Err(Error::Shape(format!("label resolution {side} does not divide mask side {size}")));
            }
            let cell = size / side;
            let mut positive = Vec::with_capacity(side * side);
            for cy in 0..side {
                for cx in 0..side {
                    let mut count = 0;
                    for y in cy * cell..(cy + 1) * cell {
                        count += gt[y * size + cx * cell..y * size + (cx + 1) * cell].iter().filter(|&&p| p).count();
                    }
                    // count / cell^2 >= 1/2, in integers
                    positive.push(2 * count >= cell * cell);
                }
            }
            Ok(PixelLabelMap { side, positive })
        })
        .collect()
}

/// Projects `V_i` `(batch*H_i*W_i, C_i)` and `CLS_i` `(batch, D)` to the
/// shared alignment width. Plain affine maps; no normalization.
pub fn project_features(
    g: &mut Graph,
    params: &ModelParams,
    cfg: &ModelConfig,
    stage: usize,
    v: Var,
    cls: Var,
) -> Result<(Var, Var)> {
    if !cfg.align_enabled(stage) || cfg.align_mode != AlignMode::Alignment {
        return Err(Error::Usage(format!("alignment is not enabled at stage {stage}")));
    }
    let head = AlignmentHead::new(cfg, stage);
    if g.value(v).cols() != head.vision_dim || g.value(cls).cols() != head.lang_dim {
        return Err(Error::Shape(format!("alignment stage {stage}: unexpected feature widths")));
    }
    let p = head.prefix();
    let zv = linear(g, params, &format!("{p}.vision_proj"), v);
    let zl = linear(g, params, &format!("{p}.lang_proj"), cls);
    Ok((zv, zl))
}

/// Mean per-pixel sigmoid alignment loss for one stage. Per-pixel losses and
/// scaled similarities are retrievable through [`Graph::alignment_maps`].
pub fn stage_alignment_loss(
    g: &mut Graph,
    zv: Var,
    zl: Var,
    labels: &[PixelLabelMap],
    log_tau: Var,
) -> Result<Var> {
    let batch = labels.len();
    if batch == 0 || g.value(zl).rows() != batch {
        return Err(Error::Shape("one label map per sample is required".into()));
    }
    let flat: Vec<bool> = labels.iter().flat_map(|l| l.positive.iter().copied()).collect();
    if flat.len() != g.value(zv).rows() {
        return Err(Error::Shape(format!(
            "labels cover {} pixels but the similarity map has {}",
            flat.len(),
            g.value(zv).rows()
        )));
    }
    Ok(g.alignment_loss(zv, zl, log_tau, &flat, batch))
}

/// One enabled stage's contribution to `L_align`.
#[derive(Clone, Copy, Debug)]
pub struct StageLoss {
    pub stage: usize,
    pub loss: Var,
    /// Pixels per sample at this stage.
    pub pixels: usize,
}

/// Pools per-stage losses into `L_align`. Returns `(loss, empty)`; with no
/// enabled stage the loss is an exact constant zero and `empty` is set.
pub fn total_alignment_loss(g: &mut Graph, stages: &[StageLoss], norm: AlignNorm) -> (Var, bool) {
    if stages.is_empty() {
        return (g.constant(Mat::scalar(0.0)), true);
    }
    let total_pixels: usize = stages.iter().map(|s| s.pixels).sum();
    let mut acc: Option<Var> = None;
    for s in stages {
        let w = match norm {
            AlignNorm::PerStageMean => 1.0 / stages.len() as f64,
            AlignNorm::GlobalPixelMean => s.pixels as f64 / total_pixels as f64,
        };
        let term = if stages.len() == 1 { s.loss } else { g.scale(s.loss, w) };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    (acc.expect("non-empty"), false)
}

/// Auxiliary comparator: BCE of a 1x1 side head over `V_i` against the
/// stage-resolution labels.
pub fn auxiliary_stage_loss(
    g: &mut Graph,
    params: &ModelParams,
    stage: usize,
    v: Var,
    labels: &[PixelLabelMap],
) -> Result<Var> {
    let targets: Vec<f64> = labels
        .iter()
        .flat_map(|l| l.positive.iter().map(|&p| if p { 1.0 } else { 0.0 }))
        .collect();
    if targets.len() != g.value(v).rows() {
        return Err(Error::Shape(format!("auxiliary stage {stage}: label count mismatch")));
    }
    let logits = linear(g, params, &format!("aux.stage{stage}.head"), v);
    Ok(g.bce_with_logits(logits, &targets))
}

pub(crate) fn param_specs(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    for &stage in &cfg.align_stages {
        if stage == 0 || stage > cfg.num_stages || cfg.vision_channels.len() < stage {
            continue;
        }
        match cfg.align_mode {
            AlignMode::Alignment => AlignmentHead::new(cfg, stage).param_specs(out),
            AlignMode::Auxiliary => linear_specs(out, &format!("aux.stage{stage}.head"), cfg.channels(stage), 1),
        }
    }
}

/// Projected embeddings of one sample at one stage.
#[derive(Clone, Debug)]
pub struct StageEmbedding {
    pub stage: usize,
    /// `(H_i*W_i, D')`
    pub zv: Mat,
    /// `D'`
    pub zl: Vec<f64>,
    pub labels: PixelLabelMap,
}

#[derive(Clone, Debug)]
pub struct SampleEmbeddings {
    pub sample_id: usize,
    pub stages: Vec<StageEmbedding>,
}

/// Writes the tab-separated embedding dump: a header
/// `sample_id stage index label z0 .. z{dim-1}`, then one row per pixel
/// (`label` = `relevant`/`irrelevant`) and one `CLS` row per stage
/// (`label` = `language`).
pub fn export_embeddings<W: Write>(w: &mut W, dim: usize, samples: &[SampleEmbeddings]) -> io::Result<()> {
    write!(w, "sample_id\tstage\tindex\tlabel")?;
    for k in 0..dim {
        write!(w, "\tz{k}")?;
    }
    writeln!(w)?;
    for s in samples {
        for st in &s.stages {
            for j in 0..st.zv.rows() {
                let label = if st.labels.positive[j] { "relevant" } else { "irrelevant" };
                write!(w, "{}\t{}\t{}\t{}", s.sample_id, st.stage, j, label)?;
                write_coords(w, st.zv.row(j))?;
            }
            write!(w, "{}\t{}\tCLS\tlanguage", s.sample_id, st.stage)?;
            write_coords(w, &st.zl)?;
        }
    }
    Ok(())
}

fn write_coords<W: Write>(w: &mut W, coords: &[f64]) -> io::Result<()> {
    for c in coords {
        write!(w, "\t{c:?}")?;
    }
    writeln!(w)
}

//! Hierarchical vision encoder: patch embedding, per-stage self-attention
//! blocks, and the vision query fusion layer with its internal downsampler.

use crate::attention::{ffn, mhca, AttentionSpec, EncoderBlock, FfnSpec, NormPlacement};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{linear_specs, Init, ModelParams, ParamSpec};
use crate::tensor::Mat;

/// An RGB image as a `(3, size, size)` channel-major array with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub size: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * size * size {
            return Err(Error::Shape(format!("image of side {size} needs {} values, got {}", 3 * size * size, data.len())));
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0.0; 3 * size * size] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.size + y) * self.size + x]
    }
}

/// Non-overlapping patch projection plus a learned positional embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { image_size: cfg.image_size, patch_size: cfg.patch_size, channels: cfg.channels(1) }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        linear_specs(out, "vision.patch_embed", self.patch_dim(), self.channels);
        let n = self.grid() * self.grid();
        out.push(ParamSpec::new("vision.pos_embed", n, self.channels, Init::TruncNormal));
    }

    /// Flattens each image into `(grid*grid, 3*p*p)` patch rows: patches in
    /// row-major grid order, each patch laid out channel, row, column.
    pub fn patchify(&self, images: &[ImageTensor]) -> Result<Mat> {
        let (p, grid) = (self.patch_size, self.grid());
        let mut out = Mat::zeros(images.len() * grid * grid, self.patch_dim());
        for (b, img) in images.iter().enumerate() {
            if img.size != self.image_size || img.data.len() != 3 * img.size * img.size {
                return Err(Error::Shape(format!("expected a {0}x{0} image, got side {1}", self.image_size, img.size)));
            }
            for py in 0..grid {
                for px in 0..grid {
                    let row = out.row_mut((b * grid + py) * grid + px);
                    let mut k = 0;
                    for c in 0..3 {
                        for dy in 0..p {
                            for dx in 0..p {
                                row[k] = img.at(c, py * p + dy, px * p + dx);
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Projects image patches to `(batch*H_1*W_1, C_1)` and adds the positional embedding.
pub fn patch_embed(g: &mut Graph, params: &ModelParams, pe: &PatchEmbed, images: &[ImageTensor]) -> Result<Var> {
    let patches = g.constant(pe.patchify(images)?);
    let w = g.param(params, "vision.patch_embed.weight");
    let b = g.param(params, "vision.patch_embed.bias");
    let pos = g.param(params, "vision.pos_embed");
    let x = g.matmul(patches, w);
    let x = g.add_row(x, b);
    Ok(g.add_tiled(x, pos))
}

/// 2x2 patch merge: concatenates each cell's four neighbors (top-left,
/// top-right, bottom-left, bottom-right) and maps `4*C_in -> C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Downsample {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Downsample {
    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        linear_specs(out, &self.prefix, 4 * self.in_channels, self.out_channels);
    }

    pub fn forward(&self, g: &mut Graph, params: &ModelParams, x: Var, side: usize, batch: usize) -> Result<Var> {
        let merged = merge_neighbors(g, x, side, batch)?;
        Ok(crate::attention::linear(g, params, &self.prefix, merged))
    }
}

/// Gathers `(batch*side*side, C)` into `(batch*(side/2)^2, 4C)`.
pub fn merge_neighbors(g: &mut Graph, x: Var, side: usize, batch: usize) -> Result<Var> {
    let c = g.value(x).cols();
    if g.value(x).rows() != batch * side * side {
        return Err(Error::Shape(format!("patch merge expects {} rows, got {}", batch * side * side, g.value(x).rows())));
    }
    if side % 2 != 0 {
        return Err(Error::Shape(format!("patch merge needs an even side, got {side}")));
    }
    let half = side / 2;
    let mut index = Vec::with_capacity(batch * half * half * 4 * c);
    for b in 0..batch {
        for y in 0..half {
            for xx in 0..half {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = (b * side + 2 * y + dy) * side + 2 * xx + dx;
                    index.extend((0..c).map(|k| (src * c + k) as u32));
                }
            }
        }
    }
    Ok(g.gather(x, index, batch * half * half, 4 * c))
}

/// Sublayers of the vision query fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionFusion {
    pub attn1: AttentionSpec,
    pub ffn1: FfnSpec,
    /// Present on every stage but the last.
    pub attn2: Option<AttentionSpec>,
    pub ffn2: Option<FfnSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionStage {
    /// 1-based stage index.
    pub index: usize,
    pub side: usize,
    pub channels: usize,
    pub blocks: Vec<EncoderBlock>,
    pub fusion: Option<VisionFusion>,
    pub down: Option<Downsample>,
}

impl VisionStage {
    pub fn new(cfg: &ModelConfig, index: usize) -> Result<Self> {
        let c = cfg.channels(index);
        let heads = cfg.vision_heads[index - 1];
        let last = index == cfg.num_stages;
        let prefix = format!("vision.stage{index}");
        let blocks = (0..cfg.vision_depths[index - 1])
            .map(|j| EncoderBlock::new(&format!("{prefix}.block{j}"), c, heads, c * cfg.ffn_ratio, NormPlacement::Pre))
            .collect::<Result<Vec<_>>>()?;
        let down = (!last).then(|| Downsample {
            prefix: format!("{prefix}.down"),
            in_channels: c,
            out_channels: cfg.channels(index + 1),
        });
        let fusion = if cfg.fusion_enabled(index) {
            let fp = format!("{prefix}.fusion");
            let (attn2, ffn2) = match &down {
                Some(d) => {
                    let c2 = d.out_channels;
                    (
                        Some(AttentionSpec::new(format!("{fp}.attn2"), c2, cfg.lang_dim, heads)?),
                        Some(FfnSpec::new(format!("{fp}.ffn2"), c2, c2 * cfg.ffn_ratio)?),
                    )
                }
                None => (None, None),
            };
            Some(VisionFusion {
                attn1: AttentionSpec::new(format!("{fp}.attn1"), c, cfg.lang_dim, heads)?,
                ffn1: FfnSpec::new(format!("{fp}.ffn1"), c, c * cfg.ffn_ratio)?,
                attn2,
                ffn2,
            })
        } else {
            None
        };
        Ok(Self { index, side: cfg.stage_side(index), channels: c, blocks, fusion, down })
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for b in &self.blocks {
            b.param_specs(out);
        }
        if let Some(f) = &self.fusion {
            f.attn1.param_specs(out);
            f.ffn1.param_specs(out);
            if let (Some(a), Some(ff)) = (&f.attn2, &f.ffn2) {
                a.param_specs(out);
                ff.param_specs(out);
            }
        }
        if let Some(d) = &self.down {
            d.param_specs(out);
        }
    }
}

/// Language features visible to a vision fusion layer.
#[derive(Clone, Copy, Debug)]
pub struct LangContext<'a> {
    /// `(batch*T, D)` language features of the current stage.
    pub features: Var,
    /// `true` marks `[PAD]` positions, which are masked as keys.
    pub padding: &'a [bool],
}

#[derive(Clone, Copy, Debug)]
pub struct VisionStageOutput {
    /// Output of the self-attention blocks, before fusion.
    pub v: Var,
    /// `mhca(V, L) + V`; feeds the decoder.
    pub m_hat: Var,
    /// `ffn(M_hat) + V`.
    pub m: Var,
    /// Downsampled language-aware features for the next stage; `None` at the last stage.
    pub f_v: Option<Var>,
    pub side: usize,
}

/// Runs stage `stage` on `x_in` of shape `(batch*H_i*W_i, C_i)`.
///
/// With fusion enabled the layer follows the literal residual chain
/// `M_hat = mhca(V, L) + V`, `M = ffn(M_hat) + V`, then on non-final stages
/// `D = Down(M)`, `F_hat = mhca(D, L) + D`, `F_V = ffn(F_hat) + D`. With fusion
/// disabled `M_hat = M = V` and `F_V = Down(V)`.
pub fn vision_stage_forward(
    g: &mut Graph,
    params: &ModelParams,
    stage: &VisionStage,
    x_in: Var,
    lang: Option<LangContext<'_>>,
    batch: usize,
) -> Result<VisionStageOutput> {
    let expect_rows = batch * stage.side * stage.side;
    let xv = g.value(x_in);
    if xv.rows() != expect_rows || xv.cols() != stage.channels {
        return Err(Error::Shape(format!(
            "vision stage {} expects ({expect_rows}, {}), got ({}, {})",
            stage.index,
            stage.channels,
            xv.rows(),
            xv.cols()
        )));
    }
    let mut v = x_in;
    for block in &stage.blocks {
        v = block.forward(g, params, v, None, batch)?;
    }
    let Some(fusion) = &stage.fusion else {
        let f_v = match &stage.down {
            Some(d) => Some(d.forward(g, params, v, stage.side, batch)?),
            None => None,
        };
        return Ok(VisionStageOutput { v, m_hat: v, m: v, f_v, side: stage.side });
    };
    let lang = lang.ok_or_else(|| {
        Error::Usage(format!("vision stage {} has fusion enabled but no language features were given", stage.index))
    })?;
    let a = mhca(g, params, &fusion.attn1, v, lang.features, Some(lang.padding), batch)?;
    let m_hat = g.add(a, v);
    let f = ffn(g, params, &fusion.ffn1, m_hat)?;
    let m = g.add(f, v);
    let f_v = match (&stage.down, &fusion.attn2, &fusion.ffn2) {
        (Some(down), Some(attn2), Some(ffn2)) => {
            let d = down.forward(g, params, m, stage.side, batch)?;
            let a2 = mhca(g, params, attn2, d, lang.features, Some(lang.padding), batch)?;
            let f_hat = g.add(a2, d);
            let f2 = ffn(g, params, ffn2, f_hat)?;
            Some(g.add(f2, d))
        }
        _ => None,
    };
    Ok(VisionStageOutput { v, m_hat, m, f_v, side: stage.side })
}

pub(crate) fn param_specs(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    PatchEmbed::new(cfg).param_specs(out);
    for i in cfg.stages() {
        // Only reachable with a validated config, so construction cannot fail.
        if let Ok(stage) = VisionStage::new(cfg, i) {
            stage.param_specs(out);
        }
    }
}

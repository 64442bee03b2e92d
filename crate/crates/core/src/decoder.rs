//! Segmentation decoder: three upsample-concatenate-convolve blocks over the
//! fused stage features, a 1x1 mask head, and the task/total losses.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var, GATHER_ZERO};
use crate::params::{norm_specs, Init, ModelParams, ParamSpec};

/// Whether normalization layers use batch statistics or frozen estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Momentum of the running normalization estimates.
pub const BN_MOMENTUM: f64 = 0.1;

/// `(3x3 conv, batch norm, ReLU) x 2` at constant spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DecoderBlock {
    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for k in 1..=2 {
            let cin = if k == 1 { self.in_channels } else { self.out_channels };
            conv_specs(out, &format!("{}.conv{k}", self.prefix), 9 * cin, self.out_channels, (2.0 / (9 * cin) as f64).sqrt());
            norm_specs(out, &format!("{}.bn{k}", self.prefix), self.out_channels);
        }
    }

    pub fn buffer_specs(&self, out: &mut Vec<ParamSpec>) {
        for k in 1..=2 {
            out.push(ParamSpec::new(format!("{}.bn{k}.running_mean", self.prefix), 1, self.out_channels, Init::Zeros));
            out.push(ParamSpec::new(format!("{}.bn{k}.running_var", self.prefix), 1, self.out_channels, Init::Ones));
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ModelParams, x: Var, side: usize, batch: usize, mode: NormMode) -> Result<Var> {
        let mut h = x;
        for k in 1..=2 {
            let conv = format!("{}.conv{k}", self.prefix);
            h = conv3x3(g, params, &conv, h, side, batch)?;
            let bn = format!("{}.bn{k}", self.prefix);
            let gamma = g.param(params, &format!("{bn}.gamma"));
            let beta = g.param(params, &format!("{bn}.beta"));
            h = match mode {
                NormMode::Train => g.batch_norm(&bn, h, gamma, beta, None),
                NormMode::Eval => {
                    let rm = params.buffer(&format!("{bn}.running_mean"));
                    let rv = params.buffer(&format!("{bn}.running_var"));
                    let (Some(rm), Some(rv)) = (rm, rv) else {
                        return Err(Error::Usage(format!("missing running statistics for {bn}")));
                    };
                    g.batch_norm(&bn, h, gamma, beta, Some((rm.data(), rv.data())))
                }
            };
            h = g.relu(h);
        }
        Ok(h)
    }
}

/// Same-padded 3x3 convolution over `(batch*side*side, C_in)`; weight rows
/// are ordered kernel row, kernel column, input channel.
pub fn conv3x3(g: &mut Graph, params: &ModelParams, prefix: &str, x: Var, side: usize, batch: usize) -> Result<Var> {
    let c = g.value(x).cols();
    if g.value(x).rows() != batch * side * side {
        return Err(Error::Shape(format!("{prefix}: expected {} rows, got {}", batch * side * side, g.value(x).rows())));
    }
    let mut index = Vec::with_capacity(batch * side * side * 9 * c);
    for b in 0..batch {
        for y in 0..side as isize {
            for xx in 0..side as isize {
                for ky in -1..=1isize {
                    for kx in -1..=1isize {
                        let (sy, sx) = (y + ky, xx + kx);
                        if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize {
                            index.extend(std::iter::repeat_n(GATHER_ZERO, c));
                        } else {
                            let src = (b * side + sy as usize) * side + sx as usize;
                            index.extend((0..c).map(|k| (src * c + k) as u32));
                        }
                    }
                }
            }
        }
    }
    let cols = g.gather(x, index, batch * side * side, 9 * c);
    Ok(crate::attention::linear(g, params, prefix, cols))
}

/// Bilinear resampling taps (half-pixel centers, edge clamped) for a 1-D
/// resize from `n_in` to `n_in * factor`.
fn linear_taps(n_in: usize, factor: usize) -> Vec<[(usize, f64); 2]> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            [(i0, 1.0 - w1), (i1, w1)]
        })
        .collect()
}

/// Bilinear upsampling of `(batch*side*side, C)` by an integer factor.
pub fn upsample_bilinear(g: &mut Graph, x: Var, side: usize, factor: usize, batch: usize) -> Result<Var> {
    if g.value(x).rows() != batch * side * side {
        return Err(Error::Shape(format!("upsample expects {} rows, got {}", batch * side * side, g.value(x).rows())));
    }
    let taps = linear_taps(side, factor);
    let out_side = side * factor;
    let mut mix = Vec::with_capacity(batch * out_side * out_side * 4);
    for b in 0..batch {
        for (oy, ty) in taps.iter().enumerate() {
            for (ox, tx) in taps.iter().enumerate() {
                let o = ((b * out_side + oy) * out_side + ox) as u32;
                for &(iy, wy) in ty {
                    for &(ix, wx) in tx {
                        let w = wy * wx;
                        if w != 0.0 {
                            mix.push((o, ((b * side + iy) * side + ix) as u32, w));
                        }
                    }
                }
            }
        }
    }
    Ok(g.spatial_mix(x, mix, batch * out_side * out_side))
}

/// Per-pixel mask logits at full image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub size: usize,
    pub logits: Vec<f64>,
}

impl MaskLogits {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    /// Splits a stacked `(batch*size*size, 1)` logit column into samples.
    pub fn split(values: &[f64], size: usize) -> Vec<MaskLogits> {
        values.chunks(size * size).map(|c| MaskLogits { size, logits: c.to_vec() }).collect()
    }
}

/// Block `b` (1-based) consumes the upsampled previous features concatenated
/// with `M_hat` of stage `num_stages - b`.
pub fn decoder_blocks(cfg: &ModelConfig) -> Vec<DecoderBlock> {
    let n = cfg.num_stages;
    let mut prev = cfg.channels(n);
    (1..n)
        .map(|b| {
            let skip = cfg.channels(n - b);
            let out = cfg.decoder_channels[b - 1];
            let blk = DecoderBlock { prefix: format!("decoder.block{b}"), in_channels: prev + skip, out_channels: out };
            prev = out;
            blk
        })
        .collect()
}

/// Decodes the fused per-stage features `m_hats[i] = M_hat_{i+1}` into mask
/// logits `(batch*S*S, 1)` at the input image resolution.
pub fn decode(
    g: &mut Graph,
    params: &ModelParams,
    cfg: &ModelConfig,
    m_hats: &[Var],
    batch: usize,
    mode: NormMode,
) -> Result<Var> {
    let n = cfg.num_stages;
    if m_hats.len() != n {
        return Err(Error::Shape(format!("decoder needs {n} skip features, got {}", m_hats.len())));
    }
    for (i, &m) in m_hats.iter().enumerate() {
        let stage = i + 1;
        let want = (batch * cfg.stage_positions(stage), cfg.channels(stage));
        if g.value(m).shape() != want {
            return Err(Error::Shape(format!("skip feature for stage {stage}: expected {want:?}, got {:?}", g.value(m).shape())));
        }
    }
    let mut x = m_hats[n - 1];
    let mut side = cfg.stage_side(n);
    for (b, block) in decoder_blocks(cfg).iter().enumerate() {
        x = upsample_bilinear(g, x, side, 2, batch)?;
        side *= 2;
        x = g.concat_cols(x, m_hats[n - 2 - b]);
        x = block.forward(g, params, x, side, batch, mode)?;
    }
    let logits = crate::attention::linear(g, params, "decoder.head", x);
    upsample_bilinear(g, logits, side, cfg.patch_size, batch)
}

/// Mean binary cross-entropy between mask logits and a binary ground truth.
pub fn task_loss(g: &mut Graph, logits: Var, gt: &[bool]) -> Result<Var> {
    if g.value(logits).len() != gt.len() {
        return Err(Error::Shape(format!("{} logits vs {} ground-truth pixels", g.value(logits).len(), gt.len())));
    }
    let targets: Vec<f64> = gt.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    Ok(g.bce_with_logits(logits, &targets))
}

/// `L_task + lambda * L_align`.
pub fn total_loss(g: &mut Graph, task: Var, align: Var, lambda: f64) -> Var {
    let scaled = g.scale(align, lambda);
    g.add(task, scaled)
}

/// `sigmoid(logit) > threshold`; no post-processing.
pub fn predict_mask(logits: &[f64], threshold: f64) -> Vec<bool> {
    logits.iter().map(|&l| sigmoid(l) > threshold).collect()
}

/// Convolution weights use fan-in scaled init rather than the small
/// transformer std: with 0.02 the mask head's weights all turn negative within
/// a few dozen steps (background dominates the early gradient) and every
/// ReLU channel then trains as a background detector, capping logits below 0.
fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, d_out: usize, std: f64) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), fan_in, d_out, Init::ScaledNormal(std)));
    out.push(ParamSpec::new(format!("{prefix}.bias"), 1, d_out, Init::Zeros));
}

pub(crate) fn param_specs(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    if cfg.vision_channels.len() != cfg.num_stages || cfg.decoder_channels.len() + 1 != cfg.num_stages {
        return;
    }
    let blocks = decoder_blocks(cfg);
    for b in &blocks {
        b.param_specs(out);
    }
    let last = blocks.last().map_or(cfg.channels(cfg.num_stages), |b| b.out_channels);
    conv_specs(out, "decoder.head", last, 1, 1.0 / (last as f64).sqrt());
}

pub(crate) fn buffer_specs(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    if cfg.vision_channels.len() != cfg.num_stages || cfg.decoder_channels.len() + 1 != cfg.num_stages {
        return;
    }
    for b in decoder_blocks(cfg) {
        b.buffer_specs(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;

    #[test]
    fn default_block_channels() {
        let blocks = decoder_blocks(&ModelConfig::default());
        let ins: Vec<_> = blocks.iter().map(|b| b.in_channels).collect();
        assert_eq!(ins, vec![256 + 128, 128 + 64, 64 + 32]);
    }

    #[test]
    fn upsampling_a_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Mat::filled(2 * 9, 2, 0.375));
        let y = upsample_bilinear(&mut g, x, 3, 2, 2).unwrap();
        assert_eq!(g.value(y).rows(), 2 * 36);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
    }

    #[test]
    fn upsampling_interpolates_between_centers() {
        // Half-pixel sampling of [0, 1] at factor 2: 0, .25, .75, 1.
        let taps = linear_taps(2, 2);
        let vals: Vec<f64> = taps.iter().map(|t| t[0].1 * t[0].0 as f64 + t[1].1 * t[1].0 as f64).collect();
        assert_eq!(vals, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn strict_threshold() {
        assert_eq!(predict_mask(&[0.0, 0.0], 0.5), vec![false, false]);
        assert_eq!(predict_mask(&[0.0, -3.0], 0.0), vec![true, true]);
        assert_eq!(predict_mask(&[-1.0, 2.0, -1.0], 0.5), vec![false, true, false]);
    }

    #[test]
    fn worked_bce_value() {
        let mut g = Graph::new();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let x = g.constant(Mat::from_vec(2, 1, vec![logit(0.8), logit(0.3)]));
        let l = task_loss(&mut g, x, &[true, false]).unwrap();
        // -(ln 0.8 + ln 0.7) / 2
        assert!((g.value(l).item() - 0.289_909_247_626_471_1).abs() < 1e-12);
    }

    #[test]
    fn zero_logits_cost_ln2() {
        let mut g = Graph::new();
        let x = g.constant(Mat::zeros(9, 1));
        let l = task_loss(&mut g, x, &[true, false, true, true, false, false, true, false, true]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_prediction_hits_clamp() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_vec(2, 1, vec![50.0, -50.0]));
        let l = task_loss(&mut g, x, &[true, false]).unwrap();
        assert!((g.value(l).item() - -(1.0f64 - 1e-7).ln()).abs() < 1e-18);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let t = g.constant(Mat::scalar(0.5));
        let a = g.constant(Mat::scalar(0.7));
        let l = total_loss(&mut g, t, a, 0.1);
        assert!((g.value(l).item() - 0.57).abs() < 1e-15);
        let l0 = total_loss(&mut g, t, a, 0.0);
        assert_eq!(g.value(l0).item(), 0.5);
    }

    #[test]
    fn mismatched_gt_is_shape_error() {
        let mut g = Graph::new();
        let x = g.constant(Mat::zeros(4, 1));
        assert!(matches!(task_loss(&mut g, x, &[true; 3]), Err(Error::Shape(_))));
    }
}

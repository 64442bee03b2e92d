//! Stage-divided language encoder: token embeddings, post-norm self-attention
//! layers, and the language query fusion layer opening stages 2..n.

use crate::attention::{ffn, mhca, AttentionSpec, EncoderBlock, FfnSpec, NormPlacement};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ModelParams, ParamSpec};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;

/// Token table `(vocab_size, D)` and learned positions `(max_tokens, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbedding {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub dim: usize,
}

impl TokenEmbedding {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { vocab_size: cfg.vocab_size, max_tokens: cfg.max_tokens, dim: cfg.lang_dim }
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new("language.token_embed", self.vocab_size, self.dim, Init::TruncNormal));
        out.push(ParamSpec::new("language.pos_embed", self.max_tokens, self.dim, Init::TruncNormal));
    }
}

/// Looks up `ids` (a stacked batch of `max_tokens`-long sequences) and adds
/// positional embeddings. Returns `(batch*T, D)`.
pub fn embed_tokens(g: &mut Graph, params: &ModelParams, emb: &TokenEmbedding, ids: &[usize]) -> Result<Var> {
    let t = emb.max_tokens;
    if ids.is_empty() || ids.len() % t != 0 {
        return Err(Error::Shape(format!("token ids length {} is not a multiple of max_tokens {t}", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= emb.vocab_size) {
        return Err(Error::Data(format!("token id {bad} out of vocabulary (size {})", emb.vocab_size)));
    }
    let table = g.param(params, "language.token_embed");
    let x = g.select_rows(table, ids);
    let pos = g.param(params, "language.pos_embed");
    Ok(g.add_tiled(x, pos))
}

/// Cross-attention sublayers of a language query fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageFusion {
    pub attn: AttentionSpec,
    pub ffn: FfnSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageStage {
    /// 1-based stage index.
    pub index: usize,
    pub dim: usize,
    /// Opening cross-attention layer; `None` on stage 1 and wherever fusion
    /// into language is switched off.
    pub fusion: Option<LanguageFusion>,
    pub layers: Vec<EncoderBlock>,
}

impl LanguageStage {
    pub fn new(cfg: &ModelConfig, index: usize) -> Result<Self> {
        let d = cfg.lang_dim;
        let depth = cfg.lang_depths[index - 1];
        let prefix = format!("language.stage{index}");
        // Stages 2..n reserve their first layer for cross-attention whether or
        // not it is active, so depth bookkeeping is identical across ablations.
        let self_layers = if index == 1 { depth } else { depth.saturating_sub(1) };
        let layers = (0..self_layers)
            .map(|j| EncoderBlock::new(&format!("{prefix}.layer{j}"), d, cfg.lang_heads, d * cfg.ffn_ratio, NormPlacement::Post))
            .collect::<Result<Vec<_>>>()?;
        let fusion = if cfg.lang_cross_enabled(index) {
            Some(LanguageFusion {
                attn: AttentionSpec::new(format!("{prefix}.fusion.attn"), d, cfg.channels(index), cfg.lang_heads)?,
                ffn: FfnSpec::new(format!("{prefix}.fusion.ffn"), d, d * cfg.ffn_ratio)?,
            })
        } else {
            None
        };
        Ok(Self { index, dim: d, fusion, layers })
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        if let Some(f) = &self.fusion {
            f.attn.param_specs(out);
            f.ffn.param_specs(out);
        }
        for l in &self.layers {
            l.param_specs(out);
        }
    }
}

/// Runs language stage `stage`.
///
/// With an active fusion layer: `F_hat = mhca(L_prev, F_V) + L_prev`,
/// `F_L = ffn(F_hat) + F_hat`, followed by the stage's self-attention layers.
/// Vision keys are never masked; `padding` masks `[PAD]` keys in the
/// self-attention layers.
pub fn language_stage_forward(
    g: &mut Graph,
    params: &ModelParams,
    stage: &LanguageStage,
    l_prev: Var,
    f_v_prev: Option<Var>,
    padding: &[bool],
    batch: usize,
) -> Result<Var> {
    let lv = g.value(l_prev);
    if lv.cols() != stage.dim || lv.rows() != padding.len() {
        return Err(Error::Shape(format!(
            "language stage {} expects ({}, {}), got ({}, {})",
            stage.index,
            padding.len(),
            stage.dim,
            lv.rows(),
            lv.cols()
        )));
    }
    let mut x = l_prev;
    if let Some(fusion) = &stage.fusion {
        let f_v = f_v_prev.ok_or_else(|| {
            Error::Usage(format!("language stage {} fuses vision features but none were given", stage.index))
        })?;
        let a = mhca(g, params, &fusion.attn, x, f_v, None, batch)?;
        let f_hat = g.add(a, x);
        let f = ffn(g, params, &fusion.ffn, f_hat)?;
        x = g.add(f, f_hat);
    }
    for layer in &stage.layers {
        x = layer.forward(g, params, x, Some(padding), batch)?;
    }
    Ok(x)
}

/// Row indices of every sample's `[CLS]` token in a stacked `(batch*T, D)` matrix.
pub fn cls_rows(batch: usize, max_tokens: usize) -> Vec<usize> {
    (0..batch).map(|b| b * max_tokens).collect()
}

pub(crate) fn param_specs(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    TokenEmbedding::new(cfg).param_specs(out);
    for i in cfg.stages() {
        if let Ok(stage) = LanguageStage::new(cfg, i) {
            stage.param_specs(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_params;

    #[test]
    fn default_stage_two_inventory() {
        let cfg = ModelConfig::default();
        let s = LanguageStage::new(&cfg, 2).unwrap();
        assert!(s.fusion.is_some());
        assert_eq!(s.layers.len(), 0);
        let s1 = LanguageStage::new(&cfg, 1).unwrap();
        assert!(s1.fusion.is_none());
        assert_eq!(s1.layers.len(), 3);
    }

    #[test]
    fn vision_only_has_no_language_fusion() {
        let cfg = ModelConfig { fusion_direction: crate::config::FusionDirection::VisionOnly, ..Default::default() };
        for i in 1..=4 {
            assert!(LanguageStage::new(&cfg, i).unwrap().fusion.is_none());
        }
    }

    #[test]
    fn out_of_vocab_is_data_error() {
        let cfg = ModelConfig::default();
        let (params, _) = init_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let mut ids = vec![PAD_ID; cfg.max_tokens];
        ids[0] = CLS_ID;
        ids[1] = cfg.vocab_size;
        let err = embed_tokens(&mut g, &params, &TokenEmbedding::new(&cfg), &ids).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn embedding_row_is_word_plus_position() {
        let cfg = ModelConfig::default();
        let (params, _) = init_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let mut ids = vec![PAD_ID; cfg.max_tokens];
        ids[0] = CLS_ID;
        ids[1] = 5;
        let x = embed_tokens(&mut g, &params, &TokenEmbedding::new(&cfg), &ids).unwrap();
        let table = params.get("language.token_embed").unwrap();
        let pos = params.get("language.pos_embed").unwrap();
        let expect: Vec<f64> = table.row(5).iter().zip(pos.row(1)).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(x).row(1), expect.as_slice());
    }

    #[test]
    fn fusion_without_vision_is_usage_error() {
        let cfg = ModelConfig::default();
        let (params, _) = init_params(&cfg, 0).unwrap();
        let stage = LanguageStage::new(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let l = g.constant(crate::tensor::Mat::zeros(cfg.max_tokens, cfg.lang_dim));
        let pad = vec![false; cfg.max_tokens];
        let err = language_stage_forward(&mut g, &params, &stage, l, None, &pad, 1).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}

//! Model configuration, its invariants, and the flat `key = value` text format.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionDirection {
    /// Vision attends to language and language attends to vision.
    Bidirectional,
    /// Only the vision encoder attends to language; language fusion layers are bypassed.
    VisionOnly,
}

/// Which per-stage auxiliary objective fills the `L_align` slot of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    /// Text-to-pixel sigmoid alignment between projected `V_i` and `CLS_i`.
    Alignment,
    /// Plain per-stage BCE on a 1x1 side head over `V_i` (comparator).
    Auxiliary,
}

/// How per-pixel alignment losses are pooled across stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignNorm {
    /// Mean within each stage, then mean over stages.
    PerStageMean,
    /// One mean over every pixel of every enabled stage.
    GlobalPixelMean,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Parse(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($ty), other, [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

str_enum!(FusionDirection { Bidirectional => "bidirectional", VisionOnly => "vision_only" });
str_enum!(AlignMode { Alignment => "alignment", Auxiliary => "auxiliary" });
str_enum!(AlignNorm { PerStageMean => "per_stage_mean", GlobalPixelMean => "global_pixel_mean" });

/// Architecture and ablation switches. Stage indices in `fusion_stages` and
/// `align_stages` are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_stages: usize,
    pub vision_depths: Vec<usize>,
    pub vision_channels: Vec<usize>,
    pub vision_heads: Vec<usize>,
    pub lang_depths: Vec<usize>,
    pub lang_dim: usize,
    pub lang_heads: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub align_dim: usize,
    pub lambda_align: f64,
    pub fusion_stages: Vec<usize>,
    pub align_stages: Vec<usize>,
    pub fusion_direction: FusionDirection,
    pub align_mode: AlignMode,
    pub align_norm: AlignNorm,
    pub decoder_channels: Vec<usize>,
    pub ffn_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            num_stages: 4,
            vision_depths: vec![1, 1, 1, 1],
            vision_channels: vec![32, 64, 128, 256],
            vision_heads: vec![2, 4, 8, 8],
            lang_depths: vec![3, 1, 1, 1],
            lang_dim: 64,
            lang_heads: 4,
            vocab_size: crate::synthdata::Vocab::standard().len(),
            max_tokens: 12,
            align_dim: 32,
            lambda_align: 0.1,
            fusion_stages: vec![1, 2, 3, 4],
            align_stages: vec![1, 2, 3, 4],
            fusion_direction: FusionDirection::Bidirectional,
            align_mode: AlignMode::Alignment,
            align_norm: AlignNorm::PerStageMean,
            decoder_channels: vec![128, 64, 32],
            ffn_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Side length of the stage-`stage` feature map (1-based stage index).
    pub fn stage_side(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> (stage - 1)
    }

    pub fn stage_positions(&self, stage: usize) -> usize {
        let s = self.stage_side(stage);
        s * s
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.vision_channels[stage - 1]
    }

    pub fn fusion_enabled(&self, stage: usize) -> bool {
        self.fusion_stages.contains(&stage)
    }

    pub fn align_enabled(&self, stage: usize) -> bool {
        self.align_stages.contains(&stage)
    }

    /// Whether language stage `stage` (>= 2) opens with a cross-attention
    /// layer reading `F_V` of the previous vision stage.
    pub fn lang_cross_enabled(&self, stage: usize) -> bool {
        stage >= 2 && self.fusion_direction == FusionDirection::Bidirectional && self.fusion_enabled(stage - 1)
    }

    pub fn stages(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.num_stages
    }

    /// Every invariant violation, as `field: rule` strings. Empty means valid.
    pub fn violations(&self) -> Vec<String> {
        validate_config(self)
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_config(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Serializes as `key = value` lines, lists comma-separated.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.kv_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("num_stages", self.num_stages.to_string()),
            ("vision_depths", join_list(&self.vision_depths)),
            ("vision_channels", join_list(&self.vision_channels)),
            ("vision_heads", join_list(&self.vision_heads)),
            ("lang_depths", join_list(&self.lang_depths)),
            ("lang_dim", self.lang_dim.to_string()),
            ("lang_heads", self.lang_heads.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("align_dim", self.align_dim.to_string()),
            ("lambda_align", format_f64(self.lambda_align)),
            ("fusion_stages", join_list(&self.fusion_stages)),
            ("align_stages", join_list(&self.align_stages)),
            ("fusion_direction", self.fusion_direction.to_string()),
            ("align_mode", self.align_mode.to_string()),
            ("align_norm", self.align_norm.to_string()),
            ("decoder_channels", join_list(&self.decoder_channels)),
            ("ffn_ratio", self.ffn_ratio.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its text form. Returns `Ok(false)` for keys that
    /// are not model fields so callers can route them elsewhere.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "num_stages" => self.num_stages = parse_num(key, value)?,
            "vision_depths" => self.vision_depths = parse_list(key, value)?,
            "vision_channels" => self.vision_channels = parse_list(key, value)?,
            "vision_heads" => self.vision_heads = parse_list(key, value)?,
            "lang_depths" => self.lang_depths = parse_list(key, value)?,
            "lang_dim" => self.lang_dim = parse_num(key, value)?,
            "lang_heads" => self.lang_heads = parse_num(key, value)?,
            "vocab_size" => self.vocab_size = parse_num(key, value)?,
            "max_tokens" => self.max_tokens = parse_num(key, value)?,
            "align_dim" => self.align_dim = parse_num(key, value)?,
            "lambda_align" => self.lambda_align = parse_num(key, value)?,
            "fusion_stages" => self.fusion_stages = parse_list(key, value)?,
            "align_stages" => self.align_stages = parse_list(key, value)?,
            "fusion_direction" => self.fusion_direction = value.parse()?,
            "align_mode" => self.align_mode = value.parse()?,
            "align_norm" => self.align_norm = value.parse()?,
            "decoder_channels" => self.decoder_channels = parse_list(key, value)?,
            "ffn_ratio" => self.ffn_ratio = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a full config from `key = value` text; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Parse(format!("unknown model config key `{k}`")));
            }
        }
        Ok(cfg)
    }
}

/// Checks every configuration invariant and names each violated one.
pub fn validate_config(cfg: &ModelConfig) -> Vec<String> {
    let mut v = Vec::new();
    let n = cfg.num_stages;
    if n != 4 {
        v.push(format!("num_stages: must be 4 (got {n})"));
    }
    for (name, list) in [
        ("vision_depths", &cfg.vision_depths),
        ("vision_channels", &cfg.vision_channels),
        ("vision_heads", &cfg.vision_heads),
        ("lang_depths", &cfg.lang_depths),
    ] {
        if list.len() != n {
            v.push(format!("{name} length: expected {n} entries, got {}", list.len()));
        }
    }
    if cfg.decoder_channels.len() + 1 != n {
        v.push(format!(
            "decoder_channels length: expected {} entries, got {}",
            n.saturating_sub(1),
            cfg.decoder_channels.len()
        ));
    }
    if cfg.patch_size == 0 || cfg.image_size == 0 {
        v.push("image_size/patch_size: must be positive".into());
    } else if n >= 1 && n < 32 {
        let chain = cfg.patch_size << (n - 1);
        if cfg.image_size % chain != 0 {
            v.push(format!(
                "image_size: resolution chain not integral ({}/{}={} not divisible by {})",
                cfg.image_size,
                cfg.patch_size,
                cfg.image_size as f64 / cfg.patch_size as f64,
                1usize << (n - 1)
            ));
        }
    }
    if cfg.vision_channels.len() == n && cfg.vision_heads.len() == n {
        for i in 0..n {
            let (c, h) = (cfg.vision_channels[i], cfg.vision_heads[i]);
            if c == 0 || h == 0 || c % h != 0 {
                v.push(format!("vision_heads[{}]: {h} heads must divide {c} channels", i + 1));
            }
            if i + 1 < n && h > 0 && cfg.vision_channels[i + 1] % h != 0 {
                v.push(format!(
                    "vision_heads[{}]: {h} heads must divide the downsampled width {}",
                    i + 1,
                    cfg.vision_channels[i + 1]
                ));
            }
        }
    }
    if cfg.lang_depths.iter().any(|&d| d == 0) {
        v.push("lang_depths: every stage needs at least one layer".into());
    }
    if cfg.lang_dim == 0 || cfg.lang_heads == 0 || cfg.lang_dim % cfg.lang_heads != 0 {
        v.push(format!("lang_heads: {} heads must divide lang_dim {}", cfg.lang_heads, cfg.lang_dim));
    }
    if cfg.max_tokens < 2 {
        v.push(format!("max_tokens: must be >= 2 ([CLS] plus one word), got {}", cfg.max_tokens));
    }
    if cfg.vocab_size < 3 {
        v.push(format!("vocab_size: must hold [PAD], [CLS] and a word, got {}", cfg.vocab_size));
    }
    if cfg.align_dim == 0 {
        v.push("align_dim: must be positive".into());
    }
    if !(cfg.lambda_align >= 0.0 && cfg.lambda_align.is_finite()) {
        v.push(format!("lambda_align: must be finite and >= 0, got {}", cfg.lambda_align));
    }
    if cfg.ffn_ratio == 0 {
        v.push("ffn_ratio: must be positive".into());
    }
    if cfg.decoder_channels.iter().any(|&c| c == 0) {
        v.push("decoder_channels: must be positive".into());
    }
    for (name, list) in [("fusion_stages", &cfg.fusion_stages), ("align_stages", &cfg.align_stages)] {
        if list.iter().any(|&s| s == 0 || s > n) {
            v.push(format!("{name}: stage indices must lie in 1..={n}"));
        }
        let mut sorted = list.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != list.len() {
            v.push(format!("{name}: duplicate stage index"));
        }
    }
    v
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let value = value.trim().trim_start_matches('[').trim_end_matches(']');
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse_num(key, s)).collect()
}

pub(crate) fn join_list<T: ToString>(list: &[T]) -> String {
    list.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Shortest text form that parses back to the same bits.
pub(crate) fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

//! Fusion residual literalness with the fusion sublayer outputs zeroed.

use vlseg::decoder::NormMode;
use vlseg::harness::pipeline::{forward_pipeline, Model};
use vlseg::vision::Downsample;
use vlseg::{init_params, FusionDirection, Graph, Mat, ModelConfig, ModelParams};

use super::*;

pub fn small() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        vision_channels: vec![8, 16, 16, 24],
        vision_heads: vec![2, 2, 4, 4],
        lang_dim: 16,
        lang_heads: 2,
        max_tokens: 6,
        align_dim: 8,
        decoder_channels: vec![16, 8, 8],
        ffn_ratio: 2,
        ..Default::default()
    }
}

fn bits(m: &Mat) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Zeroes the output projection of every fusion attention and the second
/// affine map of every fusion FFN.
pub fn zero_fusion_outputs(params: &mut ModelParams) -> usize {
    let paths: Vec<String> = params
        .iter()
        .map(|(k, _)| k.clone())
        .filter(|k| k.contains(".fusion.") && (k.contains(".o.") || k.contains(".fc2.")))
        .collect();
    for p in &paths {
        params.zero(p).unwrap();
    }
    paths.len()
}

/// With fusion outputs zeroed: `M_hat = M = V` and `F_V = Down(V)` bit for
/// bit at every stage, and the whole forward pass equals that of the same
/// weights with fusion switched off.
pub fn check_identity(direction: FusionDirection) -> Result<(), String> {
    let cfg = ModelConfig { fusion_direction: direction, ..small() };
    let model = Model::new(&cfg).unwrap();
    let (mut params, _) = init_params(&cfg, 9).unwrap();
    // Widen everything else so the identity is not an artifact of tiny values.
    let mut r = rng(10);
    for (k, m) in params.iter_mut() {
        if k.ends_with(".weight") {
            *m = random_mat(&mut r, m.rows(), m.cols(), 0.5);
        }
    }
    let zeroed = zero_fusion_outputs(&mut params);
    let lang_fusions = if direction == FusionDirection::Bidirectional { 3 } else { 0 };
    // Vision: 4 first halves (attn1, ffn1) + 3 downsampled halves; 2 tensors each.
    ensure!(zeroed == 2 * 2 * (4 + 3 + lang_fusions), "zeroed {zeroed} tensors");

    let batch = random_batch(&cfg, 2, 11);
    let mut g = Graph::new();
    let out = forward_pipeline(&mut g, &params, &model, &batch, NormMode::Train).unwrap();
    for st in &out.stages {
        let v = bits(g.value(st.v));
        ensure!(bits(g.value(st.m_hat)) == v, "M_hat != V at stage {}", st.stage);
        ensure!(bits(g.value(st.m)) == v, "M != V at stage {}", st.stage);
        if let Some(f_v) = st.f_v {
            let down = Downsample {
                prefix: format!("vision.stage{}.down", st.stage),
                in_channels: cfg.channels(st.stage),
                out_channels: cfg.channels(st.stage + 1),
            };
            let d = down.forward(&mut g, &params, st.v, st.side, 2).unwrap();
            ensure!(bits(g.value(f_v)) == bits(g.value(d)), "F_V != Down(V) at stage {}", st.stage);
        }
    }

    // The same weights with fusion switched off entirely give bit-identical
    // language features at every stage and identical logits.
    let plain = ModelConfig { fusion_stages: vec![], ..cfg.clone() };
    let plain_model = Model::new(&plain).unwrap();
    let mut plain_params = ModelParams::default();
    for (k, m) in params.iter() {
        if !k.contains(".fusion.") {
            plain_params.insert(k.clone(), m.clone());
        }
    }
    for (k, m) in params.buffers() {
        plain_params.insert_buffer(k.clone(), m.clone());
    }
    let mut g2 = Graph::new();
    let out2 = forward_pipeline(&mut g2, &plain_params, &plain_model, &batch, NormMode::Train).unwrap();
    for (a, b) in out.stages.iter().zip(&out2.stages) {
        ensure!(bits(g.value(a.l)) == bits(g2.value(b.l)), "language stage {}", a.stage);
        ensure!(bits(g.value(a.v)) == bits(g2.value(b.v)), "vision stage {}", a.stage);
    }
    ensure!(bits(g.value(out.logits)) == bits(g2.value(out2.logits)), "logits differ");
    Ok(())
}

mod common;

use common::*;
use vlseg::decoder::{decode, task_loss, NormMode};
use vlseg::harness::{compute_losses, forward_pipeline, Model};
use vlseg::vision::patch_embed;
use vlseg::{Graph, ModelConfig};

/// Everything switched off: no fusion, no alignment, lambda 0.
fn plain_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 2,
        vision_channels: vec![4, 8, 8, 12],
        vision_heads: vec![1, 2, 2, 3],
        lang_depths: vec![2, 1, 1, 1],
        lang_dim: 6,
        lang_heads: 2,
        max_tokens: 5,
        align_dim: 3,
        decoder_channels: vec![6, 4, 4],
        ffn_ratio: 2,
        fusion_stages: vec![],
        align_stages: vec![],
        lambda_align: 0.0,
        ..Default::default()
    }
}

#[test]
fn switched_off_model_trains_like_a_plain_encoder_decoder() {
    let cfg = plain_cfg();
    let model = Model::new(&cfg).unwrap();
    let (params, _) = vlseg::init_params(&cfg, 9).unwrap();
    let batch = random_batch(&cfg, 2, 4);

    let mut g = Graph::new();
    let out = forward_pipeline(&mut g, &params, &model, &batch, NormMode::Train).unwrap();
    let losses = compute_losses(&mut g, &params, &cfg, &out, &batch.gts).unwrap();
    assert!(losses.align_empty);
    let full_loss = g.value(losses.total).item();
    let full = g.backward(losses.total).into_param_map();

    // Vision encoder straight into the decoder, BCE only; no language at all.
    let mut p = Graph::new();
    let mut x = patch_embed(&mut p, &params, &model.patch, &batch.images).unwrap();
    let mut feats = Vec::new();
    for stage in &model.vision {
        for block in &stage.blocks {
            x = block.forward(&mut p, &params, x, None, batch.len()).unwrap();
        }
        feats.push(x);
        if let Some(down) = &stage.down {
            x = down.forward(&mut p, &params, x, stage.side, batch.len()).unwrap();
        }
    }
    let logits = decode(&mut p, &params, &cfg, &feats, batch.len(), NormMode::Train).unwrap();
    let flat: Vec<bool> = batch.gts.iter().flatten().copied().collect();
    let loss = task_loss(&mut p, logits, &flat).unwrap();
    assert_eq!(p.value(loss).item().to_bits(), full_loss.to_bits());
    let plain = p.backward(loss).into_param_map();

    let mut compared = 0;
    for (path, _) in params.iter() {
        let a = full.get(path);
        let b = plain.get(path);
        match (a, b) {
            (Some(a), Some(b)) => {
                assert_eq!(a.data(), b.data(), "{path}");
                compared += 1;
            }
            (Some(a), None) => assert!(a.data().iter().all(|&v| v == 0.0), "{path} has gradient only in the switched-off model"),
            (None, Some(_)) => panic!("{path} missing from switched-off gradients"),
            (None, None) => assert!(path.starts_with("language."), "{path} receives no gradient"),
        }
    }
    assert!(compared > 20);
}

#[test]
fn lambda_zero_alignment_has_no_gradient_effect() {
    // Alignment heads present but weighted by 0: every non-alignment gradient
    // equals that of the model without heads, and the heads get exact zeros.
    let with = ModelConfig { align_stages: vec![1, 2, 3, 4], lambda_align: 0.0, fusion_stages: vec![1, 2, 3, 4], ..plain_cfg() };
    let without = ModelConfig { align_stages: vec![], ..with.clone() };
    let (params, _) = vlseg::init_params(&with, 3).unwrap();
    let batch = random_batch(&with, 2, 6);
    let grads = |cfg: &ModelConfig| {
        let model = Model::new(cfg).unwrap();
        let mut g = Graph::new();
        let out = forward_pipeline(&mut g, &params, &model, &batch, NormMode::Train).unwrap();
        let l = compute_losses(&mut g, &params, cfg, &out, &batch.gts).unwrap();
        let align = g.value(l.align).item();
        (align, g.backward(l.total).into_param_map())
    };
    let (align, a) = grads(&with);
    let (_, b) = grads(&without);
    assert!(align > 0.0, "alignment loss is still logged");
    for (path, ga) in &a {
        if path.starts_with("align.") {
            assert!(ga.data().iter().all(|&v| v == 0.0), "{path}");
        } else {
            assert_eq!(ga.data(), b[path].data(), "{path}");
        }
    }
}

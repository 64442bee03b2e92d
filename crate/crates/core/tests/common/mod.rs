#![allow(dead_code)]

pub mod gradcheck;
pub mod residual;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlseg::harness::pipeline::Batch;
use vlseg::language::{CLS_ID, PAD_ID};
use vlseg::vision::ImageTensor;
use vlseg::{Mat, ModelConfig, ModelParams};

/// 8px images, 1px patches, single heads, 4 tokens: small enough for
/// exhaustive finite differences.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 1,
        vision_channels: vec![4, 6, 8, 8],
        vision_heads: vec![1, 1, 1, 1],
        lang_depths: vec![2, 2, 1, 1],
        lang_dim: 4,
        lang_heads: 1,
        max_tokens: 4,
        align_dim: 3,
        decoder_channels: vec![4, 4, 3],
        ffn_ratio: 2,
        ..Default::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

/// Random images, token sequences of random length and blob-shaped masks.
pub fn random_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let s = cfg.image_size;
    let t = cfg.max_tokens;
    let mut b = Batch { images: Vec::new(), token_ids: Vec::new(), padding: Vec::new(), gts: Vec::new() };
    for _ in 0..batch {
        let data = (0..3 * s * s).map(|_| r.random::<f64>()).collect();
        b.images.push(ImageTensor::new(s, data).unwrap());
        let words = r.random_range(1..t);
        for i in 0..t {
            let id = if i == 0 {
                CLS_ID
            } else if i <= words {
                r.random_range(2..cfg.vocab_size)
            } else {
                PAD_ID
            };
            b.token_ids.push(id);
            b.padding.push(i > words);
        }
        let (cx, cy) = (r.random_range(0..s) as i64, r.random_range(0..s) as i64);
        let rad = r.random_range(1..=s / 2) as i64;
        let gt = (0..s * s)
            .map(|p| {
                let (x, y) = ((p % s) as i64, (p / s) as i64);
                (x - cx).pow(2) + (y - cy).pow(2) <= rad * rad
            })
            .collect();
        b.gts.push(gt);
    }
    b
}

pub const FD_STEP: f64 = 1e-3;

/// Relative error with a floor on the denominator so that gradients that
/// are zero to rounding are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` with respect to `params[path][idx]`.
pub fn fd_param(params: &mut ModelParams, path: &str, idx: usize, f: &dyn Fn(&ModelParams) -> f64) -> f64 {
    let orig = params.get(path).unwrap().data()[idx];
    params.get_mut(path).unwrap().data_mut()[idx] = orig + FD_STEP;
    let up = f(params);
    params.get_mut(path).unwrap().data_mut()[idx] = orig - FD_STEP;
    let down = f(params);
    params.get_mut(path).unwrap().data_mut()[idx] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Central difference of `f` with respect to entry `idx` of `m`.
pub fn fd_mat(m: &Mat, idx: usize, f: &dyn Fn(&Mat) -> f64) -> f64 {
    let mut p = m.clone();
    p.data_mut()[idx] += FD_STEP;
    let up = f(&p);
    p.data_mut()[idx] -= 2.0 * FD_STEP;
    let down = f(&p);
    (up - down) / (2.0 * FD_STEP)
}

/// `x W + b` with plain loops.
fn naive_linear(x: &[Vec<f64>], w: &Mat, b: &Mat) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| b.get(0, j) + row.iter().enumerate().map(|(i, &xi)| xi * w.get(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Two-loop multi-head attention reference: every score, softmax and
/// weighted sum written out explicitly, one query at a time.
pub fn naive_mhca(params: &ModelParams, prefix: &str, heads: usize, q_in: &Mat, kv_in: &Mat, mask: Option<&[bool]>, batch: usize) -> Mat {
    let p = |n: &str| params.get(&format!("{prefix}.{n}")).unwrap();
    let q = naive_linear(&rows_of(q_in), p("q.weight"), p("q.bias"));
    let k = naive_linear(&rows_of(kv_in), p("k.weight"), p("k.bias"));
    let v = naive_linear(&rows_of(kv_in), p("v.weight"), p("v.bias"));
    let d = q[0].len();
    let dk = d / heads;
    let nq = q.len() / batch;
    let nk = k.len() / batch;
    let mut concat = vec![vec![0.0; d]; q.len()];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..nq {
                let qi = &q[b * nq + i];
                let mut scores = Vec::with_capacity(nk);
                for j in 0..nk {
                    let kj = &k[b * nk + j];
                    let mut s = 0.0;
                    for c in h * dk..(h + 1) * dk {
                        s += qi[c] * kj[c];
                    }
                    scores.push(s / (dk as f64).sqrt());
                }
                let keep: Vec<bool> = (0..nk).map(|j| !mask.is_some_and(|m| m[b * nk + j])).collect();
                let max = (0..nk).filter(|&j| keep[j]).map(|j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                let mut w = vec![0.0; nk];
                for j in 0..nk {
                    if keep[j] {
                        w[j] = (scores[j] - max).exp();
                        z += w[j];
                    }
                }
                for j in 0..nk {
                    for c in h * dk..(h + 1) * dk {
                        concat[b * nq + i][c] += w[j] / z * v[b * nk + j][c];
                    }
                }
            }
        }
    }
    let out = naive_linear(&concat, p("o.weight"), p("o.bias"));
    Mat::from_fn(out.len(), d, |r, c| out[r][c])
}

/// Pixel counts for one prediction/ground-truth pair.
pub fn count_overlap(pred: &[bool], gt: &[bool]) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    (inter, union)
}

/// Counting oracle: (oIoU, mIoU, P@t for the standard thresholds).
pub fn count_metrics(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> (f64, f64, Vec<f64>) {
    let (mut ti, mut tu) = (0u64, 0u64);
    let mut ious = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let (i, u) = count_overlap(p, g);
        ti += i;
        tu += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let oiou = if tu == 0 { 1.0 } else { ti as f64 / tu as f64 };
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let prec = [0.5, 0.6, 0.7, 0.8, 0.9]
        .iter()
        .map(|&t| ious.iter().filter(|&&x| x > t).count() as f64 / ious.len() as f64)
        .collect();
    (oiou, miou, prec)
}

/// Runs one forward/loss pass and checks every stage against the closed-form
/// chain `side_i = S / (p * 2^(i-1))`, width `C_i`, alignment map `side_i^2`,
/// logits `S^2`. Returns a description of the first mismatch.
pub fn check_shape_chain(cfg: &ModelConfig, batch: usize) -> Result<(), String> {
    use vlseg::decoder::NormMode;
    use vlseg::harness::pipeline::{compute_losses, forward_pipeline, Model};
    let model = Model::new(cfg).map_err(|e| e.to_string())?;
    let (params, _) = vlseg::init_params(cfg, 1).map_err(|e| e.to_string())?;
    let b = random_batch(cfg, batch, 2);
    let mut g = vlseg::Graph::new();
    let out = forward_pipeline(&mut g, &params, &model, &b, NormMode::Train).map_err(|e| e.to_string())?;
    let losses = compute_losses(&mut g, &params, cfg, &out, &b.gts).map_err(|e| e.to_string())?;
    let s = cfg.image_size;
    for st in &out.stages {
        let i = st.stage;
        let side = s / (cfg.patch_size << (i - 1));
        let c = cfg.vision_channels[i - 1];
        let want = |what: &str, got: (usize, usize), exp: (usize, usize)| {
            if got == exp {
                Ok(())
            } else {
                Err(format!("S={s} p={} stage {i} {what}: got {got:?}, expected {exp:?}", cfg.patch_size))
            }
        };
        if st.side != side {
            return Err(format!("stage {i} side {} != {side}", st.side));
        }
        want("V", g.value(st.v).shape(), (batch * side * side, c))?;
        want("M_hat", g.value(st.m_hat).shape(), (batch * side * side, c))?;
        want("M", g.value(st.m).shape(), (batch * side * side, c))?;
        want("L", g.value(st.l).shape(), (batch * cfg.max_tokens, cfg.lang_dim))?;
        want("CLS", g.value(st.cls).shape(), (batch, cfg.lang_dim))?;
        match (st.f_v, i < cfg.num_stages) {
            (Some(f), true) => want("F_V", g.value(f).shape(), (batch * side * side / 4, cfg.vision_channels[i]))?,
            (None, false) => {}
            _ => return Err(format!("stage {i}: F_V presence wrong")),
        }
    }
    let aligned: Vec<usize> = losses.stage_align.iter().map(|(st, _)| *st).collect();
    if aligned != cfg.align_stages {
        return Err(format!("alignment stages {aligned:?} != {:?}", cfg.align_stages));
    }
    if cfg.align_mode == vlseg::AlignMode::Alignment {
        for (st, l) in &losses.stage_align {
            let side = s / (cfg.patch_size << (st - 1));
            let (pixel_loss, sims) = g.alignment_maps(*l).ok_or("alignment node missing")?;
            if pixel_loss.len() != batch * side * side || sims.len() != batch * side * side {
                return Err(format!("stage {st} alignment map has {} entries, expected {}", sims.len(), batch * side * side));
            }
        }
    }
    if g.value(out.logits).shape() != (batch * s * s, 1) {
        return Err(format!("logits {:?}, expected ({}, 1)", g.value(out.logits).shape(), batch * s * s));
    }
    Ok(())
}

/// Valid patch sizes per image size, keeping stage 1 at 8..=32 cells.
pub const CHAIN: [(usize, [usize; 3]); 3] = [(32, [1, 2, 4]), (64, [2, 4, 8]), (128, [4, 8, 16])];

pub fn narrow(image_size: usize, patch_size: usize) -> ModelConfig {
    ModelConfig {
        image_size,
        patch_size,
        vision_channels: vec![4, 8, 8, 16],
        vision_heads: vec![1, 2, 2, 4],
        lang_depths: vec![2, 1, 1, 1],
        lang_dim: 8,
        lang_heads: 2,
        max_tokens: 5,
        align_dim: 4,
        decoder_channels: vec![8, 4, 4],
        ffn_ratio: 1,
        ..Default::default()
    }
}


/// Every config of the shape-chain grid: image sizes x valid patch sizes x
/// fusion/alignment switch settings.
pub fn shape_chain_grid() -> Vec<ModelConfig> {
    use vlseg::{AlignMode, FusionDirection};
    let switches: [(Vec<usize>, Vec<usize>, FusionDirection, AlignMode); 4] = [
        (vec![1, 2, 3, 4], vec![1, 2, 3, 4], FusionDirection::Bidirectional, AlignMode::Alignment),
        (vec![4], vec![], FusionDirection::Bidirectional, AlignMode::Alignment),
        (vec![2, 3], vec![1, 4], FusionDirection::VisionOnly, AlignMode::Alignment),
        (vec![], vec![2, 3], FusionDirection::Bidirectional, AlignMode::Auxiliary),
    ];
    let mut out = Vec::new();
    for (size, patches) in CHAIN {
        for p in patches {
            for (fusion, align, dir, mode) in &switches {
                out.push(ModelConfig {
                    fusion_stages: fusion.clone(),
                    align_stages: align.clone(),
                    fusion_direction: *dir,
                    align_mode: *mode,
                    ..narrow(size, p)
                });
            }
        }
    }
    out
}

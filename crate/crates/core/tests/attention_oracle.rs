mod common;

use common::*;
use rand::Rng;
use vlseg::attention::{mhca, AttentionSpec};
use vlseg::{Graph, Mat, ModelParams};

/// One random instance: spec, params, query, key/value, padding mask, batch.
pub struct Instance {
    spec: AttentionSpec,
    params: ModelParams,
    q: Mat,
    kv: Mat,
    mask: Option<Vec<bool>>,
    batch: usize,
}

fn instance(r: &mut impl Rng) -> Instance {
    let heads = r.random_range(1..=4);
    let dq = heads * r.random_range(1..=3);
    let dkv = r.random_range(1..=6);
    let (nq, nk) = (r.random_range(1..=8), r.random_range(1..=8));
    let batch = r.random_range(1..=3);
    let spec = AttentionSpec::new("x", dq, dkv, heads).unwrap();
    let mut specs = Vec::new();
    spec.param_specs(&mut specs);
    let mut params = ModelParams::default();
    for s in specs {
        params.insert(s.path, random_mat(r, s.shape.0, s.shape.1, 1.0));
    }
    let mask = r.random_bool(0.5).then(|| {
        let mut m: Vec<bool> = (0..batch * nk).map(|_| r.random_bool(0.4)).collect();
        for b in 0..batch {
            // Keep at least one visible key per sample.
            m[b * nk + r.random_range(0..nk)] = false;
        }
        m
    });
    Instance { q: random_mat(r, batch * nq, dq, 2.0), kv: random_mat(r, batch * nk, dkv, 2.0), spec, params, mask, batch }
}

#[test]
fn mhca_matches_two_loop_reference() {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let x = instance(&mut r);
        let mut g = Graph::new();
        let q = g.constant(x.q.clone());
        let kv = g.constant(x.kv.clone());
        let out = mhca(&mut g, &x.params, &x.spec, q, kv, x.mask.as_deref(), x.batch).unwrap();
        let want = naive_mhca(&x.params, "x", x.spec.num_heads, &x.q, &x.kv, x.mask.as_deref(), x.batch);
        let diff = g.value(out).max_abs_diff(&want);
        assert!(diff <= 1e-5, "case {case}: max diff {diff}");
        worst = worst.max(diff);
    }
    eprintln!("worst attention deviation {worst:.3e}");
}

#[test]
fn masked_keys_do_not_influence_output() {
    let mut r = rng(102);
    for _ in 0..50 {
        let x = instance(&mut r);
        let Some(mask) = &x.mask else { continue };
        let mut kv2 = x.kv.clone();
        for (row, &m) in mask.iter().enumerate() {
            if m {
                kv2.row_mut(row).iter_mut().for_each(|v| *v = 1e3);
            }
        }
        let run = |kv: &Mat| {
            let mut g = Graph::new();
            let q = g.constant(x.q.clone());
            let kv = g.constant(kv.clone());
            let o = mhca(&mut g, &x.params, &x.spec, q, kv, Some(mask), x.batch).unwrap();
            g.value(o).clone()
        };
        assert_eq!(run(&x.kv), run(&kv2));
    }
}

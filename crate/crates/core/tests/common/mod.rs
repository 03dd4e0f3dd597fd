#![allow(dead_code)]

use std::sync::Arc;

use mome::autograd::{AttnMask, Graph, Var};
use mome::decoder::DecoderConfig;
use mome::geometry::{LocalAttentionMask, MaskWindows, ProjectedQuery};
use mome::model::{ModelConfig, RigConfig};
use mome::params::ParamSet;
use mome::scene::SceneConfig;
use mome::train::TrainConfig;
use mome::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduced geometry used by the training acceptance criteria.
pub fn reduced_model_config(init_seed: u64) -> ModelConfig {
    ModelConfig {
        bev_side: 36,
        rig: RigConfig {
            image_height: 80,
            image_width: 192,
            feat_height: 5,
            feat_width: 12,
            ..RigConfig::default()
        },
        windows: MaskWindows { lidar: 5, camera: 3 },
        decoder: DecoderConfig {
            d_model: 32,
            heads: 4,
            layers: 6,
            num_queries: 64,
            num_classes: 3,
            ..DecoderConfig::default()
        },
        init_seed,
        ..ModelConfig::default()
    }
}

pub fn reduced_scene_config() -> SceneConfig {
    SceneConfig {
        num_classes: 3,
        azimuth_steps: 360,
        ..SceneConfig::default()
    }
}

pub fn reduced_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        stage1_steps: 1000,
        stage2_steps: 300,
        seed,
        log_every: 100,
        ..TrainConfig::default()
    }
}

/// Small model for fast pipeline tests.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        bev_side: 12,
        rig: RigConfig {
            image_height: 40,
            image_width: 96,
            feat_height: 5,
            feat_width: 12,
            ..RigConfig::default()
        },
        windows: MaskWindows { lidar: 3, camera: 3 },
        decoder: DecoderConfig {
            d_model: 16,
            heads: 4,
            layers: 2,
            num_queries: 9,
            num_classes: 3,
            ..DecoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn tiny_scene_config() -> SceneConfig {
    SceneConfig {
        num_classes: 3,
        max_boxes: 6,
        azimuth_steps: 120,
        ..SceneConfig::default()
    }
}

// ---- finite differences ----------------------------------------------------

/// Largest elementwise relative error between analytic and central
/// difference gradients of `sum(f(inputs) ⊙ R)` for a fixed random `R`.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        random_tensor(g.shape(out), -1.0, 1.0, &mut rng(99))
    };
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Same check with respect to every unfrozen parameter in `params`.
pub fn gradcheck_params(params: &ParamSet, f: impl Fn(&mut Graph, &ParamSet) -> Var) -> f64 {
    let mut g = Graph::new();
    let out = f(&mut g, params);
    assert_eq!(g.value(out).numel(), 1, "gradcheck_params needs a scalar");
    g.backward(out).unwrap();
    let mut with_grads = params.clone();
    with_grads.zero_grad();
    g.accumulate_grads(&mut with_grads);
    let eval = |p: &ParamSet| {
        let mut g = Graph::new();
        let out = f(&mut g, p);
        g.value(out).data()[0]
    };
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        if params.is_frozen(id) {
            continue;
        }
        for j in 0..params.value(id).numel() {
            let mut plus = params.clone();
            plus.value_mut(id).data_mut()[j] += FD_STEP;
            let mut minus = params.clone();
            minus.value_mut(id).data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(with_grads.grad(id).data()[j], numeric));
        }
    }
    worst
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

// ---- independent oracles ---------------------------------------------------

/// Dense multi-head attention with blocked logits replaced by -1e30.
pub fn dense_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    blocked: &dyn Fn(usize, usize) -> bool,
) -> Tensor {
    let (n, d, m) = (q.rows(), q.cols(), k.rows());
    let dh = d / heads;
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        if (0..m).all(|j| blocked(i, j)) {
            continue;
        }
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = (0..m)
                .map(|j| {
                    if blocked(i, j) {
                        -1e30
                    } else {
                        cols.clone().map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (dh as f64).sqrt()
                    }
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols {
                out.row_mut(i)[c] = (0..m).map(|j| e[j] / z * v.at(j, c)).sum();
            }
        }
    }
    out
}

/// Window membership test for one mask entry, written from the geometric
/// definition rather than from the construction loop.
pub fn mask_entry_open(
    pq: &ProjectedQuery,
    col: usize,
    side: usize,
    views: usize,
    feat_h: usize,
    feat_w: usize,
    windows: MaskWindows,
) -> bool {
    let bev_len = side * side;
    let hl = (windows.lidar / 2) as i64;
    let hc = (windows.camera / 2) as i64;
    if col < bev_len {
        let (r, c) = ((col / side) as i64, (col % side) as i64);
        pq.bev.inside && (r - pq.bev.row).abs() <= hl && (c - pq.bev.col).abs() <= hl
    } else {
        let local = col - bev_len;
        let per_view = feat_h * feat_w;
        assert!(local < views * per_view);
        let (view, cell) = (local / per_view, local % per_view);
        let (r, c) = ((cell / feat_w) as i64, (cell % feat_w) as i64);
        match pq.camera {
            Some(cam) => cam.view == view && (r - cam.row as i64).abs() <= hc && (c - cam.col as i64).abs() <= hc,
            None => false,
        }
    }
}

/// Number of mask entries disagreeing with the brute-force window test.
pub fn mask_mismatches(
    mask: &LocalAttentionMask,
    projected: &[ProjectedQuery],
    side: usize,
    views: usize,
    feat_h: usize,
    feat_w: usize,
    windows: MaskWindows,
) -> usize {
    let mut bad = 0;
    for (q, pq) in projected.iter().enumerate() {
        for col in 0..mask.cols() {
            if mask.is_blocked(q, col) == mask_entry_open(pq, col, side, views, feat_h, feat_w, windows) {
                bad += 1;
            }
        }
    }
    bad
}

/// Minimum assignment cost over all injections of rows into columns.
pub fn brute_force_assignment(cost: &[Vec<f64>], n: usize) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; n], 0.0, &mut best);
    if cost.is_empty() {
        0.0
    } else {
        best
    }
}

/// Detection in a single-scene, single-class AP micro-instance.
#[derive(Clone, Copy, Debug)]
pub struct MicroDet {
    pub score: f64,
    pub xy: [f64; 2],
}

/// AP by walking the PR curve explicitly: at each recall level `k/100`, the
/// best precision of any cutoff reaching it, compared in integers.
pub fn reference_ap(dets: &[MicroDet], gts: &[[f64; 2]], d: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut curve = Vec::new();
    let mut hits = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let dist = ((dets[i].xy[0] - g[0]).powi(2) + (dets[i].xy[1] - g[1]).powi(2)).sqrt();
            if !taken[j] && dist < d && best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((j, dist));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            hits += 1;
        }
        curve.push((hits, rank + 1));
    }
    if gts.is_empty() {
        return 0.0;
    }
    let total: f64 = (0..=100usize)
        .map(|k| {
            curve
                .iter()
                .filter(|(h, _)| h * 100 >= k * gts.len())
                .map(|&(h, n)| h as f64 / n as f64)
                .fold(0.0, f64::max)
        })
        .sum();
    total / 101.0
}

pub fn arc_mask(cols: usize, open: Vec<Vec<u32>>) -> Arc<AttnMask> {
    Arc::new(AttnMask::new(cols, open).unwrap())
}

// ---- gradcheck suite ---------------------------------------------------------

/// Values bounded away from zero so kinks of relu/abs stay out of reach.
pub fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = random_tensor(shape, 0.1, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Finite-difference error of every differentiable graph op, by name.
pub fn op_gradchecks() -> Vec<(&'static str, f64)> {
    let mut r = rng(7);
    let a = random_tensor(&[3, 4], -1.0, 1.0, &mut r);
    let b = random_tensor(&[4, 5], -1.0, 1.0, &mut r);
    let c = random_tensor(&[3, 4], -1.0, 1.0, &mut r);
    let e = random_tensor(&[5, 4], -1.0, 1.0, &mut r);
    let row = random_tensor(&[4], -1.0, 1.0, &mut r);
    let kinked = off_zero(&[3, 4], &mut r);
    let gain = random_tensor(&[4], 0.5, 1.5, &mut r);
    let q = random_tensor(&[3, 4], -1.0, 1.0, &mut r);
    let k = random_tensor(&[5, 4], -1.0, 1.0, &mut r);
    let v = random_tensor(&[5, 4], -1.0, 1.0, &mut r);
    let targets = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let soft_targets = {
        let mut t = Tensor::zeros(&[3, 4]);
        for i in 0..3 {
            t.row_mut(i)[(i + 1) % 4] = 1.0;
        }
        t
    };
    let mask = arc_mask(5, vec![vec![0, 2], vec![], vec![1, 3, 4]]);

    vec![
        (
            "matmul",
            gradcheck(&[a.clone(), b.clone()], |g, x| g.matmul(x[0], x[1]).unwrap()),
        ),
        (
            "matmul_nt",
            gradcheck(&[a.clone(), e.clone()], |g, x| g.matmul_nt(x[0], x[1]).unwrap()),
        ),
        (
            "transpose",
            gradcheck(std::slice::from_ref(&a), |g, x| g.transpose(x[0]).unwrap()),
        ),
        (
            "add",
            gradcheck(&[a.clone(), c.clone()], |g, x| g.add(x[0], x[1]).unwrap()),
        ),
        (
            "sub",
            gradcheck(&[a.clone(), c.clone()], |g, x| g.sub(x[0], x[1]).unwrap()),
        ),
        (
            "mul",
            gradcheck(&[a.clone(), c.clone()], |g, x| g.mul(x[0], x[1]).unwrap()),
        ),
        (
            "add_row",
            gradcheck(&[a.clone(), row.clone()], |g, x| g.add_row(x[0], x[1]).unwrap()),
        ),
        ("scale", gradcheck(std::slice::from_ref(&a), |g, x| g.scale(x[0], -1.7))),
        ("relu", gradcheck(std::slice::from_ref(&kinked), |g, x| g.relu(x[0]))),
        ("gelu", gradcheck(std::slice::from_ref(&a), |g, x| g.gelu(x[0]))),
        ("sigmoid", gradcheck(std::slice::from_ref(&a), |g, x| g.sigmoid(x[0]))),
        ("tanh", gradcheck(std::slice::from_ref(&a), |g, x| g.tanh(x[0]))),
        ("exp", gradcheck(std::slice::from_ref(&a), |g, x| g.exp(x[0]))),
        ("abs", gradcheck(std::slice::from_ref(&kinked), |g, x| g.abs(x[0]))),
        ("softmax", gradcheck(std::slice::from_ref(&a), |g, x| g.softmax(x[0]))),
        (
            "layernorm",
            gradcheck(&[a.clone(), gain.clone(), row.clone()], |g, x| {
                g.layernorm(x[0], x[1], x[2], 1e-5).unwrap()
            }),
        ),
        (
            "concat_rows",
            gradcheck(&[a.clone(), e.clone()], |g, x| g.concat_rows(&[x[0], x[1]]).unwrap()),
        ),
        (
            "concat_cols",
            gradcheck(&[a.clone(), c.clone()], |g, x| g.concat_cols(&[x[0], x[1]]).unwrap()),
        ),
        (
            "slice_rows",
            gradcheck(std::slice::from_ref(&e), |g, x| g.slice_rows(x[0], 1, 4).unwrap()),
        ),
        (
            "slice_cols",
            gradcheck(std::slice::from_ref(&a), |g, x| g.slice_cols(x[0], 1, 3).unwrap()),
        ),
        (
            "gather_rows",
            gradcheck(std::slice::from_ref(&e), |g, x| {
                g.gather_rows(x[0], &[4, 0, 4, 2]).unwrap()
            }),
        ),
        (
            "reshape",
            gradcheck(std::slice::from_ref(&a), |g, x| g.reshape(x[0], &[2, 6]).unwrap()),
        ),
        ("sum", gradcheck(std::slice::from_ref(&a), |g, x| g.sum(x[0]))),
        ("mean", gradcheck(std::slice::from_ref(&a), |g, x| g.mean(x[0]))),
        (
            "attention",
            gradcheck(&[q.clone(), k.clone(), v.clone()], |g, x| {
                g.attention(x[0], x[1], x[2], 2, None).unwrap()
            }),
        ),
        (
            "masked attention",
            gradcheck(&[q, k, v], |g, x| {
                g.attention(x[0], x[1], x[2], 2, Some(mask.clone())).unwrap()
            }),
        ),
        (
            "focal_loss",
            gradcheck(std::slice::from_ref(&a), |g, x| {
                g.focal_loss(x[0], &targets, 0.25, 2.0).unwrap()
            }),
        ),
        (
            "softmax_cross_entropy",
            gradcheck(&[a], |g, x| g.softmax_cross_entropy(x[0], &soft_targets).unwrap()),
        ),
    ]
}

/// One post-norm decoder layer at `D = 8`, 3 queries over 5 keys, checked
/// against its inputs and against every layer parameter.
pub fn decoder_layer_gradcheck() -> (f64, f64) {
    use mome::decoder::{decoder_layer, init_decoder_params, KeyValue};
    let cfg = DecoderConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        num_queries: 3,
        num_classes: 2,
        ffn_mult: 2,
        ..DecoderConfig::default()
    };
    let mut r = rng(11);
    let mut params = ParamSet::new();
    init_decoder_params(&mut params, &cfg, &mut r).unwrap();
    let x = random_tensor(&[3, 8], -1.0, 1.0, &mut r);
    let pe = random_tensor(&[3, 8], -1.0, 1.0, &mut r);
    let feats = random_tensor(&[5, 8], -1.0, 1.0, &mut r);
    let fpe = random_tensor(&[5, 8], -1.0, 1.0, &mut r);
    let mask = arc_mask(5, vec![vec![0, 1, 2], vec![3], vec![1, 2, 3, 4]]);
    let layer = |g: &mut Graph, p: &ParamSet, x: Var, pe: Var, feats: Var, fpe: Var| {
        let key_in = g.add(feats, fpe).unwrap();
        let kv = KeyValue::project(g, p, "decoder.layers.0.cross_attn", key_in, feats).unwrap();
        decoder_layer(g, p, "decoder.layers.0", 2, x, pe, kv, Some(mask.clone())).unwrap()
    };
    let wrt_inputs = gradcheck(&[x.clone(), pe.clone(), feats.clone(), fpe.clone()], |g, v| {
        layer(g, &params, v[0], v[1], v[2], v[3])
    });
    let mut layer_only = params.clone();
    layer_only.set_all_frozen(true);
    layer_only.set_frozen_prefix("decoder.layers.0", false);
    let weights = random_tensor(&[3, 8], -1.0, 1.0, &mut rng(12));
    let wrt_params = gradcheck_params(&layer_only, |g, p| {
        let (x, pe, feats, fpe) = (
            g.constant(x.clone()),
            g.constant(pe.clone()),
            g.constant(feats.clone()),
            g.constant(fpe.clone()),
        );
        let y = layer(g, p, x, pe, feats, fpe);
        let w = g.constant(weights.clone());
        let yw = g.mul(y, w).unwrap();
        g.sum(yw)
    });
    (wrt_inputs, wrt_params)
}

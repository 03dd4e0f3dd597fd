//! Adaptive Query Router, the query partition, routed multi-expert decoding,
//! and the confidence-selection baseline.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::decoder::{
    decode_detections, expert_decode, init_mha, layer_norm, linear, memory_slice, mha, predict_heads, project_memory,
    CostCounter, Detection, KeyValue, Modality,
};
use crate::encode::SceneStats;
use crate::error::{dim_err, Result};
use crate::model::Model;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const ROUTER_PREFIX: &str = "router.";

pub fn init_router_params<R: Rng>(params: &mut ParamSet, d: usize, rng: &mut R) -> Result<()> {
    init_mha(params, "router.attn", d, false, rng)?;
    params.insert("router.norm.gain", Tensor::full(&[d], 1.0))?;
    params.insert("router.norm.bias", Tensor::zeros(&[d]))?;
    params.insert_xavier("router.out.weight", d, 3, rng)?;
    params.insert("router.out.bias", Tensor::zeros(&[3]))?;
    Ok(())
}

/// Router logits `N x 3`: one masked cross-attention layer over `F'_lc`
/// with zero content queries positioned by the query embedding, then a
/// linear classifier.
#[allow(clippy::too_many_arguments)]
pub fn aqr_forward(
    g: &mut Graph,
    params: &ParamSet,
    heads: usize,
    query_embed: Var,
    query_pe: Var,
    feats: Var,
    feat_pe: Var,
    mask: Arc<AttnMask>,
) -> Result<Var> {
    let q_in = g.add(query_embed, query_pe)?;
    let key_in = g.add(feats, feat_pe)?;
    let kv = KeyValue::project(g, params, "router.attn", key_in, feats)?;
    let a = mha(g, params, "router.attn", heads, q_in, kv, Some(mask))?;
    let h = layer_norm(g, params, "router.norm", a)?;
    linear(g, params, "router.out", h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub logits: [f64; 3],
    /// `[p_l, p_c, p_lc]`
    pub probs: [f64; 3],
    pub expert: Modality,
}

/// Argmax over `[l, c, lc]` scores with exact ties going to lc, then l.
pub fn argmax_expert(s: [f64; 3]) -> Modality {
    let [l, c, lc] = s;
    if lc >= l && lc >= c {
        Modality::Fused
    } else if l >= c {
        Modality::Lidar
    } else {
        Modality::Camera
    }
}

impl RouteDecision {
    pub fn from_logits(logits: [f64; 3]) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = logits.map(|x| (x - m).exp());
        let z: f64 = e.iter().sum();
        Self {
            logits,
            probs: e.map(|x| x / z),
            expert: argmax_expert(logits),
        }
    }

    pub fn from_probs(probs: [f64; 3]) -> Self {
        Self {
            logits: probs.map(f64::ln),
            probs,
            expert: argmax_expert(probs),
        }
    }
}

pub fn decisions_from_logits(logits: &Tensor) -> Vec<RouteDecision> {
    (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            RouteDecision::from_logits([r[0], r[1], r[2]])
        })
        .collect()
}

/// Query indices per expert, each ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub lidar: Vec<usize>,
    pub camera: Vec<usize>,
    pub fused: Vec<usize>,
}

impl Partition {
    pub fn get(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Lidar => &self.lidar,
            Modality::Camera => &self.camera,
            Modality::Fused => &self.fused,
        }
    }

    pub fn all_fused(n: usize) -> Self {
        Self {
            fused: (0..n).collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.lidar.len() + self.camera.len() + self.fused.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn partition(decisions: &[RouteDecision]) -> Partition {
    let mut p = Partition::default();
    for (i, d) in decisions.iter().enumerate() {
        match d.expert {
            Modality::Lidar => p.lidar.push(i),
            Modality::Camera => p.camera.push(i),
            Modality::Fused => p.fused.push(i),
        }
    }
    p
}

/// Closed-form cross-attention cost of a partition.
pub fn partition_cost(p: &Partition, model: &Model) -> u64 {
    Modality::ALL
        .iter()
        .map(|&m| (p.get(m).len() * m.slice_len(&model.layout)) as u64)
        .sum()
}

/// Router logits for one scene on a fresh graph.
pub fn route_scene(model: &Model, stats: &SceneStats) -> Result<Vec<RouteDecision>> {
    let mut g = Graph::new();
    let logits = router_logits(&mut g, model, stats)?;
    Ok(decisions_from_logits(g.value(logits)))
}

pub fn router_logits(g: &mut Graph, model: &Model, stats: &SceneStats) -> Result<Var> {
    let (bundle, fpe) = model.features(g, stats)?;
    let embed = g.param_by_name(&model.params, "query.embed")?;
    let qpe = g.constant(model.queries.pe.clone());
    aqr_forward(
        g,
        &model.params,
        model.config.decoder.heads,
        embed,
        qpe,
        bundle.all,
        fpe,
        model.mask.clone(),
    )
}

/// Decoded detections, routing and cost of one scene.
#[derive(Clone, Debug)]
pub struct MedOutput {
    /// Indexed by query.
    pub detections: Vec<Detection>,
    pub decisions: Vec<RouteDecision>,
    pub partition: Partition,
    pub cost: CostCounter,
}

/// Decode queries grouped by `partition`, each group through its expert,
/// and merge by query index.
pub fn decode_partitioned(
    model: &Model,
    stats: &SceneStats,
    part: &Partition,
) -> Result<(Vec<Detection>, CostCounter)> {
    let n = model.num_queries();
    if part.len() != n {
        return Err(dim_err!("partition covers {} of {n} queries", part.len()));
    }
    let cfg = &model.config.decoder;
    let mut g = Graph::new();
    let (bundle, fpe) = model.features(&mut g, stats)?;
    let memory = project_memory(&mut g, &model.params, cfg, bundle.all, fpe)?;
    let embed = g.param_by_name(&model.params, "query.embed")?;
    let qpe_all = g.constant(model.queries.pe.clone());
    let mut cost = CostCounter::default();
    let mut merged: Vec<Option<Detection>> = vec![None; n];
    for m in Modality::ALL {
        let ids = part.get(m);
        if ids.is_empty() {
            continue;
        }
        let mem = memory_slice(&mut g, &memory, m, &model.layout)?;
        let tgt = g.gather_rows(embed, ids)?;
        let qpe = g.gather_rows(qpe_all, ids)?;
        let Some(x) = expert_decode(
            &mut g,
            &model.params,
            cfg,
            tgt,
            qpe,
            &mem,
            model.expert_mask(ids, m),
            &mut cost,
        )?
        else {
            continue;
        };
        let refs: Vec<[f64; 3]> = ids.iter().map(|&i| model.queries.refs[i]).collect();
        let out = predict_heads(&mut g, &model.params, cfg, x, &refs)?;
        for det in decode_detections(g.value(out.logits), g.value(out.boxes), ids, &model.config.range) {
            let q = det.query;
            merged[q] = Some(det);
        }
    }
    let dets = merged
        .into_iter()
        .map(|d| d.expect("every query decoded once"))
        .collect();
    Ok((dets, cost))
}

/// Route, partition, decode each group through its expert, merge.
pub fn med_decode(model: &Model, stats: &SceneStats) -> Result<MedOutput> {
    let decisions = route_scene(model, stats)?;
    let part = partition(&decisions);
    let (detections, cost) = decode_partitioned(model, stats, &part)?;
    Ok(MedOutput {
        detections,
        decisions,
        partition: part,
        cost,
    })
}

/// Every query through one expert.
pub fn single_decode(model: &Model, stats: &SceneStats, m: Modality) -> Result<(Vec<Detection>, CostCounter)> {
    let n = model.num_queries();
    let mut part = Partition::default();
    match m {
        Modality::Lidar => part.lidar = (0..n).collect(),
        Modality::Camera => part.camera = (0..n).collect(),
        Modality::Fused => part.fused = (0..n).collect(),
    }
    decode_partitioned(model, stats, &part)
}

/// Detections of every query under every expert, indexed `[expert][query]`.
pub fn decode_all_experts(model: &Model, stats: &SceneStats) -> Result<([Vec<Detection>; 3], CostCounter)> {
    let mut cost = CostCounter::default();
    let mut out: [Vec<Detection>; 3] = Default::default();
    for m in Modality::ALL {
        let (d, c) = single_decode(model, stats, m)?;
        cost.pairs += c.pairs;
        out[m.index()] = d;
    }
    Ok((out, cost))
}

/// Per query, the expert output with the highest class score.
pub fn select_by_confidence(per_expert: &[Vec<Detection>; 3]) -> Vec<Detection> {
    let n = per_expert[0].len();
    (0..n)
        .map(|q| {
            let mut best = &per_expert[Modality::Fused.index()][q];
            for m in [Modality::Lidar, Modality::Camera] {
                let cand = &per_expert[m.index()][q];
                if cand.best_score() > best.best_score() {
                    best = cand;
                }
            }
            best.clone()
        })
        .collect()
}

/// Decode all queries through all experts and keep, per query, the most
/// confident expert's detection.
pub fn baseline_confidence_select(model: &Model, stats: &SceneStats) -> Result<(Vec<Detection>, CostCounter)> {
    let (all, cost) = decode_all_experts(model, stats)?;
    Ok((select_by_confidence(&all), cost))
}

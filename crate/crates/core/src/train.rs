//! Bipartite matching, detection and routing losses, sensor-drop sampling,
//! and the two training stages.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{focal_term, Graph, Var};
use crate::corruption::{apply_lidar_drop, apply_view_drop};
use crate::decoder::{expert_decode, memory_slice, predict_heads, project_memory, CostCounter, Modality, BOX_DIMS};
use crate::encode::SceneStats;
use crate::error::{config_err, Result};
use crate::geometry::PcRange;
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerKind};
use crate::routing::{argmax_expert, router_logits, ROUTER_PREFIX};
use crate::scene::{GtBox, Scene};
use crate::tensor::Tensor;

// ---- matching --------------------------------------------------------------

/// Assignment of every ground truth to a distinct query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// `gt_to_query[g]` is the query matched to ground truth `g`.
    pub gt_to_query: Vec<usize>,
    pub num_queries: usize,
}

impl MatchResult {
    /// Per query, the matched ground truth, or `None` for no-object.
    pub fn query_to_gt(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_queries];
        for (g, &q) in self.gt_to_query.iter().enumerate() {
            out[q] = Some(g);
        }
        out
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.gt_to_query.iter().enumerate().map(|(g, &q)| cost[g][q]).sum()
    }
}

/// Minimum-cost assignment of `G` rows to distinct columns of a `G x N`
/// cost matrix (`G <= N`), by shortest augmenting paths with potentials.
pub fn hungarian_match(cost: &[Vec<f64>], num_queries: usize) -> Result<MatchResult> {
    let g = cost.len();
    let n = num_queries;
    if g > n {
        return Err(config_err!("cannot match {g} ground truths to {n} queries"));
    }
    if cost.iter().any(|r| r.len() != n || r.iter().any(|c| !c.is_finite())) {
        return Err(config_err!("cost matrix must be {g}x{n} and finite"));
    }
    // 1-based potentials over rows (u) and columns (v); way[j] is the
    // previous column on the augmenting path, p[j] the row owning column j.
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=g {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut gt_to_query = vec![0; g];
    for j in 1..=n {
        if p[j] != 0 {
            gt_to_query[p[j] - 1] = j - 1;
        }
    }
    Ok(MatchResult {
        gt_to_query,
        num_queries: n,
    })
}

// ---- losses ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Per-target weights inside the box L1 term, in `box_target` order.
    pub code_weights: [f64; BOX_DIMS],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 2.0,
            box_weight: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            code_weights: [20.0, 20.0, 5.0, 1.0, 1.0, 1.0, 0.25, 0.25],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.cls_weight)
            || !finite_nonneg(self.box_weight)
            || !self.code_weights.iter().all(|&w| finite_nonneg(w))
        {
            return Err(config_err!("loss weights must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || !finite_nonneg(self.focal_gamma) {
            return Err(config_err!("focal alpha must lie in [0, 1] and gamma be non-negative"));
        }
        Ok(())
    }
}

/// Regression target `[cx, cy, cz (normalised), ln w, ln l, ln h, sin θ, cos θ]`.
pub fn box_target(b: &GtBox, range: &PcRange) -> [f64; BOX_DIMS] {
    let c = range.normalize(b.center);
    [
        c[0],
        c[1],
        c[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Weighted mean absolute difference over the regression targets.
pub fn l1_box_distance(pred: &[f64], target: &[f64; BOX_DIMS], weights: &[f64; BOX_DIMS]) -> f64 {
    pred.iter()
        .zip(target)
        .zip(weights)
        .map(|((a, b), w)| w * (a - b).abs())
        .sum::<f64>()
        / BOX_DIMS as f64
}

/// `G x N` matching cost: weighted focal cost of the GT class plus
/// weighted L1 box distance.
pub fn matching_cost(
    logits: &Tensor,
    boxes: &Tensor,
    targets: &[(usize, [f64; BOX_DIMS])],
    cfg: &LossConfig,
) -> Vec<Vec<f64>> {
    let n = logits.rows();
    targets
        .iter()
        .map(|(cls, t)| {
            (0..n)
                .map(|q| {
                    let p = crate::decoder::sigmoid(logits.at(q, *cls));
                    let pos = focal_term(p, 1.0, cfg.focal_alpha, cfg.focal_gamma);
                    let neg = focal_term(p, 0.0, cfg.focal_alpha, cfg.focal_gamma);
                    cfg.cls_weight * (pos - neg) + cfg.box_weight * l1_box_distance(boxes.row(q), t, &cfg.code_weights)
                })
                .collect()
        })
        .collect()
}

/// Detection loss of one expert's predictions against one scene's boxes.
/// Returns the loss variable and the match.
pub fn detection_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    gts: &[GtBox],
    range: &PcRange,
    cfg: &LossConfig,
) -> Result<(Var, MatchResult)> {
    let n = g.shape(logits)[0];
    let k = g.shape(logits)[1];
    let targets: Vec<(usize, [f64; BOX_DIMS])> = gts.iter().map(|b| (b.class_id, box_target(b, range))).collect();
    if let Some(b) = gts.iter().find(|b| b.class_id >= k) {
        return Err(config_err!(
            "ground-truth class {} outside the {k} model classes",
            b.class_id
        ));
    }
    let cost = matching_cost(g.value(logits), g.value(boxes), &targets, cfg);
    let m = hungarian_match(&cost, n)?;
    let mut cls_t = Tensor::zeros(&[n, k]);
    for (gi, &q) in m.gt_to_query.iter().enumerate() {
        cls_t.row_mut(q)[targets[gi].0] = 1.0;
    }
    let focal = g.focal_loss(logits, &cls_t, cfg.focal_alpha, cfg.focal_gamma)?;
    let norm = gts.len().max(1) as f64;
    let mut loss = g.scale(focal, cfg.cls_weight / norm);
    if !gts.is_empty() {
        let pred = g.gather_rows(boxes, &m.gt_to_query)?;
        let tgt_rows: Vec<Vec<f64>> = targets.iter().map(|(_, t)| t.to_vec()).collect();
        let tgt = g.constant(Tensor::from_rows(&tgt_rows)?);
        let diff = g.sub(pred, tgt)?;
        let mut w = Tensor::zeros(&[gts.len(), BOX_DIMS]);
        for i in 0..gts.len() {
            w.row_mut(i).copy_from_slice(&cfg.code_weights);
        }
        let w = g.constant(w);
        let diff = g.mul(diff, w)?;
        let abs = g.abs(diff);
        let l1 = g.sum(abs);
        let l1 = g.scale(l1, cfg.box_weight / (BOX_DIMS as f64 * gts.len() as f64));
        loss = g.add(loss, l1)?;
    }
    Ok((loss, m))
}

// ---- sensor drops ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropState {
    None,
    LidarDropped,
    CameraDropped,
}

impl DropState {
    pub const ALL: [DropState; 3] = [DropState::None, DropState::LidarDropped, DropState::CameraDropped];

    /// One-hot routing label `[y_l, y_c, y_lc]`.
    pub fn route_label(self) -> [f64; 3] {
        match self {
            DropState::LidarDropped => [0.0, 1.0, 0.0],
            DropState::CameraDropped => [1.0, 0.0, 0.0],
            DropState::None => [0.0, 0.0, 1.0],
        }
    }

    pub fn target_expert(self) -> Modality {
        argmax_expert(self.route_label())
    }

    /// Remove the dropped modality from a raw scene.
    pub fn apply(self, scene: &Scene) -> Scene {
        match self {
            DropState::None => scene.clone(),
            DropState::LidarDropped => apply_lidar_drop(scene),
            DropState::CameraDropped => {
                let all: Vec<usize> = (0..scene.rig.views()).collect();
                apply_view_drop(scene, &all).expect("views in range")
            }
        }
    }
}

pub fn sample_drop<R: Rng>(rng: &mut R) -> DropState {
    DropState::ALL[rng.gen_range(0..3)]
}

// ---- training steps --------------------------------------------------------

/// A training example: clean scene statistics and ground truth.
#[derive(Clone, Debug)]
pub struct Example {
    pub stats: SceneStats,
    pub boxes: Vec<GtBox>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Losses {
    pub lidar: f64,
    pub camera: f64,
    pub fused: f64,
    pub total: f64,
}

/// Per-expert detection losses of one scene with all queries decoded by
/// each expert. Returns `[L_l, L_c, L_lc]` as graph variables.
pub fn expert_losses(g: &mut Graph, model: &Model, ex: &Example, loss_cfg: &LossConfig) -> Result<[Var; 3]> {
    let cfg = &model.config.decoder;
    let (bundle, fpe) = model.features(g, &ex.stats)?;
    let memory = project_memory(g, &model.params, cfg, bundle.all, fpe)?;
    let embed = g.param_by_name(&model.params, "query.embed")?;
    let qpe = g.constant(model.queries.pe.clone());
    let mut out = Vec::with_capacity(3);
    let mut cost = CostCounter::default();
    let all: Vec<usize> = (0..model.num_queries()).collect();
    for m in Modality::ALL {
        let mem = memory_slice(g, &memory, m, &model.layout)?;
        let mask = model.expert_mask(&all, m);
        let x = expert_decode(g, &model.params, cfg, embed, qpe, &mem, mask, &mut cost)?.expect("non-empty query set");
        let heads = predict_heads(g, &model.params, cfg, x, &model.queries.refs)?;
        let (loss, _) = detection_loss(g, heads.logits, heads.boxes, &ex.boxes, &model.config.range, loss_cfg)?;
        out.push(loss);
    }
    Ok([out[0], out[1], out[2]])
}

/// One stage-1 update: every expert decodes every query of every clean
/// scene; `L_1st = L_l + L_c + L_lc` averaged over the batch.
pub fn stage1_step(
    model: &mut Model,
    batch: &[&Example],
    opt: &mut Optimizer,
    loss_cfg: &LossConfig,
) -> Result<Stage1Losses> {
    model.params.set_all_frozen(false);
    model.params.set_frozen_prefix(ROUTER_PREFIX, true);
    let mut agg = Stage1Losses::default();
    let b = batch.len().max(1) as f64;
    for ex in batch {
        let mut g = Graph::new();
        let [l, c, lc] = expert_losses(&mut g, model, ex, loss_cfg)?;
        let s = g.add(l, c)?;
        let total = g.add(s, lc)?;
        let total = g.scale(total, 1.0 / b);
        agg.lidar += g.value(l).data()[0] / b;
        agg.camera += g.value(c).data()[0] / b;
        agg.fused += g.value(lc).data()[0] / b;
        g.backward(total)?;
        g.accumulate_grads(&mut model.params);
    }
    agg.total = agg.lidar + agg.camera + agg.fused;
    opt.step(&mut model.params);
    Ok(agg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Losses {
    /// `Σ_i CE(y_i, p_i)` averaged over the batch.
    pub loss: f64,
    /// Fraction of queries whose argmax matches the label.
    pub route_accuracy: f64,
}

/// Router cross-entropy of one scene under a drop state.
pub fn routing_loss(g: &mut Graph, model: &Model, stats: &SceneStats, state: DropState) -> Result<(Var, usize)> {
    let logits = router_logits(g, model, stats)?;
    let n = model.num_queries();
    let label = state.route_label();
    let mut t = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        t.row_mut(i).copy_from_slice(&label);
    }
    let target = state.target_expert();
    let lv = g.value(logits);
    let correct = (0..n)
        .filter(|&i| {
            let r = lv.row(i);
            argmax_expert([r[0], r[1], r[2]]) == target
        })
        .count();
    Ok((g.softmax_cross_entropy(logits, &t)?, correct))
}

/// One stage-2 update: only router parameters move.
pub fn stage2_step(model: &mut Model, batch: &[(&SceneStats, DropState)], opt: &mut Optimizer) -> Result<Stage2Losses> {
    model.params.set_all_frozen(true);
    model.params.set_frozen_prefix(ROUTER_PREFIX, false);
    let b = batch.len().max(1) as f64;
    let mut out = Stage2Losses::default();
    let mut correct = 0;
    for (stats, state) in batch {
        let mut g = Graph::new();
        let (ce, ok) = routing_loss(&mut g, model, stats, *state)?;
        correct += ok;
        out.loss += g.value(ce).data()[0] / b;
        let scaled = g.scale(ce, 1.0 / b);
        g.backward(scaled)?;
        g.accumulate_grads(&mut model.params);
    }
    out.route_accuracy = correct as f64 / (batch.len() * model.num_queries()).max(1) as f64;
    opt.step(&mut model.params);
    Ok(out)
}

// ---- drivers ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub log_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            stage1_steps: 1000,
            stage2_steps: 300,
            batch: 2,
            seed: 0,
            log_every: 50,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.log_every == 0 {
            return Err(config_err!("lr, batch and log_every must be positive"));
        }
        self.loss.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub step: usize,
    pub l_l: Option<f64>,
    pub l_c: Option<f64>,
    pub l_lc: Option<f64>,
    pub l_2nd: Option<f64>,
    pub route_accuracy: Option<f64>,
}

/// Yields minibatches of indices from reshuffled passes over `0..len`.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(len: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..len).collect(),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Stage 1 on clean scenes. `on_log` receives each logged row.
pub fn train_stage1(
    model: &mut Model,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(config_err!("stage 1 needs at least one scene"));
    }
    let examples: Vec<Example> = scenes
        .iter()
        .map(|s| Example {
            stats: model.stats(s),
            boxes: s.boxes.clone(),
        })
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let mut batcher = Batcher::new(examples.len(), cfg.seed);
    let mut log = Vec::new();
    let mut acc = Stage1Losses::default();
    let mut since = 0;
    for step in 1..=cfg.stage1_steps {
        let idx = batcher.next(cfg.batch);
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let l = stage1_step(model, &batch, &mut opt, &cfg.loss)?;
        acc.lidar += l.lidar;
        acc.camera += l.camera;
        acc.fused += l.fused;
        since += 1;
        if step % cfg.log_every == 0 || step == cfg.stage1_steps {
            let k = since as f64;
            let row = LogRow {
                stage: 1,
                step,
                l_l: Some(acc.lidar / k),
                l_c: Some(acc.camera / k),
                l_lc: Some(acc.fused / k),
                ..LogRow::default()
            };
            on_log(&row);
            log.push(row);
            acc = Stage1Losses::default();
            since = 0;
        }
    }
    model.params.set_all_frozen(false);
    Ok(log)
}

/// Statistics of a scene under each drop state, in `DropState::ALL` order.
pub fn drop_variants(model: &Model, scene: &Scene) -> [SceneStats; 3] {
    DropState::ALL.map(|s| model.stats(&s.apply(scene)))
}

/// Stage 2: sensor-drop augmentation, router-only updates.
pub fn train_stage2(
    model: &mut Model,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(config_err!("stage 2 needs at least one scene"));
    }
    let variants: Vec<[SceneStats; 3]> = scenes.iter().map(|s| drop_variants(model, s)).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let mut batcher = Batcher::new(variants.len(), cfg.seed ^ 0x5eed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut log = Vec::new();
    let (mut loss, mut accu, mut since) = (0.0, 0.0, 0);
    for step in 1..=cfg.stage2_steps {
        let idx = batcher.next(cfg.batch);
        let batch: Vec<(&SceneStats, DropState)> = idx
            .iter()
            .map(|&i| {
                let s = sample_drop(&mut drop_rng);
                let k = DropState::ALL.iter().position(|&x| x == s).expect("state");
                (&variants[i][k], s)
            })
            .collect();
        let r = stage2_step(model, &batch, &mut opt)?;
        loss += r.loss;
        accu += r.route_accuracy;
        since += 1;
        if step % cfg.log_every == 0 || step == cfg.stage2_steps {
            let k = since as f64;
            let row = LogRow {
                stage: 2,
                step,
                l_2nd: Some(loss / k),
                route_accuracy: Some(accu / k),
                ..LogRow::default()
            };
            on_log(&row);
            log.push(row);
            (loss, accu, since) = (0.0, 0.0, 0);
        }
    }
    model.params.set_all_frozen(false);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_small_examples() {
        let id = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        assert_eq!(hungarian_match(&id, 3).unwrap().gt_to_query, [0, 1, 2]);
        let sep = vec![vec![5.0, 0.5, 9.0, 7.0], vec![3.0, 8.0, 8.0, 0.1]];
        assert_eq!(hungarian_match(&sep, 4).unwrap().gt_to_query, [1, 3]);
        assert!(hungarian_match(&sep, 1).is_err());
        assert_eq!(hungarian_match(&[], 4).unwrap().gt_to_query, Vec::<usize>::new());
    }

    #[test]
    fn route_labels() {
        assert_eq!(DropState::LidarDropped.route_label(), [0.0, 1.0, 0.0]);
        assert_eq!(DropState::CameraDropped.route_label(), [1.0, 0.0, 0.0]);
        assert_eq!(DropState::None.route_label(), [0.0, 0.0, 1.0]);
        assert_eq!(DropState::LidarDropped.target_expert(), Modality::Camera);
    }

    #[test]
    fn sample_drop_is_uniform_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            let s = sample_drop(&mut rng);
            counts[DropState::ALL.iter().position(|&x| x == s).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
        let a: Vec<_> = (0..20)
            .map({
                let mut r = ChaCha8Rng::seed_from_u64(4);
                move |_| sample_drop(&mut r)
            })
            .collect();
        let b: Vec<_> = (0..20)
            .map({
                let mut r = ChaCha8Rng::seed_from_u64(4);
                move |_| sample_drop(&mut r)
            })
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn l1_single_coordinate_offset() {
        let t = [0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 1.0];
        let w = [1.0; BOX_DIMS];
        let mut p = t.to_vec();
        assert_eq!(l1_box_distance(&p, &t, &w), 0.0);
        p[4] += 0.4;
        assert!((l1_box_distance(&p, &t, &w) - 0.05).abs() < 1e-15);
    }
}

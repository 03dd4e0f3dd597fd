//! Dataset synthesis and method-under-scenario evaluation shared by the
//! command line and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionSpec;
use crate::decoder::Modality;
use crate::encode::class_names;
use crate::error::Result;
use crate::eval::{evaluate, route_statistics, EvalConfig, MetricsReport, RouteStats, SceneResult};
use crate::model::Model;
use crate::routing::{
    baseline_confidence_select, med_decode, partition, partition_cost, route_scene, single_decode, RouteDecision,
};
use crate::scene::{generate_scene, mix_seed, Scene, SceneConfig};

/// `count` scenes with ids `first_id..` and seeds derived from `seed`.
pub fn synth_scenes(cfg: &SceneConfig, model: &Model, count: usize, first_id: u64, seed: u64) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| {
            let id = first_id + i;
            generate_scene(cfg, &model.config.range, &model.rig, id, mix_seed(seed, id))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Routed multi-expert decoding.
    Med,
    /// All experts, keep the most confident output per query.
    Confidence,
    /// Every query through one expert.
    Single(Modality),
}

impl Method {
    pub fn label(self) -> String {
        match self {
            Method::Med => "med".into(),
            Method::Confidence => "confidence".into(),
            Method::Single(m) => format!("single_{}", m.short()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodResult {
    pub scenario: String,
    pub method: String,
    pub report: MetricsReport,
    /// Present for routed decoding.
    pub routes: Option<RouteStats>,
    /// Attended key/value pairs summed over scenes.
    pub cost: u64,
}

/// Corrupt every scene, decode with `method`, and score.
pub fn run_method(
    model: &Model,
    scenes: &[Scene],
    spec: &CorruptionSpec,
    method: Method,
    eval_cfg: &EvalConfig,
) -> Result<MethodResult> {
    let mut results = Vec::with_capacity(scenes.len());
    let mut decisions: Vec<RouteDecision> = Vec::new();
    let mut cost = 0;
    for scene in scenes {
        let corrupted = spec.apply(scene)?;
        let stats = model.stats(&corrupted);
        let (detections, c) = match method {
            Method::Med => {
                let out = med_decode(model, &stats)?;
                decisions.extend(out.decisions);
                (out.detections, out.cost)
            }
            Method::Confidence => baseline_confidence_select(model, &stats)?,
            Method::Single(m) => single_decode(model, &stats, m)?,
        };
        cost += c.pairs;
        results.push(SceneResult {
            detections,
            gts: scene.boxes.clone(),
        });
    }
    let names = class_names(model.config.decoder.num_classes);
    Ok(MethodResult {
        scenario: spec.to_string(),
        method: method.label(),
        report: evaluate(&results, &names, eval_cfg)?,
        routes: (method == Method::Med).then(|| route_statistics(&decisions)),
        cost,
    })
}

/// Routing allocation only, without decoding.
pub fn route_scenario(model: &Model, scenes: &[Scene], spec: &CorruptionSpec) -> Result<RouteStats> {
    let mut decisions = Vec::new();
    for scene in scenes {
        let stats = model.stats(&spec.apply(scene)?);
        decisions.extend(crate::routing::route_scene(model, &stats)?);
    }
    Ok(route_statistics(&decisions))
}

/// Attended key/value pairs summed over a scene set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub scenario: String,
    pub scenes: usize,
    /// Every query through the lc expert.
    pub single: u64,
    /// Every query through all three experts.
    pub parallel: u64,
    /// Routed decoding.
    pub med: u64,
    pub med_ratio: f64,
    pub parallel_ratio: f64,
}

/// Decode cost of the three strategies, from the router's partitions.
pub fn bench_cost(model: &Model, scenes: &[Scene], spec: &CorruptionSpec) -> Result<CostReport> {
    let n = model.num_queries() as u64;
    let lens = Modality::ALL.map(|m| m.slice_len(&model.layout) as u64);
    let (mut single, mut parallel, mut med) = (0, 0, 0);
    for scene in scenes {
        let stats = model.stats(&spec.apply(scene)?);
        let part = partition(&route_scene(model, &stats)?);
        single += n * lens[Modality::Fused.index()];
        parallel += n * lens.iter().sum::<u64>();
        med += partition_cost(&part, model);
    }
    let ratio = |x: u64| if single == 0 { 0.0 } else { x as f64 / single as f64 };
    Ok(CostReport {
        scenario: spec.to_string(),
        scenes: scenes.len(),
        single,
        parallel,
        med,
        med_ratio: ratio(med),
        parallel_ratio: ratio(parallel),
    })
}

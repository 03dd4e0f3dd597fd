//! Detection metrics at BEV centre-distance thresholds, NDS-lite, the
//! relative performance ratio, and routing allocation statistics.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::decoder::{Detection, Modality};
use crate::error::{config_err, MomeError, Result};
use crate::routing::RouteDecision;
use crate::scene::GtBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// BEV centre-distance thresholds in metres, ascending.
    pub thresholds: Vec<f64>,
    /// Detections scoring at or below this are discarded.
    pub score_floor: f64,
    /// Threshold at which true positives feed the error metrics.
    pub tp_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            score_floor: 0.0,
            tp_threshold: 2.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.windows(2).any(|w| !(w[0] < w[1]))
            || self.thresholds.iter().any(|t| !(*t > 0.0))
        {
            return Err(config_err!("thresholds must be positive and strictly ascending"));
        }
        Ok(())
    }
}

/// Normalisers of the translation, scale and orientation errors.
pub const ERROR_NORMS: [f64; 3] = [0.5, 0.5, FRAC_PI_2];

/// Detections and ground truth of one scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub detections: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

/// A single scored box hypothesis for one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub scene: usize,
    pub score: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

pub fn bev_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Greedy matching outcome for one class at one threshold.
#[derive(Clone, Debug, Default)]
pub struct ClassMatches {
    /// True/false positive flag of each hypothesis in descending score order.
    pub tp: Vec<bool>,
    /// `(hypothesis, ground truth)` pairs of the true positives.
    pub pairs: Vec<(ScoredBox, GtBox)>,
    pub num_gt: usize,
}

fn class_hypotheses(results: &[SceneResult], class: usize, floor: f64) -> Vec<ScoredBox> {
    let mut out: Vec<ScoredBox> = results
        .iter()
        .enumerate()
        .flat_map(|(s, r)| {
            r.detections.iter().filter_map(move |d| {
                let score = *d.scores.get(class)?;
                (score > floor).then_some(ScoredBox {
                    scene: s,
                    score,
                    center: d.center,
                    size: d.size,
                    yaw: d.yaw,
                })
            })
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Sort by score, then match each hypothesis to the nearest still unmatched
/// ground truth of the class in its scene whose BEV distance is below `d`.
pub fn match_class(results: &[SceneResult], class: usize, d: f64, floor: f64) -> ClassMatches {
    let hyps = class_hypotheses(results, class, floor);
    let mut used: Vec<Vec<bool>> = results.iter().map(|r| vec![false; r.gts.len()]).collect();
    let num_gt = results
        .iter()
        .map(|r| r.gts.iter().filter(|g| g.class_id == class).count())
        .sum();
    let mut m = ClassMatches {
        num_gt,
        ..ClassMatches::default()
    };
    for h in hyps {
        let gts = &results[h.scene].gts;
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| g.class_id == class && !used[h.scene][*j])
            .map(|(j, g)| (j, bev_distance(h.center, g.center)))
            .filter(|&(_, dist)| dist < d)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, _)) => {
                used[h.scene][j] = true;
                m.tp.push(true);
                m.pairs.push((h, gts[j].clone()));
            }
            None => m.tp.push(false),
        }
    }
    m
}

/// 101-point interpolated AP from a ranked TP/FP list.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    // Precision envelope: best precision at any recall at least as large.
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while j < rec.len() && rec[j] < r {
            j += 1;
        }
        if j < rec.len() {
            sum += prec[j];
        }
    }
    sum / 101.0
}

/// AP of one class at threshold `d`; `None` when the class has no ground truth.
pub fn ap_at_threshold(results: &[SceneResult], class: usize, d: f64, floor: f64) -> Option<f64> {
    let m = match_class(results, class, d, floor);
    (m.num_gt > 0).then(|| interpolated_ap(&m.tp, m.num_gt))
}

/// Absolute yaw difference wrapped into `[0, π]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// `1 - IoU` of two boxes aligned at a common centre and heading.
pub fn scale_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    1.0 - inter / (va + vb - inter)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    /// AP per threshold, in threshold order.
    pub ap: Vec<f64>,
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground truth.
    pub classes: Vec<ClassMetrics>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub nds: f64,
}

pub fn nds_lite(map: f64, ate: f64, ase: f64, aoe: f64) -> f64 {
    let tp: f64 = [ate, ase, aoe]
        .iter()
        .zip(ERROR_NORMS)
        .map(|(e, n)| 1.0 - (e / n).min(1.0))
        .sum();
    (3.0 * map + tp) / 6.0
}

pub fn evaluate(results: &[SceneResult], class_names: &[&str], cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut classes = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let mut ap = Vec::with_capacity(cfg.thresholds.len());
        let mut num_gt = 0;
        for &d in &cfg.thresholds {
            let m = match_class(results, c, d, cfg.score_floor);
            num_gt = m.num_gt;
            ap.push(interpolated_ap(&m.tp, m.num_gt));
        }
        if num_gt == 0 {
            continue;
        }
        let m = match_class(results, c, cfg.tp_threshold, cfg.score_floor);
        let errs = if m.pairs.is_empty() {
            ERROR_NORMS
        } else {
            let k = m.pairs.len() as f64;
            let mut e = [0.0; 3];
            for (h, g) in &m.pairs {
                e[0] += bev_distance(h.center, g.center) / k;
                e[1] += scale_error(h.size, g.size) / k;
                e[2] += yaw_error(h.yaw, g.yaw) / k;
            }
            e
        };
        classes.push(ClassMetrics {
            class_id: c,
            name: name.to_string(),
            num_gt,
            ap,
            ate: errs[0],
            ase: errs[1],
            aoe: errs[2],
        });
    }
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    let map = mean(&|c| c.ap.iter().sum::<f64>() / c.ap.len() as f64);
    let (mate, mase, maoe) = if classes.is_empty() {
        (ERROR_NORMS[0], ERROR_NORMS[1], ERROR_NORMS[2])
    } else {
        (mean(&|c| c.ate), mean(&|c| c.ase), mean(&|c| c.aoe))
    };
    Ok(MetricsReport {
        thresholds: cfg.thresholds.clone(),
        nds: nds_lite(map, mate, mase, maoe),
        classes,
        map,
        mate,
        mase,
        maoe,
    })
}

/// Mean adverse-condition performance and its ratio to clean performance.
pub fn perf_ratio(clean: f64, adverse: &[f64]) -> Result<(f64, f64)> {
    if !(clean > 0.0) {
        return Err(MomeError::Domain(format!(
            "clean performance must be positive, got {clean}"
        )));
    }
    if adverse.is_empty() {
        return Err(MomeError::Domain("no adverse-condition scores".into()));
    }
    let m = adverse.iter().sum::<f64>() / adverse.len() as f64;
    Ok((m, m / clean))
}

/// Expert allocation percentages, ordered `(lc, l, c)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    pub lc: f64,
    pub l: f64,
    pub c: f64,
    pub queries: usize,
}

pub fn route_statistics<'a>(decisions: impl IntoIterator<Item = &'a RouteDecision>) -> RouteStats {
    let mut counts = [0usize; 3];
    for d in decisions {
        counts[d.expert.index()] += 1;
    }
    let n: usize = counts.iter().sum();
    let pct = |m: Modality| {
        if n == 0 {
            0.0
        } else {
            100.0 * counts[m.index()] as f64 / n as f64
        }
    };
    RouteStats {
        lc: pct(Modality::Fused),
        l: pct(Modality::Lidar),
        c: pct(Modality::Camera),
        queries: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x: f64, y: f64, class_id: usize) -> GtBox {
        GtBox {
            center: [x, y, 0.0],
            size: [2.0, 4.0, 1.5],
            yaw: 0.2,
            class_id,
            object_id: 0,
        }
    }

    fn det(x: f64, y: f64, scores: Vec<f64>) -> Detection {
        Detection {
            query: 0,
            center: [x, y, 0.0],
            size: [2.0, 4.0, 1.5],
            yaw: 0.2,
            scores,
        }
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gts = vec![gt(1.0, 1.0, 0), gt(10.0, -4.0, 0)];
        let perfect = SceneResult {
            detections: gts.iter().map(|g| det(g.center[0], g.center[1], vec![1.0])).collect(),
            gts: gts.clone(),
        };
        assert_eq!(ap_at_threshold(std::slice::from_ref(&perfect), 0, 0.5, 0.0), Some(1.0));
        let none = SceneResult {
            detections: vec![],
            gts,
        };
        assert_eq!(ap_at_threshold(&[none], 0, 0.5, 0.0), Some(0.0));
        assert_eq!(ap_at_threshold(std::slice::from_ref(&perfect), 1, 0.5, 0.0), None);
        let r = evaluate(&[perfect], &["car"], &EvalConfig::default()).unwrap();
        assert_eq!(r.map, 1.0);
        assert!((r.nds - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nds_examples() {
        assert!((nds_lite(1.0, 0.0, 0.0, 0.0) - 1.0).abs() < 1e-15);
        assert_eq!(nds_lite(0.0, 9.0, 9.0, 9.0), 0.0);
        assert!((nds_lite(0.6, 0.25, 0.25, PI / 4.0) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn perf_ratio_examples() {
        assert_eq!(perf_ratio(50.0, &[25.0, 25.0]).unwrap(), (25.0, 0.5));
        assert_eq!(perf_ratio(3.0, &[3.0, 3.0, 3.0]).unwrap().1, 1.0);
        assert!(matches!(perf_ratio(0.0, &[1.0]), Err(MomeError::Domain(_))));
    }

    #[test]
    fn route_statistics_examples() {
        let lc = RouteDecision::from_probs([0.1, 0.1, 0.8]);
        let l = RouteDecision::from_probs([0.8, 0.1, 0.1]);
        let s = route_statistics(&[lc, lc, lc, l]);
        assert_eq!((s.lc, s.l, s.c), (75.0, 25.0, 0.0));
        let s = route_statistics(&[lc; 5]);
        assert_eq!((s.lc, s.l, s.c), (100.0, 0.0, 0.0));
    }

    #[test]
    fn yaw_and_scale_errors() {
        assert!((yaw_error(PI - 0.1, -PI + 0.1) - 0.2).abs() < 1e-12);
        assert_eq!(scale_error([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), 0.0);
        assert!((scale_error([1.0, 1.0, 1.0], [2.0, 1.0, 1.0]) - 0.5).abs() < 1e-15);
    }
}

//! Sensor-failure transformations applied to raw scenes before encoding.
//!
//! Spec-string grammar (one corruption per string):
//!
//! | string              | effect                                         |
//! |---------------------|------------------------------------------------|
//! | `clean`             | identity                                       |
//! | `beams=K`           | keep rings `{i·32/K}`, `K ∈ {1,4,8,16,32}`     |
//! | `lidardrop`         | delete every point                             |
//! | `fov=A:B`           | keep points with azimuth in `[A,B]` degrees    |
//! | `objfail=R@seedS`   | drop each box's points with probability `R`    |
//! | `viewdrop=0,1,2`    | zero the listed views (`0-5` ranges allowed)   |
//! | `camdrop`           | zero every view                                |
//! | `occl=PATH`         | JSON list of `{view,u0,v0,u1,v1}` pixel rects  |

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, MomeError, Result};
use crate::scene::{mix_seed, OcclusionRect, Scene, NUM_RINGS};

pub const VALID_BEAMS: [usize; 5] = [1, 4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub enum CorruptionSpec {
    Clean,
    BeamReduction {
        kept: usize,
    },
    LidarDrop,
    LimitedFov {
        min_deg: f64,
        max_deg: f64,
    },
    ObjectFailure {
        rate: f64,
        seed: u64,
    },
    ViewDrop {
        views: Vec<usize>,
    },
    CameraDrop,
    Occlusion {
        source: Option<String>,
        rects: Vec<OcclusionRect>,
    },
}

impl CorruptionSpec {
    /// Parse one spec string; `occl=` reads its rectangle file.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (key, val) = match s.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (s, None),
        };
        let bad = || config_err!("malformed corruption spec {s:?}");
        let spec = match (key, val) {
            ("clean", None) => Self::Clean,
            ("lidardrop", None) => Self::LidarDrop,
            ("camdrop", None) => Self::CameraDrop,
            ("beams", Some(v)) => Self::BeamReduction {
                kept: v.parse().map_err(|_| bad())?,
            },
            ("fov", Some(v)) => {
                let (a, b) = v.split_once(':').ok_or_else(bad)?;
                Self::LimitedFov {
                    min_deg: a.trim().parse().map_err(|_| bad())?,
                    max_deg: b.trim().parse().map_err(|_| bad())?,
                }
            }
            ("objfail", Some(v)) => {
                let (r, seed) = v.split_once('@').ok_or_else(bad)?;
                let seed = seed.trim();
                let seed = seed.strip_prefix("seed").unwrap_or(seed);
                Self::ObjectFailure {
                    rate: r.trim().parse().map_err(|_| bad())?,
                    seed: seed.parse().map_err(|_| bad())?,
                }
            }
            ("viewdrop", Some(v)) => Self::ViewDrop {
                views: parse_view_list(v).ok_or_else(bad)?,
            },
            ("occl", Some(v)) => Self::Occlusion {
                source: Some(v.to_string()),
                rects: load_occlusions(Path::new(v))?,
            },
            _ => return Err(bad()),
        };
        spec.validate(None)?;
        Ok(spec)
    }

    /// Check parameters; `views` additionally bounds view indices.
    pub fn validate(&self, views: Option<usize>) -> Result<()> {
        match self {
            Self::BeamReduction { kept } if !VALID_BEAMS.contains(kept) => {
                Err(config_err!("beam count {kept} not in {VALID_BEAMS:?}"))
            }
            Self::LimitedFov { min_deg, max_deg }
                if !(min_deg < max_deg && *min_deg >= -180.0 && *max_deg <= 180.0) =>
            {
                Err(config_err!(
                    "field of view [{min_deg}, {max_deg}] is not a valid interval"
                ))
            }
            Self::ObjectFailure { rate, .. } if !(0.0..=1.0).contains(rate) => {
                Err(config_err!("object failure rate {rate} outside [0,1]"))
            }
            Self::ViewDrop { views: list } => match views {
                Some(v) if list.iter().any(|&i| i >= v) => {
                    Err(config_err!("view index in {list:?} out of range for {v} views"))
                }
                _ => Ok(()),
            },
            Self::Occlusion { rects, .. } => match views {
                Some(v) if rects.iter().any(|r| r.view >= v) => {
                    Err(config_err!("occlusion rectangle references a view >= {v}"))
                }
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn apply(&self, scene: &Scene) -> Result<Scene> {
        self.validate(Some(scene.rig.views()))?;
        Ok(match self {
            Self::Clean => scene.clone(),
            Self::BeamReduction { kept } => apply_beam_reduction(scene, *kept)?,
            Self::LidarDrop => apply_lidar_drop(scene),
            Self::LimitedFov { min_deg, max_deg } => apply_limited_fov(scene, *min_deg, *max_deg),
            Self::ObjectFailure { rate, seed } => apply_object_failure(scene, *rate, *seed),
            Self::ViewDrop { views } => apply_view_drop(scene, views)?,
            Self::CameraDrop => {
                let all: Vec<usize> = (0..scene.rig.views()).collect();
                apply_view_drop(scene, &all)?
            }
            Self::Occlusion { rects, .. } => apply_occlusion(scene, rects)?,
        })
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Clean => write!(f, "clean"),
            Self::BeamReduction { kept } => write!(f, "beams={kept}"),
            Self::LidarDrop => write!(f, "lidardrop"),
            Self::LimitedFov { min_deg, max_deg } => write!(f, "fov={min_deg}:{max_deg}"),
            Self::ObjectFailure { rate, seed } => write!(f, "objfail={rate}@seed{seed}"),
            Self::ViewDrop { views } => {
                let list: Vec<String> = views.iter().map(|v| v.to_string()).collect();
                write!(f, "viewdrop={}", list.join(","))
            }
            Self::CameraDrop => write!(f, "camdrop"),
            Self::Occlusion { source, rects } => match source {
                Some(p) => write!(f, "occl={p}"),
                None => write!(f, "occl=<{} rects>", rects.len()),
            },
        }
    }
}

fn parse_view_list(v: &str) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    for part in v.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (usize, usize) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
            if a > b {
                return None;
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().ok()?);
        }
    }
    out.sort_unstable();
    out.dedup();
    Some(out)
}

/// Split a comma-separated scenario list. Bare view indices and ranges
/// following a `viewdrop=` entry belong to it, so `clean,viewdrop=0,1,lidardrop`
/// yields three scenarios.
pub fn split_scenarios(list: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let is_view_tok = tok.chars().all(|c| c.is_ascii_digit() || c == '-');
        match out.last_mut() {
            Some(prev) if is_view_tok && prev.starts_with("viewdrop=") => {
                prev.push(',');
                prev.push_str(tok);
            }
            _ => out.push(tok.to_string()),
        }
    }
    out
}

pub fn load_occlusions(path: &Path) -> Result<Vec<OcclusionRect>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| config_err!("cannot read occlusion file {}: {e}", path.display()))?;
    let rects: Vec<OcclusionRect> = serde_json::from_str(&text)?;
    if rects
        .iter()
        .any(|r| ![r.u0, r.v0, r.u1, r.v1].iter().all(|v| v.is_finite()))
    {
        return Err(MomeError::Config("occlusion rectangles must be finite".into()));
    }
    Ok(rects)
}

pub fn kept_rings(k: usize) -> Result<Vec<usize>> {
    if !VALID_BEAMS.contains(&k) {
        return Err(config_err!("beam count {k} not in {VALID_BEAMS:?}"));
    }
    Ok((0..k).map(|i| i * NUM_RINGS / k).collect())
}

pub fn apply_beam_reduction(scene: &Scene, k: usize) -> Result<Scene> {
    let mut keep = [false; NUM_RINGS];
    for r in kept_rings(k)? {
        keep[r] = true;
    }
    let mut out = scene.clone();
    out.points
        .retain(|p| keep.get(p.ring as usize).copied().unwrap_or(false));
    Ok(out)
}

pub fn apply_lidar_drop(scene: &Scene) -> Scene {
    let mut out = scene.clone();
    out.points.clear();
    out
}

pub fn apply_limited_fov(scene: &Scene, min_deg: f64, max_deg: f64) -> Scene {
    let mut out = scene.clone();
    out.points.retain(|p| {
        let a = p.azimuth.to_degrees();
        a >= min_deg && a <= max_deg
    });
    out
}

/// Whether a box fails under `(rate, seed)`; independent per scene and object.
pub fn object_fails(rate: f64, seed: u64, scene_id: u64, object_id: u32) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, scene_id), object_id as u64));
    rng.gen::<f64>() < rate
}

pub fn apply_object_failure(scene: &Scene, rate: f64, seed: u64) -> Scene {
    let failed: Vec<u32> = scene
        .boxes
        .iter()
        .map(|b| b.object_id)
        .filter(|&id| object_fails(rate, seed, scene.scene_id, id))
        .collect();
    let mut out = scene.clone();
    out.points.retain(|p| p.owner.is_none_or(|id| !failed.contains(&id)));
    out
}

pub fn apply_view_drop(scene: &Scene, views: &[usize]) -> Result<Scene> {
    if let Some(&v) = views.iter().find(|&&v| v >= scene.rig.views()) {
        return Err(config_err!("view {v} out of range for {} views", scene.rig.views()));
    }
    let mut out = scene.clone();
    out.camera.dropped.extend_from_slice(views);
    out.camera.dropped.sort_unstable();
    out.camera.dropped.dedup();
    Ok(out)
}

pub fn apply_occlusion(scene: &Scene, rects: &[OcclusionRect]) -> Result<Scene> {
    if rects.iter().any(|r| r.view >= scene.rig.views()) {
        return Err(config_err!("occlusion rectangle references a missing view"));
    }
    let mut out = scene.clone();
    for r in rects.iter().filter(|r| !r.is_empty()) {
        if !out.camera.occlusions.contains(r) {
            out.camera.occlusions.push(*r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraRig, PcRange};
    use crate::scene::{generate_scene, SceneConfig};

    fn scene(seed: u64) -> Scene {
        let cfg = SceneConfig {
            azimuth_steps: 180,
            ..SceneConfig::default()
        };
        let rig = CameraRig::surround(6, 320, 800, 40, 100, 70.0);
        generate_scene(&cfg, &PcRange::default(), &rig, seed, seed).unwrap()
    }

    #[test]
    fn grammar_round_trips() {
        for s in [
            "clean",
            "beams=4",
            "lidardrop",
            "fov=-60:60",
            "objfail=0.5@seed7",
            "viewdrop=0,1,2",
            "camdrop",
        ] {
            assert_eq!(CorruptionSpec::parse(s).unwrap().to_string(), s);
        }
        assert_eq!(
            CorruptionSpec::parse("viewdrop=0-5").unwrap(),
            CorruptionSpec::ViewDrop {
                views: (0..6).collect()
            }
        );
        assert_eq!(
            CorruptionSpec::parse("objfail=0.5@7").unwrap(),
            CorruptionSpec::ObjectFailure { rate: 0.5, seed: 7 }
        );
        for s in [
            "beams=3",
            "fov=60:-60",
            "objfail=1.5@1",
            "bogus",
            "viewdrop=",
            "lidardrop=1",
        ] {
            assert!(matches!(CorruptionSpec::parse(s), Err(MomeError::Config(_))), "{s}");
        }
    }

    #[test]
    fn scenario_list_keeps_view_lists_together() {
        assert_eq!(
            split_scenarios("clean,beams=4,viewdrop=0,1,2,lidardrop,viewdrop=0-5"),
            ["clean", "beams=4", "viewdrop=0,1,2", "lidardrop", "viewdrop=0-5"]
        );
    }

    #[test]
    fn beam_examples() {
        let s = scene(1);
        assert_eq!(apply_beam_reduction(&s, 32).unwrap(), s);
        let one = apply_beam_reduction(&s, 1).unwrap();
        assert_eq!(one.points.len(), s.points.iter().filter(|p| p.ring == 0).count());
        assert_eq!(kept_rings(4).unwrap(), [0, 8, 16, 24]);
        let four = apply_beam_reduction(&s, 4).unwrap();
        assert!(four.points.iter().all(|p| p.ring % 8 == 0));
        assert!(apply_beam_reduction(&s, 5).is_err());
    }

    #[test]
    fn drops_keep_boxes() {
        let s = scene(2);
        let d = apply_lidar_drop(&s);
        assert!(d.points.is_empty());
        assert_eq!(d.boxes, s.boxes);
        assert_eq!(apply_object_failure(&s, 0.0, 3), s);
        assert!(apply_object_failure(&s, 1.0, 3)
            .points
            .iter()
            .all(|p| p.owner.is_none()));
        assert_eq!(apply_view_drop(&s, &[]).unwrap(), s);
        assert!(apply_view_drop(&s, &[6]).is_err());
    }
}

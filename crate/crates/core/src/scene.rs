//! Reproducible synthetic driving scenes: ground-truth boxes, a ray-cast
//! 32-ring LiDAR sweep, and a calibrated surround camera rig.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, MomeError, Result};
use crate::geometry::{CameraRig, PcRange};

/// Number of LiDAR beam rings.
pub const NUM_RINGS: usize = 32;

/// Class names and nominal `(width, length, height)` in metres.
pub const CLASS_PRIORS: [(&str, [f64; 3]); 10] = [
    ("car", [1.95, 4.6, 1.73]),
    ("pedestrian", [0.67, 0.73, 1.77]),
    ("truck", [2.5, 6.9, 2.8]),
    ("bus", [2.9, 11.0, 3.5]),
    ("bicycle", [0.6, 1.7, 1.3]),
    ("motorcycle", [0.8, 2.1, 1.5]),
    ("barrier", [2.5, 0.5, 1.0]),
    ("traffic_cone", [0.4, 0.4, 1.1]),
    ("trailer", [2.9, 12.0, 3.9]),
    ("construction_vehicle", [2.8, 6.4, 3.2]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub center: [f64; 3],
    /// `(width, length, height)`; length runs along the heading.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub object_id: u32,
}

impl GtBox {
    /// Express a LiDAR-frame point in the box frame (x along length).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let l = self.to_local([x, y, self.center[2]]);
        l[0].abs() <= self.size[1] / 2.0 && l[1].abs() <= self.size[0] / 2.0
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.yaw.sin_cos();
        let [w, l, h] = self.size;
        std::array::from_fn(|i| {
            let lx = if i & 1 == 0 { l / 2.0 } else { -l / 2.0 };
            let ly = if i & 2 == 0 { w / 2.0 } else { -w / 2.0 };
            let lz = if i & 4 == 0 { h / 2.0 } else { -h / 2.0 };
            [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
                self.center[2] + lz,
            ]
        })
    }

    /// Entry distance of the ray `t * dir` from the origin, if it hits.
    fn ray_hit(&self, dir: [f64; 3]) -> Option<f64> {
        let o = self.to_local([0.0, 0.0, 0.0]);
        let (s, c) = self.yaw.sin_cos();
        let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
        let half = [self.size[1] / 2.0, self.size[0] / 2.0, self.size[2] / 2.0];
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-12 {
                if o[i].abs() > half[i] {
                    return None;
                }
                continue;
            }
            let a = (-half[i] - o[i]) / d[i];
            let b = (half[i] - o[i]) / d[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub xyz: [f64; 3],
    pub ring: u8,
    /// `atan2(y, x)` of `xyz`, radians.
    pub azimuth: f64,
    /// Object id of the box that returned the point; `None` for ground.
    pub owner: Option<u32>,
}

/// Pixel rectangle `[u0, u1) x [v0, v1)` on one view that hides camera evidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRect {
    pub view: usize,
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

impl OcclusionRect {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u < self.u1 && v >= self.v0 && v < self.v1
    }

    pub fn is_empty(&self) -> bool {
        !(self.u1 > self.u0 && self.v1 > self.v0)
    }
}

/// Camera-side corruption state consumed by the camera encoder.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraState {
    #[serde(default)]
    pub dropped: Vec<usize>,
    #[serde(default)]
    pub occlusions: Vec<OcclusionRect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub seed: u64,
    pub ground_z: f64,
    pub boxes: Vec<GtBox>,
    pub points: Vec<LidarPoint>,
    pub rig: CameraRig,
    #[serde(default)]
    pub camera: CameraState,
}

impl Scene {
    pub fn is_view_dropped(&self, view: usize) -> bool {
        self.camera.dropped.contains(&view)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Overrides the sampled box count when set.
    pub box_count: Option<usize>,
    pub azimuth_steps: usize,
    pub sensor_height: f64,
    /// Ground radius of ring 0 and ring 31.
    pub ring_radii: [f64; 2],
    pub min_separation: f64,
    /// Keep box centres this far inside the x/y range.
    pub margin: f64,
    pub size_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            min_boxes: 3,
            max_boxes: 12,
            box_count: None,
            azimuth_steps: 720,
            sensor_height: 1.8,
            ring_radii: [2.5, 76.0],
            min_separation: 4.0,
            margin: 4.0,
            size_jitter: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=CLASS_PRIORS.len()).contains(&self.num_classes) {
            return Err(config_err!(
                "num_classes must be in 1..={}, got {}",
                CLASS_PRIORS.len(),
                self.num_classes
            ));
        }
        if self.min_boxes > self.max_boxes {
            return Err(config_err!("min_boxes exceeds max_boxes"));
        }
        if self.azimuth_steps == 0 {
            return Err(config_err!("azimuth_steps must be positive"));
        }
        if !(self.sensor_height > 0.0) || !(self.ring_radii[1] > self.ring_radii[0]) || self.ring_radii[0] <= 0.0 {
            return Err(config_err!("invalid sensor height or ring radii"));
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(config_err!("size_jitter must be in [0,1)"));
        }
        Ok(())
    }

    /// Ground-hit radius of each ring, nearest first.
    pub fn ring_radius(&self, ring: usize) -> f64 {
        let [r0, r1] = self.ring_radii;
        r0 + (r1 - r0) * ring as f64 / (NUM_RINGS - 1) as f64
    }

    /// Elevation angle (radians, negative = downward) of each ring.
    pub fn ring_elevation(&self, ring: usize) -> f64 {
        -(self.sensor_height / self.ring_radius(ring)).atan()
    }
}

/// SplitMix64 finaliser; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(
    config: &SceneConfig,
    range: &PcRange,
    rig: &CameraRig,
    scene_id: u64,
    seed: u64,
) -> Result<Scene> {
    config.validate()?;
    range.validate()?;
    rig.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = config
        .box_count
        .unwrap_or_else(|| rng.gen_range(config.min_boxes..=config.max_boxes));
    let ground_z = -config.sensor_height;
    let mut boxes: Vec<GtBox> = Vec::with_capacity(count);
    let lo = [range.min[0] + config.margin, range.min[1] + config.margin];
    let hi = [range.max[0] - config.margin, range.max[1] - config.margin];
    if !(hi[0] > lo[0] && hi[1] > lo[1]) {
        return Err(config_err!("margin leaves no room for boxes"));
    }
    let mut attempts = 0;
    while boxes.len() < count && attempts < 1000 * count.max(1) {
        attempts += 1;
        let class_id = rng.gen_range(0..config.num_classes);
        let prior = CLASS_PRIORS[class_id].1;
        let size: [f64; 3] =
            std::array::from_fn(|i| prior[i] * (1.0 + rng.gen_range(-config.size_jitter..=config.size_jitter)));
        let x = rng.gen_range(lo[0]..hi[0]);
        let y = rng.gen_range(lo[1]..hi[1]);
        let yaw = PI - 2.0 * PI * rng.gen::<f64>();
        if x.hypot(y) < 3.0 + size[1] / 2.0 {
            continue;
        }
        if boxes
            .iter()
            .any(|b| (b.center[0] - x).hypot(b.center[1] - y) < config.min_separation + (b.size[1] + size[1]) / 2.0)
        {
            continue;
        }
        let center = [x, y, ground_z + size[2] / 2.0];
        if !range.contains(center) {
            continue;
        }
        boxes.push(GtBox {
            center,
            size,
            yaw,
            class_id,
            object_id: boxes.len() as u32,
        });
    }
    if boxes.len() < count {
        return Err(config_err!(
            "could only place {} of {count} boxes; loosen separation or range",
            boxes.len()
        ));
    }
    let points = cast_lidar(config, range, &boxes);
    Ok(Scene {
        scene_id,
        seed,
        ground_z,
        boxes,
        points,
        rig: rig.clone(),
        camera: CameraState::default(),
    })
}

/// One return per (ring, azimuth) ray: the nearest box surface, else the
/// ground plane, else nothing.
fn cast_lidar(config: &SceneConfig, range: &PcRange, boxes: &[GtBox]) -> Vec<LidarPoint> {
    let mut points = Vec::new();
    let steps = config.azimuth_steps;
    for ring in 0..NUM_RINGS {
        let elev = config.ring_elevation(ring);
        let (se, ce) = elev.sin_cos();
        let t_ground = config.sensor_height / -se;
        for step in 0..steps {
            let phi = -PI + 2.0 * PI * (step as f64 + 0.5) / steps as f64;
            let dir = [ce * phi.cos(), ce * phi.sin(), se];
            let mut best: Option<(f64, u32)> = None;
            for b in boxes {
                if let Some(t) = b.ray_hit(dir) {
                    if t < t_ground && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, b.object_id));
                    }
                }
            }
            let (t, owner) = match best {
                Some((t, id)) => (t, Some(id)),
                None => (t_ground, None),
            };
            let xyz = [t * dir[0], t * dir[1], t * dir[2]];
            if !range.contains(xyz) {
                continue;
            }
            points.push(LidarPoint {
                xyz,
                ring: ring as u8,
                azimuth: xyz[1].atan2(xyz[0]),
                owner,
            });
        }
    }
    points
}

/// First line of a scene dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    #[serde(default)]
    pub corruption: Option<String>,
}

pub const DATASET_FORMAT: &str = "mome-scenes";
pub const DATASET_VERSION: u32 = 1;

impl DatasetHeader {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            config_hash: config_hash.into(),
            corruption: None,
        }
    }
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| MomeError::Format("dataset file is empty".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(MomeError::Format(format!(
            "unsupported dataset {} v{}",
            header.format, header.version
        )));
    }
    let mut scenes = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(serde_json::from_str(&line)?);
    }
    Ok((header, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rig() -> CameraRig {
        CameraRig::surround(6, 320, 800, 40, 100, 70.0)
    }

    fn small() -> SceneConfig {
        SceneConfig {
            azimuth_steps: 360,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&small(), &PcRange::default(), &rig(), 0, 42).unwrap();
        let b = generate_scene(&small(), &PcRange::default(), &rig(), 0, 42).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_scene(&small(), &PcRange::default(), &rig(), 0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forced_zero_boxes_gives_background_only() {
        let cfg = SceneConfig {
            box_count: Some(0),
            ..small()
        };
        let s = generate_scene(&cfg, &PcRange::default(), &rig(), 0, 7).unwrap();
        assert!(s.boxes.is_empty());
        assert!(!s.points.is_empty());
        assert!(s.points.iter().all(|p| p.owner.is_none()));
    }

    #[test]
    fn zero_classes_is_config_error() {
        let cfg = SceneConfig {
            num_classes: 0,
            ..small()
        };
        assert!(matches!(
            generate_scene(&cfg, &PcRange::default(), &rig(), 0, 1),
            Err(MomeError::Config(_))
        ));
    }

    #[test]
    fn ring_elevation_matches_points() {
        let cfg = small();
        let s = generate_scene(&cfg, &PcRange::default(), &rig(), 0, 3).unwrap();
        for p in &s.points {
            let elev = p.xyz[2].atan2(p.xyz[0].hypot(p.xyz[1]));
            assert!((elev - cfg.ring_elevation(p.ring as usize)).abs() < 1e-9);
        }
    }

    #[test]
    fn boxes_cast_points_and_shadow_the_ground() {
        let cfg = SceneConfig {
            box_count: Some(1),
            ..small()
        };
        let s = generate_scene(&cfg, &PcRange::default(), &rig(), 0, 11).unwrap();
        let b = &s.boxes[0];
        let owned: Vec<_> = s.points.iter().filter(|p| p.owner == Some(0)).collect();
        assert!(!owned.is_empty());
        for p in owned {
            let l = b.to_local(p.xyz);
            assert!(l[0].abs() <= b.size[1] / 2.0 + 1e-9);
            assert!(l[1].abs() <= b.size[0] / 2.0 + 1e-9);
            assert!(l[2].abs() <= b.size[2] / 2.0 + 1e-9);
        }
        assert!(s
            .points
            .iter()
            .filter(|p| p.owner.is_none())
            .all(|p| !b.contains_xy(p.xyz[0], p.xyz[1])));
    }
}

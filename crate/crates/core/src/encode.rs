//! Handcrafted per-cell statistics for both sensors, the learnable per-cell
//! encoders that lift them to `D` channels, the flattened `F'_lc` layout, and
//! sinusoidal positional encodings that share that layout.

use std::f64::consts::TAU;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::geometry::{BevGrid, CameraRig, ProjectedQuery};
use crate::params::ParamSet;
use crate::scene::{Scene, CLASS_PRIORS};
use crate::tensor::Tensor;

/// Per-cell BEV statistics: `ln(1+count)`, mean and max height above
/// ground, occupancy.
pub const BEV_STATS: usize = 4;
/// Per-cell camera statistics: coverage, inverse depth, two class channels,
/// and a liveness channel that is 1 on every working, unoccluded cell.
pub const CAM_STATS: usize = 5;

/// Minimum depth for a box corner to count as in front of a camera.
const MIN_CORNER_DEPTH: f64 = 0.1;
/// Depth at which the inverse-depth statistic saturates at 1.
const DEPTH_REF: f64 = 5.0;

/// Row indexing of the flattened feature matrix `F'_lc`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub bev_side: usize,
    pub views: usize,
    pub feat_height: usize,
    pub feat_width: usize,
}

impl FeatureLayout {
    pub fn new(grid: &BevGrid, rig: &CameraRig) -> Self {
        Self {
            bev_side: grid.side,
            views: rig.views(),
            feat_height: rig.feat_height,
            feat_width: rig.feat_width,
        }
    }

    pub fn bev_len(&self) -> usize {
        self.bev_side * self.bev_side
    }

    pub fn cells_per_view(&self) -> usize {
        self.feat_height * self.feat_width
    }

    pub fn cam_len(&self) -> usize {
        self.views * self.cells_per_view()
    }

    pub fn total(&self) -> usize {
        self.bev_len() + self.cam_len()
    }

    pub fn bev_index(&self, row: usize, col: usize) -> usize {
        row * self.bev_side + col
    }

    pub fn cam_index(&self, view: usize, row: usize, col: usize) -> usize {
        self.bev_len() + view * self.cells_per_view() + row * self.feat_width + col
    }

    /// Inverse of the index functions.
    pub fn source(&self, index: usize) -> FeatureSource {
        if index < self.bev_len() {
            FeatureSource::Bev {
                row: index / self.bev_side,
                col: index % self.bev_side,
            }
        } else {
            let i = index - self.bev_len();
            let per = self.cells_per_view();
            FeatureSource::Camera {
                view: i / per,
                row: (i % per) / self.feat_width,
                col: i % self.feat_width,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Bev { row: usize, col: usize },
    Camera { view: usize, row: usize, col: usize },
}

/// Raw statistics of one scene, ready to be encoded.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneStats {
    /// `H_l·W_l x BEV_STATS`
    pub bev: Tensor,
    /// `V·H_c·W_c x CAM_STATS`
    pub cam: Tensor,
}

impl SceneStats {
    pub fn compute(scene: &Scene, grid: &BevGrid, num_classes: usize) -> Self {
        Self {
            bev: bev_stats(scene, grid),
            cam: camera_stats(scene, num_classes),
        }
    }
}

pub fn bev_stats(scene: &Scene, grid: &BevGrid) -> Tensor {
    let cells = grid.cells();
    let mut count = vec![0usize; cells];
    let mut sum_h = vec![0.0; cells];
    let mut max_h = vec![0.0f64; cells];
    for p in &scene.points {
        let c = grid.cell(p.xyz[0], p.xyz[1]);
        if !c.inside {
            continue;
        }
        let i = c.row as usize * grid.side + c.col as usize;
        let h = (p.xyz[2] - scene.ground_z).max(0.0);
        count[i] += 1;
        sum_h[i] += h;
        max_h[i] = max_h[i].max(h);
    }
    let mut out = Tensor::zeros(&[cells, BEV_STATS]);
    for i in 0..cells {
        if count[i] == 0 {
            continue;
        }
        let n = count[i] as f64;
        out.row_mut(i)
            .copy_from_slice(&[(1.0 + n).ln(), sum_h[i] / n, max_h[i], 1.0]);
    }
    out
}

/// Direction on the unit circle assigned to a class for the two class
/// channels.
pub fn class_angle(class_id: usize, num_classes: usize) -> f64 {
    TAU * class_id as f64 / num_classes.max(1) as f64
}

/// Image-space footprint of one box in one view.
struct Footprint {
    u0: f64,
    v0: f64,
    u1: f64,
    v1: f64,
    depth: f64,
    class_id: usize,
}

pub fn camera_stats(scene: &Scene, num_classes: usize) -> Tensor {
    let rig = &scene.rig;
    let (fh, fw) = (rig.feat_height, rig.feat_width);
    let per = fh * fw;
    let s = rig.feature_scale();
    let (img_w, img_h) = (rig.image_width as f64, rig.image_height as f64);
    let mut out = Tensor::zeros(&[rig.views() * per, CAM_STATS]);
    for view in 0..rig.views() {
        if scene.is_view_dropped(view) {
            continue;
        }
        let rects: Vec<_> = scene
            .camera
            .occlusions
            .iter()
            .filter(|r| r.view == view && !r.is_empty())
            .collect();
        let mut prints: Vec<Footprint> = scene
            .boxes
            .iter()
            .filter_map(|b| {
                let mut lo = [f64::INFINITY; 2];
                let mut hi = [f64::NEG_INFINITY; 2];
                let mut depth = 0.0;
                let mut n = 0;
                for c in b.corners() {
                    let pp = rig.project_view(view, c);
                    if pp.depth <= MIN_CORNER_DEPTH || rects.iter().any(|r| r.contains(pp.u, pp.v)) {
                        continue;
                    }
                    lo = [lo[0].min(pp.u), lo[1].min(pp.v)];
                    hi = [hi[0].max(pp.u), hi[1].max(pp.v)];
                    depth += pp.depth;
                    n += 1;
                }
                if n == 0 {
                    return None;
                }
                let fp = Footprint {
                    u0: lo[0].max(0.0),
                    v0: lo[1].max(0.0),
                    u1: hi[0].min(img_w),
                    v1: hi[1].min(img_h),
                    depth: depth / n as f64,
                    class_id: b.class_id,
                };
                (fp.u1 > fp.u0 && fp.v1 > fp.v0).then_some(fp)
            })
            .collect();
        // Nearest box first so it claims each cell.
        prints.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        for r in 0..fh {
            for c in 0..fw {
                let (cu0, cv0) = (c as f64 / s, r as f64 / s);
                let (cu1, cv1) = ((c + 1) as f64 / s, (r + 1) as f64 / s);
                let (mu, mv) = ((cu0 + cu1) / 2.0, (cv0 + cv1) / 2.0);
                if rects.iter().any(|rect| rect.contains(mu, mv)) {
                    continue;
                }
                let row = out.row_mut(view * per + r * fw + c);
                row[4] = 1.0;
                let area = (cu1 - cu0) * (cv1 - cv0);
                for fp in &prints {
                    let ou = (fp.u1.min(cu1) - fp.u0.max(cu0)).max(0.0);
                    let ov = (fp.v1.min(cv1) - fp.v0.max(cv0)).max(0.0);
                    let cov = ou * ov / area;
                    if cov > 0.0 {
                        let a = class_angle(fp.class_id, num_classes);
                        row[0] = cov;
                        row[1] = (DEPTH_REF / fp.depth).min(1.0);
                        row[2] = cov * a.cos();
                        row[3] = cov * a.sin();
                        break;
                    }
                }
            }
        }
    }
    out
}

pub const BEV_WEIGHT: &str = "encoder.bev.weight";
pub const BEV_BIAS: &str = "encoder.bev.bias";
pub const CAM_WEIGHT: &str = "encoder.cam.weight";
pub const CAM_BIAS: &str = "encoder.cam.bias";

pub fn init_encoder_params<R: Rng>(params: &mut ParamSet, d: usize, rng: &mut R) -> Result<()> {
    params.insert_xavier(BEV_WEIGHT, BEV_STATS, d, rng)?;
    params.insert(BEV_BIAS, Tensor::zeros(&[d]))?;
    params.insert_xavier(CAM_WEIGHT, CAM_STATS, d, rng)?;
    params.insert(CAM_BIAS, Tensor::zeros(&[d]))?;
    Ok(())
}

/// Encoded features on a graph: `F'_l`, `F'_c`, and their concatenation.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle {
    pub bev: Var,
    pub cam: Var,
    pub all: Var,
}

fn encode_cells(g: &mut Graph, params: &ParamSet, stats: &Tensor, w: &str, b: &str) -> Result<Var> {
    let x = g.constant(stats.clone());
    let w = g.param_by_name(params, w)?;
    let b = g.param_by_name(params, b)?;
    let y = g.matmul(x, w)?;
    let y = g.add_row(y, b)?;
    Ok(g.gelu(y))
}

pub fn encode_bev(g: &mut Graph, params: &ParamSet, stats: &Tensor) -> Result<Var> {
    encode_cells(g, params, stats, BEV_WEIGHT, BEV_BIAS)
}

pub fn encode_cameras(g: &mut Graph, params: &ParamSet, stats: &Tensor) -> Result<Var> {
    encode_cells(g, params, stats, CAM_WEIGHT, CAM_BIAS)
}

pub fn encode_scene(g: &mut Graph, params: &ParamSet, stats: &SceneStats) -> Result<FeatureBundle> {
    let bev = encode_bev(g, params, &stats.bev)?;
    let cam = encode_cameras(g, params, &stats.cam)?;
    let all = g.concat_rows(&[bev, cam])?;
    Ok(FeatureBundle { bev, cam, all })
}

/// `F_l [H_l·W_l x D]` and `F_c [V·H_c·W_c x D]` stacked in layout order.
pub fn flatten_concat(bev: &Tensor, cam: &Tensor, layout: &FeatureLayout) -> Result<Tensor> {
    if bev.rows() != layout.bev_len() || cam.rows() != layout.cam_len() || bev.cols() != cam.cols() {
        return Err(dim_err!(
            "flatten_concat: bev {:?}, cam {:?} do not match layout {layout:?}",
            bev.shape(),
            cam.shape()
        ));
    }
    let mut data = bev.data().to_vec();
    data.extend_from_slice(cam.data());
    Tensor::new(vec![layout.total(), bev.cols()], data)
}

pub fn unflatten(all: &Tensor, layout: &FeatureLayout) -> Result<(Tensor, Tensor)> {
    if all.shape().len() != 2 || all.rows() != layout.total() {
        return Err(dim_err!(
            "unflatten: {:?} does not match layout {layout:?}",
            all.shape()
        ));
    }
    let d = all.cols();
    let split = layout.bev_len() * d;
    Ok((
        Tensor::new(vec![layout.bev_len(), d], all.data()[..split].to_vec())?,
        Tensor::new(vec![layout.cam_len(), d], all.data()[split..].to_vec())?,
    ))
}

/// Sinusoidal position code. The first half of the channels encodes BEV
/// position, the second half camera position; within each half channels
/// run frequency-major as `(row sin, row cos, col sin, col cos)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub dim: usize,
    /// Cycles across the BEV extent / camera height.
    pub freqs: Vec<f64>,
    /// Cycles across the full camera panorama (integers keep it periodic).
    pub pano_freqs: Vec<f64>,
    pub gain: f64,
}

impl PositionalEncoding {
    /// Frequencies grow roughly linearly and are not mutually harmonic, so
    /// every head's similarity kernel has a single peak over the extent.
    pub fn new(dim: usize, gain: f64) -> Self {
        let per_half = (dim / 2) / 4;
        Self {
            dim,
            freqs: (0..per_half).map(|k| 0.5 + 0.75 * k as f64).collect(),
            pano_freqs: (0..per_half)
                .map(|k| [1.0, 2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0][k % 8])
                .collect(),
            gain,
        }
    }

    fn fill(&self, out: &mut [f64], offset: usize, a: f64, b: f64, fa: &[f64], fb: &[f64]) {
        for (k, (&f, &g)) in fa.iter().zip(fb).enumerate() {
            let base = offset + 4 * k;
            let (sa, ca) = (TAU * f * a).sin_cos();
            let (sb, cb) = (TAU * g * b).sin_cos();
            out[base..base + 4].copy_from_slice(&[self.gain * sa, self.gain * ca, self.gain * sb, self.gain * cb]);
        }
    }

    /// Normalised BEV position (row, col in `[0,1]`).
    pub fn bev(&self, out: &mut [f64], row: f64, col: f64) {
        self.fill(out, 0, row, col, &self.freqs, &self.freqs);
    }

    /// Normalised camera position (row in `[0,1]`, panoramic column in `[0,1)`).
    pub fn camera(&self, out: &mut [f64], row: f64, pano: f64) {
        self.fill(out, self.dim / 2, row, pano, &self.freqs, &self.pano_freqs);
    }

    /// Encoding of every row of `F'_lc`.
    pub fn features(&self, layout: &FeatureLayout) -> Tensor {
        let mut out = Tensor::zeros(&[layout.total(), self.dim]);
        let side = layout.bev_side as f64;
        let pano_w = (layout.views * layout.feat_width) as f64;
        for i in 0..layout.total() {
            let row = out.row_mut(i);
            match layout.source(i) {
                FeatureSource::Bev { row: r, col: c } => {
                    self.bev(row, (r as f64 + 0.5) / side, (c as f64 + 0.5) / side)
                }
                FeatureSource::Camera { view, row: r, col: c } => self.camera(
                    row,
                    (r as f64 + 0.5) / layout.feat_height as f64,
                    ((view * layout.feat_width + c) as f64 + 0.5) / pano_w,
                ),
            }
        }
        out
    }

    /// Encoding of projected queries: BEV half from the continuous BEV
    /// position, camera half from the projected camera cell (zero if none).
    pub fn queries(&self, projected: &[ProjectedQuery], layout: &FeatureLayout) -> Tensor {
        let mut out = Tensor::zeros(&[projected.len(), self.dim]);
        let side = layout.bev_side as f64;
        let pano_w = (layout.views * layout.feat_width) as f64;
        for (i, pq) in projected.iter().enumerate() {
            let row = out.row_mut(i);
            self.bev(row, pq.bev_pos.0 / side, pq.bev_pos.1 / side);
            if let Some(cam) = pq.camera {
                self.camera(
                    row,
                    (cam.row as f64 + 0.5) / layout.feat_height as f64,
                    ((cam.view * layout.feat_width + cam.col) as f64 + 0.5) / pano_w,
                );
            }
        }
        out
    }
}

/// Class names for the first `k` classes.
pub fn class_names(k: usize) -> Vec<&'static str> {
    CLASS_PRIORS.iter().take(k).map(|(n, _)| *n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PcRange;
    use crate::scene::{generate_scene, CameraState, GtBox, LidarPoint, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rig() -> CameraRig {
        CameraRig::surround(6, 320, 800, 40, 100, 70.0)
    }

    fn empty_scene() -> Scene {
        Scene {
            scene_id: 0,
            seed: 0,
            ground_z: -1.8,
            boxes: vec![],
            points: vec![],
            rig: rig(),
            camera: CameraState::default(),
        }
    }

    #[test]
    fn flatten_toy_layout_is_enumerable() {
        let layout = FeatureLayout {
            bev_side: 2,
            views: 1,
            feat_height: 1,
            feat_width: 1,
        };
        let bev = Tensor::new(vec![4, 1], vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        let cam = Tensor::new(vec![1, 1], vec![100.0]).unwrap();
        let all = flatten_concat(&bev, &cam, &layout).unwrap();
        assert_eq!(all.data(), &[0.0, 1.0, 10.0, 11.0, 100.0]);
        let (b2, c2) = unflatten(&all, &layout).unwrap();
        assert_eq!((b2, c2), (bev, cam.clone()));
        assert!(flatten_concat(&cam, &cam, &layout).is_err());
    }

    #[test]
    fn layout_source_round_trips() {
        let layout = FeatureLayout {
            bev_side: 3,
            views: 2,
            feat_height: 2,
            feat_width: 3,
        };
        for i in 0..layout.total() {
            let j = match layout.source(i) {
                FeatureSource::Bev { row, col } => layout.bev_index(row, col),
                FeatureSource::Camera { view, row, col } => layout.cam_index(view, row, col),
            };
            assert_eq!(i, j);
        }
    }

    #[test]
    fn single_point_touches_one_bev_cell() {
        let grid = BevGrid::new(180, PcRange::default());
        let mut s = empty_scene();
        let empty = bev_stats(&s, &grid);
        assert!(empty.data().iter().all(|&v| v == 0.0));
        s.points.push(LidarPoint {
            xyz: [0.0, 0.0, 0.0],
            ring: 0,
            azimuth: 0.0,
            owner: None,
        });
        let one = bev_stats(&s, &grid);
        for i in 0..grid.cells() {
            if i == 90 * 180 + 90 {
                assert_eq!(one.row(i), &[2f64.ln(), 1.8, 1.8, 1.0]);
            } else {
                assert_eq!(one.row(i), empty.row(i));
            }
        }
    }

    #[test]
    fn box_in_front_of_view_zero_only_touches_view_zero() {
        let mut s = empty_scene();
        let empty = camera_stats(&s, 3);
        s.boxes.push(GtBox {
            center: [15.0, 0.0, -0.9],
            size: [1.9, 4.5, 1.7],
            yaw: 0.3,
            class_id: 1,
            object_id: 0,
        });
        let one = camera_stats(&s, 3);
        let per = 40 * 100;
        assert_ne!(one.data()[..per * 5], empty.data()[..per * 5]);
        assert_eq!(one.data()[per * 5..], empty.data()[per * 5..]);
        assert!(one.data().iter().all(|v| v.is_finite()));
        // Coverage and class channels agree with the chosen class angle.
        let a = class_angle(1, 3);
        for r in 0..per {
            let row = one.row(r);
            assert!((row[2] - row[0] * a.cos()).abs() < 1e-12);
            assert!((row[3] - row[0] * a.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn dropped_view_is_all_zero_stats() {
        let cfg = SceneConfig {
            azimuth_steps: 90,
            ..SceneConfig::default()
        };
        let mut s = generate_scene(&cfg, &PcRange::default(), &rig(), 0, 5).unwrap();
        s.camera.dropped = vec![2];
        let st = camera_stats(&s, 10);
        let per = 4000;
        assert!(st.data()[2 * per * 5..3 * per * 5].iter().all(|&v| v == 0.0));
        assert!(st.data()[..per * 5].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn encoded_empty_bev_is_broadcast_of_zero_stats() {
        let grid = BevGrid::new(36, PcRange::default());
        let mut params = ParamSet::new();
        init_encoder_params(&mut params, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let f = encode_bev(&mut g, &params, &bev_stats(&empty_scene(), &grid)).unwrap();
        let t = g.value(f);
        for r in 1..t.rows() {
            assert_eq!(t.row(r), t.row(0));
        }
    }

    #[test]
    fn positional_encoding_halves_are_disjoint() {
        let grid = BevGrid::new(6, PcRange::default());
        let rig = CameraRig::surround(2, 20, 40, 2, 4, 90.0);
        let layout = FeatureLayout::new(&grid, &rig);
        let pe = PositionalEncoding::new(16, 1.0);
        let t = pe.features(&layout);
        for i in 0..layout.total() {
            let (a, b) = t.row(i).split_at(8);
            if i < layout.bev_len() {
                assert!(b.iter().all(|&v| v == 0.0));
            } else {
                assert!(a.iter().all(|&v| v == 0.0));
            }
        }
    }
}

//! Reference-point projection into BEV and camera feature coordinates, and
//! construction of the per-query Local Attention Mask.
//!
//! Flattened feature layout (shared with [`crate::encode`]): the BEV grid
//! row-major first, then each camera view in index order, each view
//! row-major over its `feat_height x feat_width` cells.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::AttnMask;
use crate::error::{config_err, MomeError, Result};

/// Metric bounds of the point-cloud range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for PcRange {
    fn default() -> Self {
        Self {
            min: [-54.0, -54.0, -5.0],
            max: [54.0, 54.0, 3.0],
        }
    }
}

impl PcRange {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.max[i] > self.min[i]) || !self.min[i].is_finite() || !self.max[i].is_finite() {
                return Err(config_err!("point-cloud range must satisfy max > min on every axis"));
            }
        }
        Ok(())
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Map a normalised `[0,1]³` reference point to metric coordinates.
    pub fn denormalize(&self, r: [f64; 3]) -> Result<[f64; 3]> {
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(MomeError::Domain(format!("reference point {r:?} outside [0,1]^3")));
        }
        Ok(self.denormalize_unchecked(r))
    }

    pub fn denormalize_unchecked(&self, r: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| r[i] * (self.max[i] - self.min[i]) + self.min[i])
    }

    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (p[i] - self.min[i]) / (self.max[i] - self.min[i]))
    }
}

/// Square BEV raster over the x/y extent of a [`PcRange`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGrid {
    pub side: usize,
    pub range: PcRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BevCell {
    pub row: i64,
    pub col: i64,
    pub inside: bool,
}

impl BevGrid {
    pub fn new(side: usize, range: PcRange) -> Self {
        Self { side, range }
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn cell_size(&self) -> f64 {
        self.range.extent(0) / self.side as f64
    }

    /// Row follows y, column follows x.
    pub fn cell(&self, x: f64, y: f64) -> BevCell {
        let sx = self.side as f64 / self.range.extent(0);
        let sy = self.side as f64 / self.range.extent(1);
        let col = ((x - self.range.min[0]) * sx).floor();
        let row = ((y - self.range.min[1]) * sy).floor();
        let n = self.side as f64;
        let inside = row.is_finite() && col.is_finite() && (0.0..n).contains(&row) && (0.0..n).contains(&col);
        BevCell {
            row: if row.is_finite() { row as i64 } else { i64::MIN },
            col: if col.is_finite() { col as i64 } else { i64::MIN },
            inside,
        }
    }

    /// Continuous (row, col) position in cell units, used for positional encoding.
    pub fn continuous(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = self.side as f64 / self.range.extent(0);
        let sy = self.side as f64 / self.range.extent(1);
        ((y - self.range.min[1]) * sy, (x - self.range.min[0]) * sx)
    }

    /// Metric centre of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let cs = self.cell_size();
        let csy = self.range.extent(1) / self.side as f64;
        (
            self.range.min[0] + (col as f64 + 0.5) * cs,
            self.range.min[1] + (row as f64 + 0.5) * csy,
        )
    }
}

/// Calibrated multi-view camera rig.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    /// Per view, the row-major 4x4 matrix taking homogeneous LiDAR-frame
    /// points to `(u·depth, v·depth, depth, 1)`.
    pub lidar2img: Vec<[[f64; 4]; 4]>,
    pub image_height: usize,
    pub image_width: usize,
    pub feat_height: usize,
    pub feat_width: usize,
}

/// Location of a reference point on one camera's feature map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraCell {
    pub view: usize,
    pub row: usize,
    pub col: usize,
    /// Pixel coordinates and depth of the projection.
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Raw projection of a LiDAR-frame point into one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraRig {
    /// Evenly spaced ring of pinhole cameras at the origin. View `i` looks
    /// along yaw `i * 360° / views`.
    pub fn surround(
        views: usize,
        image_height: usize,
        image_width: usize,
        feat_height: usize,
        feat_width: usize,
        hfov_deg: f64,
    ) -> Self {
        let fx = image_width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        let fy = fx;
        let cx = image_width as f64 / 2.0;
        let cy = image_height as f64 / 2.0;
        let lidar2img = (0..views)
            .map(|i| {
                let yaw = i as f64 * std::f64::consts::TAU / views as f64;
                let (s, c) = yaw.sin_cos();
                // Camera axes in the LiDAR frame: x right, y down, z forward.
                let right = [s, -c, 0.0];
                let down = [0.0, 0.0, -1.0];
                let fwd = [c, s, 0.0];
                let row = |k: [f64; 3]| [k[0], k[1], k[2], 0.0];
                let r0 = row(right);
                let r1 = row(down);
                let r2 = row(fwd);
                let mut m = [[0.0; 4]; 4];
                for j in 0..4 {
                    m[0][j] = fx * r0[j] + cx * r2[j];
                    m[1][j] = fy * r1[j] + cy * r2[j];
                    m[2][j] = r2[j];
                }
                m[3][3] = 1.0;
                m
            })
            .collect();
        Self {
            lidar2img,
            image_height,
            image_width,
            feat_height,
            feat_width,
        }
    }

    pub fn views(&self) -> usize {
        self.lidar2img.len()
    }

    pub fn cells_per_view(&self) -> usize {
        self.feat_height * self.feat_width
    }

    pub fn feature_scale(&self) -> f64 {
        self.feat_height as f64 / self.image_height as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.lidar2img.is_empty() {
            return Err(config_err!("camera rig needs at least one view"));
        }
        if self
            .lidar2img
            .iter()
            .any(|m| m.iter().flatten().any(|v| !v.is_finite()))
        {
            return Err(config_err!("camera matrices must be finite"));
        }
        if self.image_height == 0 || self.image_width == 0 || self.feat_height == 0 || self.feat_width == 0 {
            return Err(config_err!("image and feature sizes must be positive"));
        }
        let sh = self.feat_height as f64 / self.image_height as f64;
        let sw = self.feat_width as f64 / self.image_width as f64;
        if (sh - sw).abs() > 1e-12 {
            return Err(config_err!(
                "feature/image scale must be uniform (height {sh}, width {sw})"
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rig: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        rig.validate()?;
        Ok(rig)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Homogeneous projection into one view; depth clamped below at 1e-5
    /// for the perspective divide.
    pub fn project_view(&self, view: usize, p: [f64; 3]) -> PixelProjection {
        let m = &self.lidar2img[view];
        let h = [p[0], p[1], p[2], 1.0];
        let row = |r: usize| (0..4).map(|j| m[r][j] * h[j]).sum::<f64>();
        let (x, y, depth) = (row(0), row(1), row(2));
        let d = depth.max(1e-5);
        PixelProjection {
            u: x / d,
            v: y / d,
            depth,
        }
    }

    pub fn in_image(&self, pp: &PixelProjection) -> bool {
        pp.depth > 0.0
            && pp.u >= 0.0
            && pp.u < self.image_width as f64
            && pp.v >= 0.0
            && pp.v < self.image_height as f64
    }

    /// First view (lowest index) in which the point lands inside the image
    /// with positive depth, with its feature cell.
    pub fn project(&self, p: [f64; 3]) -> Option<CameraCell> {
        let s = self.feature_scale();
        (0..self.views()).find_map(|view| {
            let pp = self.project_view(view, p);
            self.in_image(&pp).then(|| CameraCell {
                view,
                row: ((pp.v * s).floor() as usize).min(self.feat_height - 1),
                col: ((pp.u * s).floor() as usize).min(self.feat_width - 1),
                u: pp.u,
                v: pp.v,
                depth: pp.depth,
            })
        })
    }
}

/// A query reference point projected into both feature domains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedQuery {
    pub bev: BevCell,
    /// Continuous BEV position in cell units.
    pub bev_pos: (f64, f64),
    pub camera: Option<CameraCell>,
}

/// Denormalise and project a batch of `[0,1]³` reference points.
pub fn project_queries(refs: &[[f64; 3]], grid: &BevGrid, rig: &CameraRig) -> Result<Vec<ProjectedQuery>> {
    refs.iter()
        .map(|&r| {
            let p = grid.range.denormalize(r)?;
            Ok(ProjectedQuery {
                bev: grid.cell(p[0], p[1]),
                bev_pos: grid.continuous(p[0], p[1]),
                camera: rig.project(p),
            })
        })
        .collect()
}

/// Window sizes of the Local Attention Mask, in cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskWindows {
    pub lidar: usize,
    pub camera: usize,
}

impl Default for MaskWindows {
    fn default() -> Self {
        Self { lidar: 5, camera: 15 }
    }
}

impl MaskWindows {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lidar", self.lidar), ("camera", self.camera)] {
            if w == 0 || w % 2 == 0 {
                return Err(config_err!("{name} window must be an odd positive size, got {w}"));
            }
        }
        Ok(())
    }
}

/// Boolean `queries x (bev + cameras)` mask; a set bit means the entry is
/// open (attention allowed), an unset bit means blocked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalAttentionMask {
    queries: usize,
    bev_len: usize,
    cam_len: usize,
    words: usize,
    open: Vec<u64>,
}

impl LocalAttentionMask {
    pub fn fully_blocked(queries: usize, bev_len: usize, cam_len: usize) -> Self {
        let cols = bev_len + cam_len;
        let words = cols.div_ceil(64);
        Self {
            queries,
            bev_len,
            cam_len,
            words,
            open: vec![0; queries * words],
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn bev_len(&self) -> usize {
        self.bev_len
    }

    pub fn cam_len(&self) -> usize {
        self.cam_len
    }

    pub fn cols(&self) -> usize {
        self.bev_len + self.cam_len
    }

    fn unblock(&mut self, q: usize, col: usize) {
        self.open[q * self.words + col / 64] |= 1 << (col % 64);
    }

    pub fn is_blocked(&self, q: usize, col: usize) -> bool {
        self.open[q * self.words + col / 64] & (1 << (col % 64)) == 0
    }

    /// Open columns of one query, ascending.
    pub fn open_columns(&self, q: usize) -> Vec<usize> {
        let row = &self.open[q * self.words..(q + 1) * self.words];
        let mut out = Vec::new();
        for (w, &bits) in row.iter().enumerate() {
            let mut b = bits;
            while b != 0 {
                let t = b.trailing_zeros() as usize;
                out.push(w * 64 + t);
                b &= b - 1;
            }
        }
        out
    }

    pub fn count_open(&self, q: usize) -> usize {
        self.open[q * self.words..(q + 1) * self.words]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    pub fn to_attn_mask(&self) -> AttnMask {
        let open = (0..self.queries)
            .map(|q| self.open_columns(q).into_iter().map(|c| c as u32).collect())
            .collect();
        AttnMask::new(self.cols(), open).expect("columns in range")
    }
}

/// Build the Local Attention Mask: an `l_l x l_l` BEV window around each
/// query's BEV cell (clipped to the grid, never wrapping across rows) and an
/// `l_c x l_c` window on the query's camera feature cell (clipped to that
/// single view). Out-of-grid BEV cells and invisible camera projections
/// leave the respective block fully blocked.
pub fn build_local_attention_mask(
    projected: &[ProjectedQuery],
    grid: &BevGrid,
    rig: &CameraRig,
    windows: MaskWindows,
) -> Result<LocalAttentionMask> {
    windows.validate()?;
    let side = grid.side as i64;
    let (fh, fw) = (rig.feat_height as i64, rig.feat_width as i64);
    let per_view = rig.cells_per_view();
    let bev_len = grid.cells();
    let mut mask = LocalAttentionMask::fully_blocked(projected.len(), bev_len, rig.views() * per_view);
    let hl = (windows.lidar / 2) as i64;
    let hc = (windows.camera / 2) as i64;
    for (q, pq) in projected.iter().enumerate() {
        if pq.bev.inside {
            for dr in -hl..=hl {
                for dc in -hl..=hl {
                    let (r, c) = (pq.bev.row + dr, pq.bev.col + dc);
                    if (0..side).contains(&r) && (0..side).contains(&c) {
                        mask.unblock(q, (r * side + c) as usize);
                    }
                }
            }
        }
        if let Some(cam) = pq.camera {
            let base = bev_len + cam.view * per_view;
            for dr in -hc..=hc {
                for dc in -hc..=hc {
                    let (r, c) = (cam.row as i64 + dr, cam.col as i64 + dc);
                    if (0..fh).contains(&r) && (0..fw).contains(&c) {
                        mask.unblock(q, base + (r * fw + c) as usize);
                    }
                }
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_rig() -> CameraRig {
        CameraRig::surround(6, 320, 800, 40, 100, 70.0)
    }

    #[test]
    fn denormalize_examples() {
        let r = PcRange::default();
        assert_eq!(r.denormalize([0.5, 0.5, 0.5]).unwrap(), [0.0, 0.0, -1.0]);
        assert_eq!(r.denormalize([0.0, 0.0, 0.0]).unwrap(), [-54.0, -54.0, -5.0]);
        assert_eq!(r.denormalize([0.25, 0.75, 1.0]).unwrap(), [-27.0, 27.0, 3.0]);
        assert!(matches!(r.denormalize([1.2, 0.0, 0.0]), Err(MomeError::Domain(_))));
    }

    #[test]
    fn bev_cell_examples() {
        let g = BevGrid::new(180, PcRange::default());
        let c = g.cell(0.0, 0.0);
        assert_eq!((c.row, c.col, c.inside), (90, 90, true));
        let c = g.cell(-54.0, -54.0);
        assert_eq!((c.row, c.col), (0, 0));
        let c = g.cell(10.2, -3.6);
        assert_eq!((c.row, c.col), (84, 107));
        assert!(!g.cell(60.0, 0.0).inside);
        assert!(!g.cell(54.0, 0.0).inside);
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let rig = default_rig();
        let cell = rig.project([10.0, 0.0, 0.0]).unwrap();
        assert_eq!(cell.view, 0);
        assert!((cell.depth - 10.0).abs() < 1e-12);
        // Principal point (400, 160) scaled by 40/320.
        assert_eq!((cell.row, cell.col), (20, 50));
    }

    #[test]
    fn behind_every_camera_is_invisible() {
        let rig = default_rig();
        // Straight up from the origin: zero depth in every horizontal view.
        assert!(rig.project([0.0, 0.0, 3.0]).is_none());
        // Far below the rig: outside the vertical field of view everywhere.
        assert!(rig.project([1.0, 0.0, -30.0]).is_none());
    }

    #[test]
    fn overlap_picks_lowest_view() {
        let rig = default_rig();
        // Azimuth 150° lies in the overlap of view 2 (120°) and view 3 (180°).
        let a = 150f64.to_radians();
        let p = [20.0 * a.cos(), 20.0 * a.sin(), 0.0];
        let visible: Vec<usize> = (0..6).filter(|&v| rig.in_image(&rig.project_view(v, p))).collect();
        assert_eq!(visible, vec![2, 3]);
        assert_eq!(rig.project(p).unwrap().view, 2);
    }

    #[test]
    fn even_window_is_config_error() {
        let g = BevGrid::new(180, PcRange::default());
        let rig = default_rig();
        let err = build_local_attention_mask(&[], &g, &rig, MaskWindows { lidar: 4, camera: 15 });
        assert!(matches!(err, Err(MomeError::Config(_))));
    }

    #[test]
    fn interior_and_corner_window_counts() {
        let g = BevGrid::new(180, PcRange::default());
        let rig = default_rig();
        let interior = ProjectedQuery {
            bev: BevCell {
                row: 90,
                col: 90,
                inside: true,
            },
            bev_pos: (90.5, 90.5),
            camera: None,
        };
        let corner = ProjectedQuery {
            bev: BevCell {
                row: 0,
                col: 0,
                inside: true,
            },
            bev_pos: (0.5, 0.5),
            camera: None,
        };
        let m = build_local_attention_mask(&[interior, corner], &g, &rig, MaskWindows::default()).unwrap();
        assert_eq!(m.count_open(0), 25);
        assert!(m.open_columns(0).iter().all(|&c| c < m.bev_len()));
        assert_eq!(m.count_open(1), 9);
    }

    #[test]
    fn camera_window_stays_in_its_view() {
        let g = BevGrid::new(180, PcRange::default());
        let rig = default_rig();
        let q = ProjectedQuery {
            bev: BevCell {
                row: 0,
                col: 0,
                inside: false,
            },
            bev_pos: (-1.0, -1.0),
            camera: Some(CameraCell {
                view: 1,
                row: 0,
                col: 99,
                u: 799.0,
                v: 0.0,
                depth: 5.0,
            }),
        };
        let m = build_local_attention_mask(&[q], &g, &rig, MaskWindows::default()).unwrap();
        // 8 rows x 8 cols survive the corner clip.
        assert_eq!(m.count_open(0), 64);
        let per_view = rig.cells_per_view();
        for c in m.open_columns(0) {
            assert_eq!((c - m.bev_len()) / per_view, 1);
        }
    }
}

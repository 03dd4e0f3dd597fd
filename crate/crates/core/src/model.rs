//! The assembled model: geometry, fixed query set, positional codes, the
//! precomputed Local Attention Mask, and every learnable parameter.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::checkpoint::{read_params, write_params};
use crate::decoder::{init_decoder_params, DecoderConfig, Modality};
use crate::encode::{encode_scene, init_encoder_params, FeatureBundle, FeatureLayout, PositionalEncoding, SceneStats};
use crate::error::{config_err, MomeError, Result};
use crate::geometry::{
    build_local_attention_mask, project_queries, BevGrid, CameraRig, LocalAttentionMask, MaskWindows, PcRange,
    ProjectedQuery,
};
use crate::params::ParamSet;
use crate::routing::init_router_params;
use crate::scene::Scene;
use crate::tensor::Tensor;

/// Camera rig: either synthesised as an evenly spaced surround ring or
/// loaded from a JSON rig file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub views: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub feat_height: usize,
    pub feat_width: usize,
    pub hfov_deg: f64,
    pub file: Option<PathBuf>,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            views: 6,
            image_height: 320,
            image_width: 800,
            feat_height: 40,
            feat_width: 100,
            hfov_deg: 70.0,
            file: None,
        }
    }
}

impl RigConfig {
    pub fn build(&self) -> Result<CameraRig> {
        let rig = match &self.file {
            Some(p) => CameraRig::load(p)?,
            None => {
                if self.views == 0 || !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
                    return Err(config_err!("rig needs views > 0 and 0 < hfov < 180"));
                }
                CameraRig::surround(
                    self.views,
                    self.image_height,
                    self.image_width,
                    self.feat_height,
                    self.feat_width,
                    self.hfov_deg,
                )
            }
        };
        rig.validate()?;
        Ok(rig)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub range: PcRange,
    pub bev_side: usize,
    pub rig: RigConfig,
    pub windows: MaskWindows,
    pub decoder: DecoderConfig,
    /// Normalised height of every query reference point.
    pub query_z: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            range: PcRange::default(),
            bev_side: 180,
            rig: RigConfig::default(),
            windows: MaskWindows::default(),
            decoder: DecoderConfig::default(),
            query_z: 0.5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        self.windows.validate()?;
        self.decoder.validate()?;
        if self.bev_side == 0 {
            return Err(config_err!("bev_side must be positive"));
        }
        if !(0.0..=1.0).contains(&self.query_z) {
            return Err(config_err!("query_z must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Reference points on a regular BEV lattice, `ceil(sqrt(n))` columns.
pub fn grid_references(n: usize, z: f64) -> Vec<[f64; 3]> {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            [(c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64, z]
        })
        .collect()
}

/// Object queries: learnable embeddings live in the parameter set under
/// `query.embed`; reference points and their projections are fixed.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub refs: Vec<[f64; 3]>,
    pub projected: Vec<ProjectedQuery>,
    /// Positional code of each query, `N x D`.
    pub pe: Tensor,
}

pub struct Model {
    pub config: ModelConfig,
    pub grid: BevGrid,
    pub rig: CameraRig,
    pub layout: FeatureLayout,
    pub pe: PositionalEncoding,
    pub feat_pe: Tensor,
    pub queries: QuerySet,
    pub lam: LocalAttentionMask,
    pub mask: Arc<AttnMask>,
    pub params: ParamSet,
}

impl Model {
    /// Freshly initialised model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.decoder.d_model;
        let mut params = ParamSet::new();
        init_encoder_params(&mut params, d, &mut rng)?;
        init_decoder_params(&mut params, &config.decoder, &mut rng)?;
        init_router_params(&mut params, d, &mut rng)?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let grid = BevGrid::new(config.bev_side, config.range);
        let rig = config.rig.build()?;
        let layout = FeatureLayout::new(&grid, &rig);
        let pe = PositionalEncoding::new(config.decoder.d_model, config.decoder.pe_gain);
        let feat_pe = pe.features(&layout);
        let refs = grid_references(config.decoder.num_queries, config.query_z);
        let projected = project_queries(&refs, &grid, &rig)?;
        let query_pe = pe.queries(&projected, &layout);
        let lam = build_local_attention_mask(&projected, &grid, &rig, config.windows)?;
        let mask = Arc::new(lam.to_attn_mask());
        let embed = params.expect("query.embed")?;
        if params.value(embed).shape() != [config.decoder.num_queries, config.decoder.d_model] {
            return Err(config_err!("query.embed shape does not match the decoder config"));
        }
        Ok(Self {
            config,
            grid,
            rig,
            layout,
            pe,
            feat_pe,
            queries: QuerySet {
                refs,
                projected,
                pe: query_pe,
            },
            lam,
            mask,
            params,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.refs.len()
    }

    /// Cross-attention mask for queries `ids` decoded by expert `m`, if the
    /// decoder is configured to use one.
    pub fn expert_mask(&self, ids: &[usize], m: Modality) -> Option<Arc<AttnMask>> {
        self.config
            .decoder
            .masked_experts
            .then(|| Arc::new(self.mask.restrict(ids, m.rows(&self.layout))))
    }

    pub fn stats(&self, scene: &Scene) -> SceneStats {
        SceneStats::compute(scene, &self.grid, self.config.decoder.num_classes)
    }

    /// Encode one scene's statistics and attach positional codes.
    pub fn features(&self, g: &mut Graph, stats: &SceneStats) -> Result<(FeatureBundle, Var)> {
        let bundle = encode_scene(g, &self.params, stats)?;
        let fpe = g.constant(self.feat_pe.clone());
        Ok((bundle, fpe))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_tagged(path, None)
    }

    /// Save, recording the hash of the experiment config that produced the
    /// weights in the sidecar.
    pub fn save_tagged(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        write_params(&self.params, std::io::BufWriter::new(f))?;
        let sidecar = Sidecar {
            config: self.config.clone(),
            params: self.params.names().to_vec(),
            config_hash: config_hash.map(str::to_string),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side)
            .map_err(|e| MomeError::Format(format!("missing checkpoint sidecar {}: {e}", side.display())))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        let params = read_params(std::io::BufReader::new(std::fs::File::open(path)?))?;
        if params.names() != sidecar.params.as_slice() {
            return Err(MomeError::Format(
                "checkpoint parameters do not match the manifest".into(),
            ));
        }
        Self::with_params(sidecar.config, params)
    }
}

/// JSON stored next to a checkpoint: resolved model config and parameter
/// manifest.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    config: ModelConfig,
    params: Vec<String>,
    #[serde(default)]
    config_hash: Option<String>,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
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

    #[test]
    fn grid_references_cover_unit_square() {
        let r = grid_references(64, 0.5);
        assert_eq!(r.len(), 64);
        assert_eq!(r[0], [1.0 / 16.0, 1.0 / 16.0, 0.5]);
        assert_eq!(r[63], [15.0 / 16.0, 15.0 / 16.0, 0.5]);
        assert_eq!(grid_references(5, 0.5).len(), 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let m2 = Model::load(&p).unwrap();
        assert_eq!(m2.config, m.config);
        for id in m.params.ids() {
            assert_eq!(m.params.value(id), m2.params.value(id));
        }
    }
}

//! Transformer decoder shared by the three modality experts, plus the
//! classification and box heads.
//!
//! An expert is fully determined by the key/value slice of `F'_lc` it
//! attends to: LiDAR rows, camera rows, or all rows.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::encode::FeatureLayout;
use crate::error::{config_err, dim_err, Result};
use crate::geometry::PcRange;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
/// Number of box regression targets.
pub const BOX_DIMS: usize = 8;
/// Class-logit bias so that initial scores are about 0.01.
pub const CLASS_BIAS_INIT: f64 = -4.595;

/// Which slice of `F'_lc` an expert decodes against. Index order matches
/// the routing probability vector `[p_l, p_c, p_lc]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lidar,
    Camera,
    Fused,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Lidar, Modality::Camera, Modality::Fused];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Lidar => "l",
            Modality::Camera => "c",
            Modality::Fused => "lc",
        }
    }

    /// Row range of this expert's keys within `F'_lc`.
    pub fn rows(self, layout: &FeatureLayout) -> std::ops::Range<usize> {
        match self {
            Modality::Lidar => 0..layout.bev_len(),
            Modality::Camera => layout.bev_len()..layout.total(),
            Modality::Fused => 0..layout.total(),
        }
    }

    pub fn slice_len(self, layout: &FeatureLayout) -> usize {
        self.rows(layout).len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub ffn_mult: usize,
    /// Reuse one layer's weights at every depth.
    pub share_layers: bool,
    /// Scale applied to predicted centre offsets (normalised units).
    pub offset_scale: f64,
    /// Amplitude of the sinusoidal positional codes.
    pub pe_gain: f64,
    /// Start query/key projections of cross-attention at the identity so
    /// attention initially favours nearby positions.
    pub locality_init: bool,
    /// Restrict expert cross-attention to the Local Attention Mask windows
    /// within the expert's slice.
    pub masked_experts: bool,
    /// Add the feature positional code to cross-attention values as well as
    /// keys.
    pub pe_in_values: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            layers: 6,
            num_queries: 128,
            num_classes: 10,
            ffn_mult: 4,
            share_layers: false,
            offset_scale: 0.1,
            pe_gain: 2.0,
            locality_init: true,
            masked_experts: true,
            pe_in_values: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(config_err!(
                "head count {} does not divide model dim {}",
                self.heads,
                self.d_model
            ));
        }
        if self.layers == 0 || self.num_queries == 0 || self.num_classes == 0 || self.ffn_mult == 0 {
            return Err(config_err!("layers, queries, classes and ffn_mult must be positive"));
        }
        if !(self.offset_scale > 0.0) || !(self.pe_gain >= 0.0) {
            return Err(config_err!("offset_scale must be positive and pe_gain non-negative"));
        }
        Ok(())
    }

    /// Distinct layer weight sets.
    pub fn weight_layers(&self) -> usize {
        if self.share_layers {
            1
        } else {
            self.layers
        }
    }

    pub fn layer_prefix(&self, depth: usize) -> String {
        let i = if self.share_layers { 0 } else { depth };
        format!("decoder.layers.{i}")
    }
}

// ---- parameter initialisation ---------------------------------------------

fn insert_linear<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert_xavier(&format!("{prefix}.weight"), fan_in, fan_out, rng)?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn insert_norm(params: &mut ParamSet, prefix: &str, d: usize) -> Result<()> {
    params.insert(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Attention block parameters `{q,k,v,out}.{weight,bias}`.
pub fn init_mha<R: Rng>(params: &mut ParamSet, prefix: &str, d: usize, identity_qk: bool, rng: &mut R) -> Result<()> {
    for p in ["q", "k", "v", "out"] {
        insert_linear(params, &format!("{prefix}.{p}"), d, d, rng)?;
    }
    if identity_qk {
        for p in ["q", "k"] {
            let id = params.expect(&format!("{prefix}.{p}.weight"))?;
            let w = params.value_mut(id);
            for i in 0..d {
                w.data_mut()[i * d + i] += 1.0;
            }
        }
    }
    Ok(())
}

pub fn init_decoder_params<R: Rng>(params: &mut ParamSet, cfg: &DecoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let embed: Vec<f64> = (0..cfg.num_queries * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    params.insert("query.embed", Tensor::new(vec![cfg.num_queries, d], embed)?)?;
    for i in 0..cfg.weight_layers() {
        let p = format!("decoder.layers.{i}");
        init_mha(params, &format!("{p}.self_attn"), d, false, rng)?;
        insert_norm(params, &format!("{p}.norm1"), d)?;
        init_mha(params, &format!("{p}.cross_attn"), d, cfg.locality_init, rng)?;
        insert_norm(params, &format!("{p}.norm2"), d)?;
        insert_linear(params, &format!("{p}.ffn.fc1"), d, cfg.ffn_mult * d, rng)?;
        insert_linear(params, &format!("{p}.ffn.fc2"), cfg.ffn_mult * d, d, rng)?;
        insert_norm(params, &format!("{p}.norm3"), d)?;
    }
    insert_linear(params, "head.cls.fc1", d, d, rng)?;
    insert_linear(params, "head.cls.fc2", d, cfg.num_classes, rng)?;
    let b = params.expect("head.cls.fc2.bias")?;
    params.set_value(b, Tensor::full(&[cfg.num_classes], CLASS_BIAS_INIT))?;
    insert_linear(params, "head.box.fc1", d, d, rng)?;
    insert_linear(params, "head.box.fc2", d, BOX_DIMS, rng)?;
    Ok(())
}

// ---- building blocks -------------------------------------------------------

pub fn linear(g: &mut Graph, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_by_name(params, &format!("{prefix}.weight"))?;
    let b = g.param_by_name(params, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param_by_name(params, &format!("{prefix}.gain"))?;
    let bias = g.param_by_name(params, &format!("{prefix}.bias"))?;
    g.layernorm(x, gain, bias, LN_EPS)
}

/// Projected keys and values of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    pub k: Var,
    pub v: Var,
}

impl KeyValue {
    pub fn project(g: &mut Graph, params: &ParamSet, prefix: &str, key_in: Var, value_in: Var) -> Result<Self> {
        Ok(Self {
            k: linear(g, params, &format!("{prefix}.k"), key_in)?,
            v: linear(g, params, &format!("{prefix}.v"), value_in)?,
        })
    }

    pub fn slice(&self, g: &mut Graph, rows: std::ops::Range<usize>) -> Result<Self> {
        let total = g.shape(self.k)[0];
        if rows.start == 0 && rows.end == total {
            return Ok(*self);
        }
        Ok(Self {
            k: g.slice_rows(self.k, rows.start, rows.end)?,
            v: g.slice_rows(self.v, rows.start, rows.end)?,
        })
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.k)[0]
    }

    pub fn is_empty(&self, g: &Graph) -> bool {
        self.len(g) == 0
    }
}

/// Multi-head attention of `query_in` over already projected keys/values,
/// followed by the output projection.
pub fn mha(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
    query_in: Var,
    kv: KeyValue,
    mask: Option<Arc<AttnMask>>,
) -> Result<Var> {
    let q = linear(g, params, &format!("{prefix}.q"), query_in)?;
    let a = g.attention(q, kv.k, kv.v, heads, mask)?;
    linear(g, params, &format!("{prefix}.out"), a)
}

/// Cross-attention keys and values for every distinct layer weight set,
/// computed once over the whole of `F'_lc` (keys see `F + PE`).
pub fn project_memory(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &DecoderConfig,
    feats: Var,
    feat_pe: Var,
) -> Result<Vec<KeyValue>> {
    let key_in = g.add(feats, feat_pe)?;
    let value_in = if cfg.pe_in_values { key_in } else { feats };
    (0..cfg.weight_layers())
        .map(|i| KeyValue::project(g, params, &format!("decoder.layers.{i}.cross_attn"), key_in, value_in))
        .collect()
}

/// Restrict projected memory to one expert's slice.
pub fn memory_slice(
    g: &mut Graph,
    memory: &[KeyValue],
    modality: Modality,
    layout: &FeatureLayout,
) -> Result<Vec<KeyValue>> {
    memory.iter().map(|kv| kv.slice(g, modality.rows(layout))).collect()
}

/// Post-norm DETR decoder layer.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
    x: Var,
    query_pe: Var,
    memory: KeyValue,
    mask: Option<Arc<AttnMask>>,
) -> Result<Var> {
    let q_in = g.add(x, query_pe)?;
    let self_kv = KeyValue::project(g, params, &format!("{prefix}.self_attn"), q_in, x)?;
    let sa = mha(g, params, &format!("{prefix}.self_attn"), heads, q_in, self_kv, None)?;
    let x = g.add(x, sa)?;
    let x = layer_norm(g, params, &format!("{prefix}.norm1"), x)?;
    let q_in = g.add(x, query_pe)?;
    let ca = mha(g, params, &format!("{prefix}.cross_attn"), heads, q_in, memory, mask)?;
    let x = g.add(x, ca)?;
    let x = layer_norm(g, params, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, params, &format!("{prefix}.ffn.fc1"), x)?;
    let h = g.gelu(h);
    let h = linear(g, params, &format!("{prefix}.ffn.fc2"), h)?;
    let x = g.add(x, h)?;
    layer_norm(g, params, &format!("{prefix}.norm3"), x)
}

/// Attended key/value pairs, counted once per expert call as
/// `queries x slice length`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostCounter {
    pub pairs: u64,
}

impl CostCounter {
    pub fn add(&mut self, queries: usize, keys: usize) {
        self.pairs += (queries * keys) as u64;
    }
}

/// Run the full decoder stack for a query subset against one expert's
/// memory slice. `mask`, when given, is already restricted to the subset
/// and the slice. Returns `None` for an empty subset.
#[allow(clippy::too_many_arguments)]
pub fn expert_decode(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &DecoderConfig,
    tgt: Var,
    query_pe: Var,
    memory: &[KeyValue],
    mask: Option<Arc<AttnMask>>,
    counter: &mut CostCounter,
) -> Result<Option<Var>> {
    let n = g.shape(tgt)[0];
    if n == 0 {
        return Ok(None);
    }
    if memory.len() != cfg.weight_layers() {
        return Err(dim_err!(
            "expert_decode: {} memory projections for {} weight sets",
            memory.len(),
            cfg.weight_layers()
        ));
    }
    counter.add(n, memory[0].len(g));
    let mut x = tgt;
    for depth in 0..cfg.layers {
        let kv = memory[if cfg.share_layers { 0 } else { depth }];
        x = decoder_layer(
            g,
            params,
            &cfg.layer_prefix(depth),
            cfg.heads,
            x,
            query_pe,
            kv,
            mask.clone(),
        )?;
    }
    Ok(Some(x))
}

/// Raw head outputs: class logits `n x K` and box parameters `n x 8`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub boxes: Var,
}

/// Class and box heads. Box parameters are
/// `[ref + s·Δcenter, ln w, ln l, ln h, sin θ, cos θ]` in normalised units.
pub fn predict_heads(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &DecoderConfig,
    decoded: Var,
    refs: &[[f64; 3]],
) -> Result<HeadOutput> {
    let n = g.shape(decoded)[0];
    if refs.len() != n {
        return Err(dim_err!("predict_heads: {} references for {n} queries", refs.len()));
    }
    let h = linear(g, params, "head.cls.fc1", decoded)?;
    let h = g.relu(h);
    let logits = linear(g, params, "head.cls.fc2", h)?;
    let h = linear(g, params, "head.box.fc1", decoded)?;
    let h = g.relu(h);
    let raw = linear(g, params, "head.box.fc2", h)?;
    let s = cfg.offset_scale;
    let mut scale = Tensor::zeros(&[n, BOX_DIMS]);
    let mut shift = Tensor::zeros(&[n, BOX_DIMS]);
    for (i, r) in refs.iter().enumerate() {
        scale.row_mut(i).copy_from_slice(&[s, s, s, 1.0, 1.0, 1.0, 1.0, 1.0]);
        shift.row_mut(i)[..3].copy_from_slice(r);
    }
    let scale = g.constant(scale);
    let shift = g.constant(shift);
    let scaled = g.mul(raw, scale)?;
    let boxes = g.add(scaled, shift)?;
    Ok(HeadOutput { logits, boxes })
}

/// A decoded detection in metric coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub query: usize,
    pub center: [f64; 3],
    /// `(width, length, height)`
    pub size: [f64; 3],
    pub yaw: f64,
    /// Per-class sigmoid scores.
    pub scores: Vec<f64>,
}

impl Detection {
    pub fn best_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turn head outputs for queries `query_ids` into metric detections.
pub fn decode_detections(logits: &Tensor, boxes: &Tensor, query_ids: &[usize], range: &PcRange) -> Vec<Detection> {
    query_ids
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let b = boxes.row(i);
            let norm = b[6].hypot(b[7]);
            let (sn, cs) = if norm > 0.0 {
                (b[6] / norm, b[7] / norm)
            } else {
                (0.0, 1.0)
            };
            Detection {
                query: q,
                center: range.denormalize_unchecked([b[0], b[1], b[2]]),
                size: [b[3].exp(), b[4].exp(), b[5].exp()],
                yaw: sn.atan2(cs),
                scores: logits.row(i).iter().map(|&l| sigmoid(l)).collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            num_queries: 4,
            num_classes: 3,
            ..DecoderConfig::default()
        }
    }

    #[test]
    fn zero_head_weights_put_boxes_on_references() {
        let cfg = small_cfg();
        let mut params = ParamSet::new();
        init_decoder_params(&mut params, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for name in ["head.box.fc2.weight", "head.box.fc2.bias"] {
            let id = params.expect(name).unwrap();
            let shape = params.value(id).shape().to_vec();
            params.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 8], 0.3));
        let refs = [[0.5, 0.5, 0.5], [0.25, 0.75, 1.0]];
        let out = predict_heads(&mut g, &params, &cfg, x, &refs).unwrap();
        let dets = decode_detections(g.value(out.logits), g.value(out.boxes), &[0, 1], &PcRange::default());
        assert_eq!(dets[0].center, [0.0, 0.0, -1.0]);
        assert_eq!(dets[1].center, [-27.0, 27.0, 3.0]);
        assert_eq!(dets[1].size, [1.0, 1.0, 1.0]);
        assert_eq!(dets[0].yaw, 0.0);
    }

    #[test]
    fn zero_weight_layer_is_identity_on_normalised_rows() {
        let cfg = small_cfg();
        let mut params = ParamSet::new();
        init_decoder_params(&mut params, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            if name.starts_with("decoder.") && !name.contains("norm") {
                let shape = params.value(id).shape().to_vec();
                params.set_value(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..8).map(|j| if (i + j) % 2 == 0 { 1.0 } else { -1.0 }).collect())
            .collect();
        let x0 = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let pe = g.constant(Tensor::full(&[3, 8], 0.7));
        let f = g.constant(Tensor::full(&[5, 8], 0.2));
        let fpe = g.constant(Tensor::zeros(&[5, 8]));
        let mem = project_memory(&mut g, &params, &cfg, f, fpe).unwrap();
        let y = decoder_layer(&mut g, &params, "decoder.layers.0", 2, x, pe, mem[0], None).unwrap();
        assert!(g.value(y).max_abs_diff(&x0) < 1e-4);
    }

    #[test]
    fn empty_subset_decodes_to_nothing() {
        let cfg = small_cfg();
        let mut params = ParamSet::new();
        init_decoder_params(&mut params, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[5, 8], 0.2));
        let fpe = g.constant(Tensor::zeros(&[5, 8]));
        let mem = project_memory(&mut g, &params, &cfg, f, fpe).unwrap();
        let tgt = g.constant(Tensor::zeros(&[0, 8]));
        let pe = g.constant(Tensor::zeros(&[0, 8]));
        let mut counter = CostCounter::default();
        assert!(expert_decode(&mut g, &params, &cfg, tgt, pe, &mem, None, &mut counter)
            .unwrap()
            .is_none());
        assert_eq!(counter.pairs, 0);
    }

    #[test]
    fn bad_head_count_is_config_error() {
        let cfg = DecoderConfig {
            heads: 3,
            ..small_cfg()
        };
        assert!(cfg.validate().is_err());
    }
}

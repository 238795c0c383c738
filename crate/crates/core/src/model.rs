//! The localization network: ray encoding, map assembly, twin decoders with
//! cross-attention and per-token coordinate/confidence heads.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::frame::FrameTokens;
use crate::geometry::{normalize_scene, ray_direction, NormalizedScene, Pose};
use crate::solver::{Correspondence, CorrespondenceSet, PointFrame};
use crate::tensor::{Graph, Tensor, Var};

pub const RAY_INPUT_WIDTH: usize = 6;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Width of the incoming token descriptors.
    pub descriptor_width: usize,
    pub dim: usize,
    pub heads: usize,
    /// Decoder blocks per branch.
    pub blocks: usize,
    pub fourier_levels: usize,
    pub mlp_ratio: usize,
    /// Query tokens per frame; sizes the learned grid positional encoding.
    pub query_tokens: usize,
    /// Divide map translations and targets by the scene scale. Disabling this
    /// gives the raw-translation variant used in the scale ablation.
    pub normalize_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            descriptor_width: 32,
            dim: 64,
            heads: 4,
            blocks: 2,
            fourier_levels: 8,
            mlp_ratio: 4,
            query_tokens: 192,
            normalize_scale: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.descriptor_width == 0 || self.query_tokens == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.fourier_levels < 1 {
            return Err(Error::Config(
                "at least one Fourier level is required".into(),
            ));
        }
        Ok(())
    }

    pub fn ray_feature_width(&self) -> usize {
        RAY_INPUT_WIDTH * (1 + 2 * self.fourier_levels)
    }
}

/// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx)]` for each
/// coordinate in turn.
pub fn fourier_encode(x: &[f64], levels: usize) -> Result<Vec<f64>> {
    if levels < 1 {
        return Err(Error::InvalidInput("Fourier encoding needs L ≥ 1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Fourier encoding input".into()));
    }
    let mut out = Vec::with_capacity(x.len() * (1 + 2 * levels));
    for &v in x {
        out.push(v);
        let mut freq = std::f64::consts::PI;
        for _ in 0..levels {
            out.push((freq * v).sin());
            out.push((freq * v).cos());
            freq *= 2.0;
        }
    }
    Ok(out)
}

/// Fourier features of a ray (origin, unit direction).
pub fn ray_features(
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    levels: usize,
) -> Result<Vec<f64>> {
    if (direction.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "ray direction norm {} is not 1",
            direction.norm()
        )));
    }
    let raw = [
        origin.x,
        origin.y,
        origin.z,
        direction.x,
        direction.y,
        direction.z,
    ];
    fourier_encode(&raw, levels)
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = (1.0 / (3.0 * fan_in as f64)).sqrt();
        let w = Tensor::randn(&[fan_in, fan_out], std, self.rng);
        self.add(format!("{name}.w"), w);
        self.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.add(format!("{name}.g"), Tensor::full(&[d], 1.0));
        self.add(format!("{name}.b"), Tensor::zeros(&[d]));
    }

    fn attention(&mut self, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
    }
}

pub const BRANCHES: [&str; 2] = ["query", "map"];

impl NetworkParams {
    /// Random initialization; deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        b.linear("embed", config.descriptor_width, d);
        b.norm("embed.norm", d);
        let pos = Tensor::randn(&[config.query_tokens, d], 0.02, b.rng);
        b.add("query.pos".into(), pos);
        b.linear("ray", config.ray_feature_width(), d);
        for branch in BRANCHES {
            for l in 0..config.blocks {
                let p = format!("{branch}.{l}");
                b.norm(&format!("{p}.norm1"), d);
                b.attention(&format!("{p}.self"), d);
                b.norm(&format!("{p}.norm2"), d);
                b.norm(&format!("{p}.norm_ctx"), d);
                b.attention(&format!("{p}.cross"), d);
                b.norm(&format!("{p}.norm3"), d);
                b.linear(&format!("{p}.mlp1"), d, config.mlp_ratio * d);
                b.linear(&format!("{p}.mlp2"), config.mlp_ratio * d, d);
            }
            b.norm(&format!("{branch}.norm_out"), d);
            b.linear(&format!("{branch}.head"), d, 4);
        }
        let (names, tensors) = (b.names, b.tensors);
        Self::from_parts(config, names, tensors)
    }

    fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        let index: HashMap<String, usize> = names
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, n)| (n, i))
            .collect();
        if index.len() != names.len() {
            return Err(Error::Format("duplicate parameter names".into()));
        }
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named {name:?}")))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Weight decay applies to matrices only.
    pub fn decay_flags(&self) -> Vec<bool> {
        self.tensors.iter().map(|t| t.shape().len() == 2).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every parameter on `g`, as trainable leaves or constants.
    pub fn bind<'p>(&'p self, g: &mut Graph, trainable: bool) -> Result<Bound<'p>> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { params: self, vars })
    }

    /// Binds already-placed variables, one per parameter in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        Ok(Bound { params: self, vars })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("network");
        write_config(&mut c, &self.config);
        for (n, t) in self.names.iter().zip(&self.tensors) {
            c.put_tensor(format!("param/{n}"), t.clone());
        }
        c
    }

    /// Reads parameters written by [`NetworkParams::to_container`], possibly
    /// embedded in a larger container.
    pub fn from_container(c: &Container) -> Result<Self> {
        let config = read_config(c)?;
        let template = Self::init(config.clone(), 0)?;
        let mut tensors = Vec::with_capacity(template.tensors.len());
        for (n, t) in template.names.iter().zip(&template.tensors) {
            let loaded = c.tensor(&format!("param/{n}"))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {n}: stored shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            tensors.push(loaded.clone());
        }
        Self::from_parts(config, template.names, tensors)
    }
}

pub(crate) fn write_config(c: &mut Container, m: &ModelConfig) {
    c.put_u64s(
        "model/config",
        vec![
            m.descriptor_width as u64,
            m.dim as u64,
            m.heads as u64,
            m.blocks as u64,
            m.fourier_levels as u64,
            m.mlp_ratio as u64,
            m.query_tokens as u64,
            m.normalize_scale as u64,
        ],
    );
}

pub(crate) fn read_config(c: &Container) -> Result<ModelConfig> {
    let v = c.u64s("model/config")?;
    if v.len() != 8 {
        return Err(Error::Format(format!(
            "model config has {} fields",
            v.len()
        )));
    }
    let config = ModelConfig {
        descriptor_width: v[0] as usize,
        dim: v[1] as usize,
        heads: v[2] as usize,
        blocks: v[3] as usize,
        fourier_levels: v[4] as usize,
        mlp_ratio: v[5] as usize,
        query_tokens: v[6] as usize,
        normalize_scale: v[7] != 0,
    };
    config.validate()?;
    Ok(config)
}

/// Parameters placed on a graph.
pub struct Bound<'p> {
    params: &'p NetworkParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .params
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is part of every network"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let y = g.matmul(x, self.var(&format!("{name}.w")))?;
        g.add(y, self.var(&format!("{name}.b")))
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let n = g.mul(n, self.var(&format!("{name}.g")))?;
        g.add(n, self.var(&format!("{name}.b")))
    }

    /// Multi-head attention of `x` (queries) over `ctx` (keys and values).
    fn attention(&self, g: &mut Graph, x: Var, ctx: Var, name: &str) -> Result<Var> {
        let cfg = self.config();
        let dh = cfg.dim / cfg.heads;
        let q = self.linear(g, x, &format!("{name}.q"))?;
        let k = self.linear(g, ctx, &format!("{name}.k"))?;
        let v = self.linear(g, ctx, &format!("{name}.v"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_t(qh, kh, false, true)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s)?;
            heads.push(g.matmul(a, vh)?);
        }
        let o = g.concat_cols(&heads)?;
        self.linear(g, o, &format!("{name}.o"))
    }

    /// One decoder block: self-attention, cross-attention to the other
    /// branch, feed-forward; all pre-norm with residuals.
    pub fn block(&self, g: &mut Graph, x: Var, other: Var, prefix: &str) -> Result<Var> {
        let h = self.norm(g, x, &format!("{prefix}.norm1"))?;
        let a = self.attention(g, h, h, &format!("{prefix}.self"))?;
        let x = g.add(x, a)?;
        let h = self.norm(g, x, &format!("{prefix}.norm2"))?;
        let c = self.norm(g, other, &format!("{prefix}.norm_ctx"))?;
        let a = self.attention(g, h, c, &format!("{prefix}.cross"))?;
        let x = g.add(x, a)?;
        let h = self.norm(g, x, &format!("{prefix}.norm3"))?;
        let h = self.linear(g, h, &format!("{prefix}.mlp1"))?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, &format!("{prefix}.mlp2"))?;
        g.add(x, h)
    }

    /// Token descriptors (`n × m`) → embedded features (`n × d`).
    pub fn embed(&self, g: &mut Graph, descriptors: Var) -> Result<Var> {
        let e = self.linear(g, descriptors, "embed")?;
        self.norm(g, e, "embed.norm")
    }

    /// Query features: embedded descriptors plus the grid positional encoding.
    pub fn embed_query(&self, g: &mut Graph, descriptors: Var) -> Result<Var> {
        let rows = g.shape(descriptors)[0];
        if rows != self.config().query_tokens {
            return Err(Error::Shape(format!(
                "query has {rows} tokens, network expects {}",
                self.config().query_tokens
            )));
        }
        let e = self.embed(g, descriptors)?;
        g.add(e, self.var("query.pos"))
    }

    /// Projected ray encodings (`n × d`) from Fourier features.
    pub fn ray_tokens(&self, g: &mut Graph, ray_features: Var) -> Result<Var> {
        self.linear(g, ray_features, "ray")
    }

    /// Fused map features `R_n + f_n`.
    pub fn fuse_map(&self, g: &mut Graph, descriptors: Var, ray_features: Var) -> Result<Var> {
        let f = self.embed(g, descriptors)?;
        let r = self.ray_tokens(g, ray_features)?;
        g.add(f, r)
    }

    /// Runs both decoder branches; returns the final query and map features.
    pub fn decode(&self, g: &mut Graph, query: Var, map: Var) -> Result<(Var, Var)> {
        let d = self.config().dim;
        let (qs, ms) = (g.shape(query).to_vec(), g.shape(map).to_vec());
        if qs.len() != 2 || ms.len() != 2 || qs[1] != d || ms[1] != d {
            return Err(Error::Shape(format!(
                "decoder inputs {qs:?} and {ms:?} must both be n × {d}"
            )));
        }
        if ms[0] == 0 {
            return Err(Error::InvalidInput("map has no entries".into()));
        }
        let (mut q, mut m) = (query, map);
        for l in 0..self.config().blocks {
            let q_next = self.block(g, q, m, &format!("query.{l}"))?;
            let m_next = self.block(g, m, q, &format!("map.{l}"))?;
            q = q_next;
            m = m_next;
        }
        Ok((q, m))
    }

    /// Raw head output (`n × 4`: three coordinates, one confidence logit).
    pub fn head(&self, g: &mut Graph, features: Var, branch: &str) -> Result<Var> {
        let h = self.norm(g, features, &format!("{branch}.norm_out"))?;
        self.linear(g, h, &format!("{branch}.head"))
    }
}

/// Splits a raw head output into coordinates (`n × 3`) and confidences
/// `C = 1 + exp(raw)` (length `n`).
pub fn split_head(g: &mut Graph, raw: Var) -> Result<(Var, Var)> {
    let coords = g.slice_cols(raw, 0, 3)?;
    let logit = g.slice_cols(raw, 3, 1)?;
    let logit = g.sum_last(logit)?;
    let e = g.exp(logit)?;
    let conf = g.add_scalar(e, 1.0)?;
    Ok((coords, conf))
}

pub fn confidence_activation(raw: f64) -> f64 {
    1.0 + raw.exp()
}

// ---------------------------------------------------------------------------
// Map assembly

/// Map tokens sampled from the mapping frames, before fusion with the network
/// embedder. Ray features depend only on geometry, so they are computed here.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSample {
    pub descriptors: Tensor,
    pub ray_features: Tensor,
    pub frame_ids: Vec<u64>,
    /// (row, col) of each entry in its source frame.
    pub cells: Vec<(usize, usize)>,
    /// Ground truth in the normalized frame.
    pub ground_truth: Vec<Option<Vector3<f64>>>,
    pub normalization: NormalizedScene,
}

impl MapSample {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn fuse(&self, params: &NetworkParams) -> Result<MapRepresentation> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false)?;
        let d = g.constant(self.descriptors.clone())?;
        let r = g.constant(self.ray_features.clone())?;
        let fused = b.fuse_map(&mut g, d, r)?;
        let features = g.value(fused).clone();
        if !features.is_finite() {
            return Err(Error::NonFinite("fused map features".into()));
        }
        Ok(MapRepresentation {
            features,
            frame_ids: self.frame_ids.clone(),
            cells: self.cells.clone(),
            ground_truth: self.ground_truth.clone(),
            scale: self.normalization.scale,
            reference_pose: self.normalization.reference_pose,
        })
    }
}

/// Normalization of the mapping poses. Without scale normalization the
/// reference frame is still applied but the scale is fixed to one.
pub fn normalize_frames(frames: &[&FrameTokens], normalize_scale: bool) -> Result<NormalizedScene> {
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
    let mut norm = normalize_scene(&poses, 0)?;
    if !normalize_scale {
        let rel = crate::geometry::relative_poses(&poses, 0)?;
        norm.normalized_poses = rel;
        norm.scale = 1.0;
    }
    Ok(norm)
}

/// `(frame, token)` pairs whose descriptor is not all zeros. Empty tokens
/// carry no content and are never sampled.
pub fn occupied_tokens(frames: &[&FrameTokens]) -> Vec<(usize, usize)> {
    let mut pool = Vec::new();
    for (j, f) in frames.iter().enumerate() {
        for t in 0..f.token_count() {
            if f.descriptor(t).iter().any(|&x| x != 0.0) {
                pool.push((j, t));
            }
        }
    }
    pool
}

/// Samples `n` tokens uniformly without replacement from the non-empty tokens
/// of `frames`, with the first frame as the reference.
pub fn sample_map(
    frames: &[&FrameTokens],
    n: usize,
    seed: u64,
    config: &ModelConfig,
) -> Result<MapSample> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("no mapping frames".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("map size must be at least 1".into()));
    }
    let width = frames[0].width();
    if frames.iter().any(|f| f.width() != width) {
        return Err(Error::Shape(
            "mapping frames disagree on descriptor width".into(),
        ));
    }
    let pool = occupied_tokens(frames);
    if n > pool.len() {
        return Err(Error::InvalidInput(format!(
            "map size {n} exceeds the {} non-empty tokens available",
            pool.len()
        )));
    }
    let norm = normalize_frames(frames, config.normalize_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), n);

    let levels = config.fourier_levels;
    let mut desc = Vec::with_capacity(n * width);
    let mut rays = Vec::with_capacity(n * RAY_INPUT_WIDTH * (1 + 2 * levels));
    let mut frame_ids = Vec::with_capacity(n);
    let mut cells = Vec::with_capacity(n);
    let mut gts = Vec::with_capacity(n);
    for pick in picks.iter() {
        let (j, t) = pool[pick];
        let f = frames[j];
        let pose = &norm.normalized_poses[j];
        let (u, v) = f.grid.center_of_index(t)?;
        let dir = ray_direction(&f.intrinsics, pose, u, v)?;
        let origin = pose.translation;
        rays.extend(ray_features(&origin, &dir, levels)?);
        desc.extend_from_slice(f.descriptor(t));
        frame_ids.push(f.frame_id);
        cells.push((t / f.grid.cols, t % f.grid.cols));
        gts.push(
            f.ground_truth
                .as_ref()
                .and_then(|g| g[t])
                .map(|x| norm.to_normalized(&x)),
        );
    }
    Ok(MapSample {
        descriptors: Tensor::matrix(n, width, desc)?,
        ray_features: Tensor::matrix(n, config.ray_feature_width(), rays)?,
        frame_ids,
        cells,
        ground_truth: gts,
        normalization: norm,
    })
}

/// The sparse map: fused features of `N` sampled tokens plus the scale and
/// reference pose needed to return to scene coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MapRepresentation {
    /// `N × d` fused features.
    pub features: Tensor,
    pub frame_ids: Vec<u64>,
    pub cells: Vec<(usize, usize)>,
    pub ground_truth: Vec<Option<Vector3<f64>>>,
    pub scale: f64,
    pub reference_pose: Pose,
}

pub fn build_map(
    frames: &[&FrameTokens],
    n: usize,
    seed: u64,
    params: &NetworkParams,
) -> Result<MapRepresentation> {
    sample_map(frames, n, seed, &params.config)?.fuse(params)
}

impl MapRepresentation {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    /// Distinct source frames, in first-appearance order.
    pub fn source_frames(&self) -> Vec<u64> {
        let mut seen = Vec::new();
        for &f in &self.frame_ids {
            if !seen.contains(&f) {
                seen.push(f);
            }
        }
        seen
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("map");
        c.put_f64s("scale", vec![self.scale]);
        crate::synth::put_pose(&mut c, "reference_pose", &self.reference_pose);
        c.put_tensor("features", self.features.clone());
        c.put_u64s("frame_ids", self.frame_ids.clone());
        c.put_u64s(
            "cells",
            self.cells
                .iter()
                .flat_map(|&(r, cc)| [r as u64, cc as u64])
                .collect(),
        );
        c
    }

    /// Ground truth is training-only and not stored.
    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("map")?;
        let scale = c.f64s("scale")?;
        if scale.len() != 1 {
            return Err(Error::Format("map scale record malformed".into()));
        }
        let features = c.tensor("features")?.clone();
        let frame_ids = c.u64s("frame_ids")?.to_vec();
        let cells_raw = c.u64s("cells")?;
        if features.shape().len() != 2
            || features.rows() != frame_ids.len()
            || cells_raw.len() != 2 * frame_ids.len()
        {
            return Err(Error::Format(
                "map records disagree on the entry count".into(),
            ));
        }
        if frame_ids.is_empty() {
            return Err(Error::Format("map has no entries".into()));
        }
        let cells = cells_raw
            .chunks(2)
            .map(|p| (p[0] as usize, p[1] as usize))
            .collect();
        Ok(Self {
            ground_truth: vec![None; frame_ids.len()],
            features,
            frame_ids,
            cells,
            scale: scale[0],
            reference_pose: crate::synth::get_pose(c, "reference_pose")?,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

// ---------------------------------------------------------------------------
// Inference

/// Per-token scene points (normalized frame unless stated) and confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatePrediction {
    pub points: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
}

fn rows_to_prediction(raw: &Tensor) -> CoordinatePrediction {
    let n = raw.rows();
    let mut points = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for i in 0..n {
        let r = raw.row(i);
        points.push(Vector3::new(r[0], r[1], r[2]));
        confidence.push(confidence_activation(r[3]));
    }
    CoordinatePrediction { points, confidence }
}

/// Query head output mapped to the scene frame: `P₀ (s · X)`.
pub fn query_head(raw: &Tensor, scale: f64, reference_pose: &Pose) -> CoordinatePrediction {
    let mut p = rows_to_prediction(raw);
    for x in &mut p.points {
        *x = reference_pose.transform_point(&(*x * scale));
    }
    p
}

/// Mapping head output in the reference frame, scaled back by `s`.
pub fn mapping_head(raw: &Tensor, scale: f64) -> CoordinatePrediction {
    let mut p = rows_to_prediction(raw);
    for x in &mut p.points {
        *x *= scale;
    }
    p
}

/// Raw head outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub query_features: Tensor,
    pub map_features: Tensor,
    pub query_raw: Tensor,
    pub map_raw: Tensor,
}

/// Decodes a query against a prepared map.
pub fn forward(
    query: &FrameTokens,
    map: &MapRepresentation,
    params: &NetworkParams,
) -> Result<ForwardOutput> {
    if map.features.last_dim() != params.config.dim {
        return Err(Error::Shape(format!(
            "map features have width {}, network width is {}",
            map.features.last_dim(),
            params.config.dim
        )));
    }
    if query.width() != params.config.descriptor_width {
        return Err(Error::Shape(format!(
            "query descriptors have width {}, network expects {}",
            query.width(),
            params.config.descriptor_width
        )));
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g, false)?;
    let qd = g.constant(query.tokens.clone())?;
    let q = b.embed_query(&mut g, qd)?;
    let m = g.constant(map.features.clone())?;
    let (fq, fm) = b.decode(&mut g, q, m)?;
    let rq = b.head(&mut g, fq, "query")?;
    let rm = b.head(&mut g, fm, "map")?;
    Ok(ForwardOutput {
        query_features: g.value(fq).clone(),
        map_features: g.value(fm).clone(),
        query_raw: g.value(rq).clone(),
        map_raw: g.value(rm).clone(),
    })
}

/// One correspondence per query token: pixel center and predicted point in
/// the normalized frame.
pub fn forward_localize(
    query: &FrameTokens,
    map: &MapRepresentation,
    params: &NetworkParams,
) -> Result<CorrespondenceSet> {
    let out = forward(query, map, params)?;
    let pred = rows_to_prediction(&out.query_raw);
    let mut records = Vec::with_capacity(pred.points.len());
    for (i, (x, c)) in pred.points.iter().zip(&pred.confidence).enumerate() {
        // Empty tokens are never supervised, so their confidence means nothing.
        if query.descriptor(i).iter().all(|&d| d == 0.0) {
            continue;
        }
        let (u, v) = query.grid.center_of_index(i)?;
        records.push(Correspondence {
            pixel: (u, v),
            point: *x,
            confidence: *c,
        });
    }
    CorrespondenceSet::new(records, PointFrame::Normalized)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourier_examples() {
        let e = fourier_encode(&[0.0], 2).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        let e = fourier_encode(&[0.5], 1).unwrap();
        assert_eq!(e[0], 0.5);
        assert!((e[1] - 1.0).abs() < 1e-15);
        assert!(e[2].abs() < 1e-15);
        assert_eq!(fourier_encode(&[0.0; 6], 8).unwrap().len(), 102);
        assert!(fourier_encode(&[0.0], 0).is_err());
    }

    #[test]
    fn ray_features_reject_non_unit_direction() {
        let o = Vector3::zeros();
        assert!(ray_features(&o, &Vector3::new(0.0, 0.0, 2.0), 8).is_err());
        assert!(ray_features(&o, &Vector3::new(0.0, 0.0, 1.0), 8).is_ok());
    }

    #[test]
    fn confidence_of_zero_logit_is_two() {
        assert_eq!(confidence_activation(0.0), 2.0);
    }

    #[test]
    fn query_head_scales_and_places() {
        let raw = Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.0]).unwrap();
        let p = query_head(&raw, 10.0, &Pose::identity());
        assert!((p.points[0] - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        assert_eq!(p.confidence[0], 2.0);
        let p2 = query_head(&raw, 20.0, &Pose::identity());
        assert_eq!(p2.points[0], p.points[0] * 2.0);
    }

    #[test]
    fn parameters_are_consistent() {
        let p = NetworkParams::init(ModelConfig::default(), 1).unwrap();
        assert!(p.parameter_count() > 100_000);
        assert_eq!(p.get("query.pos").unwrap().shape(), &[192, 64]);
        let back = NetworkParams::from_container(&p.to_container()).unwrap();
        assert_eq!(back, p);
        let bad = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(NetworkParams::init(bad, 1).is_err());
    }
}

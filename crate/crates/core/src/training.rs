//! Confidence-weighted regression loss, overlap-constrained tuple sampling and
//! the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::frame::FrameTokens;
use crate::geometry::{project, NormalizedScene};
use crate::model::{occupied_tokens, sample_map, split_head, MapSample, NetworkParams};
use crate::rng::{derive_seed, rng_for};
use crate::synth::SceneRecord;
use crate::tensor::{cosine_lr, AdamW, AdamWConfig, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the `−log C` regularizer, shared by both branches.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Mapping frames per tuple.
    pub k: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub overlap_min: f64,
    pub overlap_max: f64,
    pub batch: usize,
    pub iterations: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Single-machine defaults.
    pub fn desk() -> Self {
        Self {
            k: 5,
            n_min: 250,
            n_max: 1000,
            overlap_min: 0.2,
            overlap_max: 0.85,
            batch: 8,
            iterations: 20_000,
            warmup: 1_000,
            peak_lr: 3e-4,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            checkpoint_every: 1_000,
        }
    }

    /// The large-scale recipe: batch 48, 615k iterations, 30k warmup, 1e-4.
    pub fn paper() -> Self {
        Self {
            batch: 48,
            iterations: 615_000,
            warmup: 30_000,
            peak_lr: 1e-4,
            checkpoint_every: 10_000,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown training preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.overlap_min
            && self.overlap_min < self.overlap_max
            && self.overlap_max <= 1.0)
        {
            return Err(Error::Config(format!(
                "overlap range [{}, {}] must satisfy 0 ≤ min < max ≤ 1",
                self.overlap_min, self.overlap_max
            )));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::Config(format!(
                "feature range [{}, {}]",
                self.n_min, self.n_max
            )));
        }
        if self.k < 1 || self.batch < 1 {
            return Err(Error::Config("k and batch must be positive".into()));
        }
        if !(self.loss.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.loss.alpha
            )));
        }
        if !(self.peak_lr > 0.0) || self.iterations == 0 {
            return Err(Error::Config(
                "learning rate and iteration count must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss

/// Ground-truth points of the query tokens in the normalized frame.
pub fn ground_truth_coords(
    query: &FrameTokens,
    norm: &NormalizedScene,
) -> Result<Vec<Option<Vector3<f64>>>> {
    Ok(query
        .ground_truth()?
        .iter()
        .map(|p| p.map(|x| norm.to_normalized(&x)))
        .collect())
}

pub fn regression_loss(x: &Vector3<f64>, target: &Vector3<f64>) -> f64 {
    (x - target).norm()
}

/// `C·ℓ − α log C` for one token.
pub fn confidence_term(confidence: f64, regression: f64, alpha: f64) -> f64 {
    confidence * regression - alpha * confidence.ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub query: f64,
    pub mapping: f64,
}

/// Predictions of one branch: points and confidences, aligned with targets.
#[derive(Debug, Clone, Copy)]
pub struct BranchPrediction<'a> {
    pub points: &'a [Vector3<f64>],
    pub confidence: &'a [f64],
    pub targets: &'a [Option<Vector3<f64>>],
}

fn branch_value(b: &BranchPrediction, alpha: f64) -> Result<(f64, usize)> {
    if b.points.len() != b.targets.len() || b.confidence.len() != b.targets.len() {
        return Err(Error::Shape("prediction and target counts differ".into()));
    }
    let mut sum = 0.0;
    let mut valid = 0;
    for ((x, c), t) in b.points.iter().zip(b.confidence).zip(b.targets) {
        if let Some(t) = t {
            sum += confidence_term(*c, regression_loss(x, t), alpha);
            valid += 1;
        }
    }
    Ok((sum, valid))
}

/// Sum of the confidence-weighted loss over the valid tokens of both
/// branches.
pub fn confidence_loss(
    query: BranchPrediction,
    mapping: BranchPrediction,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let (q, nq) = branch_value(&query, cfg.alpha)?;
    let (m, nm) = branch_value(&mapping, cfg.alpha)?;
    if nq + nm == 0 {
        return Err(Error::InvalidInput(
            "no valid tokens in either branch".into(),
        ));
    }
    Ok(LossBreakdown {
        total: q + m,
        query: q,
        mapping: m,
    })
}

/// Graph form of one branch's loss. `coords` is `n × 3`, `confidence` has
/// length `n`.
pub fn branch_loss(
    g: &mut Graph,
    coords: Var,
    confidence: Var,
    targets: &[Option<Vector3<f64>>],
    alpha: f64,
) -> Result<Var> {
    let n = targets.len();
    if g.shape(coords) != [n, 3] || g.shape(confidence) != [n] {
        return Err(Error::Shape(format!(
            "loss inputs {:?} / {:?} for {n} targets",
            g.shape(coords),
            g.shape(confidence)
        )));
    }
    let mut t = Vec::with_capacity(3 * n);
    let mut mask = Vec::with_capacity(n);
    for p in targets {
        match p {
            Some(x) => {
                t.extend(x.iter().copied());
                mask.push(1.0);
            }
            None => {
                t.extend([0.0; 3]);
                mask.push(0.0);
            }
        }
    }
    let t = g.constant(Tensor::matrix(n, 3, t)?)?;
    let mask = g.constant(Tensor::vector(mask))?;
    let diff = g.sub(coords, t)?;
    let sq = g.mul(diff, diff)?;
    let d2 = g.sum_last(sq)?;
    let dist = g.sqrt(d2)?;
    let weighted = g.mul(confidence, dist)?;
    let logc = g.log(confidence)?;
    let reg = g.scale(logc, alpha)?;
    let term = g.sub(weighted, reg)?;
    let masked = g.mul(term, mask)?;
    g.sum(masked)
}

// ---------------------------------------------------------------------------
// Overlap and tuple sampling

/// Relative depth tolerance for counting a reprojected point as seen.
pub const OVERLAP_DEPTH_TOLERANCE: f64 = 0.05;

/// Fraction of `a`'s valid tokens whose point lands on a valid token of `b`
/// at a consistent depth.
pub fn overlap_score(a: &FrameTokens, b: &FrameTokens) -> Result<f64> {
    if a.scene_id != b.scene_id {
        return Err(Error::InvalidInput(format!(
            "frames from scenes {} and {}",
            a.scene_id, b.scene_id
        )));
    }
    let ga = a.ground_truth()?;
    let gb = b.ground_truth()?;
    let mut total = 0usize;
    let mut seen = 0usize;
    for x in ga.iter().flatten() {
        total += 1;
        let Some(p) = project(&b.pose, &b.intrinsics, x) else {
            continue;
        };
        let Some(t) = b.grid.token_at(p.u, p.v) else {
            continue;
        };
        if let Some(y) = gb[t] {
            let depth_b = b.pose.inverse_transform_point(&y).z;
            if (depth_b - p.depth).abs() <= OVERLAP_DEPTH_TOLERANCE * p.depth {
                seen += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    })
}

/// Pairwise overlaps of every frame in every scene, computed once.
#[derive(Debug, Clone)]
pub struct OverlapTable {
    /// `scores[s][i][j]` = overlap of frame `i` into frame `j` of scene `s`,
    /// frames ordered mapping first, then queries.
    pub scores: Vec<Vec<Vec<f64>>>,
}

impl OverlapTable {
    pub fn new(scenes: &[SceneRecord]) -> Result<Self> {
        let scores = scenes
            .par_iter()
            .map(|s| {
                let frames: Vec<&FrameTokens> = s.all_frames().collect();
                frames
                    .iter()
                    .map(|a| {
                        frames
                            .iter()
                            .map(|b| overlap_score(a, b))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scores })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingTuple<'a> {
    pub scene: usize,
    pub query: &'a FrameTokens,
    pub mapping: Vec<&'a FrameTokens>,
    pub n: usize,
}

pub const TUPLE_ATTEMPTS: usize = 100;

/// Draws a query uniformly, then `k` distinct mapping frames among those whose
/// overlap with the query lies in the configured range, then `N`.
pub fn sample_training_tuple<'a, R: Rng + ?Sized>(
    scenes: &'a [SceneRecord],
    overlaps: &OverlapTable,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingTuple<'a>> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no training scenes".into()));
    }
    for _ in 0..TUPLE_ATTEMPTS {
        let s = rng.random_range(0..scenes.len());
        let frames: Vec<&FrameTokens> = scenes[s].all_frames().collect();
        let q = rng.random_range(0..frames.len());
        let candidates: Vec<usize> = (0..frames.len())
            .filter(|&j| {
                let o = overlaps.scores[s][q][j];
                j != q && o >= cfg.overlap_min && o <= cfg.overlap_max
            })
            .collect();
        if candidates.len() < cfg.k {
            continue;
        }
        let picks = rand::seq::index::sample(rng, candidates.len(), cfg.k);
        let mapping: Vec<&FrameTokens> = picks.iter().map(|i| frames[candidates[i]]).collect();
        let available = occupied_tokens(&mapping).len();
        if available == 0 {
            continue;
        }
        let n = rng.random_range(cfg.n_min..=cfg.n_max).min(available);
        return Ok(TrainingTuple {
            scene: s,
            query: frames[q],
            mapping,
            n,
        });
    }
    Err(Error::Sampling(format!(
        "no scene admitted a query with {} mapping frames in overlap range [{}, {}] after {TUPLE_ATTEMPTS} attempts",
        cfg.k, cfg.overlap_min, cfg.overlap_max
    )))
}

// ---------------------------------------------------------------------------
// Forward/backward for one tuple

/// Inputs of one training sample, independent of the network weights.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub query_tokens: Tensor,
    pub query_targets: Vec<Option<Vector3<f64>>>,
    pub map: MapSample,
}

pub fn prepare_sample(
    tuple: &TrainingTuple,
    params: &NetworkParams,
    seed: u64,
) -> Result<PreparedSample> {
    let map = sample_map(&tuple.mapping, tuple.n, seed, &params.config)?;
    let query_targets = ground_truth_coords(tuple.query, &map.normalization)?;
    Ok(PreparedSample {
        query_tokens: tuple.query.tokens.clone(),
        query_targets,
        map,
    })
}

/// Builds the full loss on `g` with the network bound to `bound`.
pub fn sample_loss_graph(
    g: &mut Graph,
    bound: &crate::model::Bound,
    sample: &PreparedSample,
    alpha: f64,
) -> Result<(Var, Var, Var)> {
    let qd = g.constant(sample.query_tokens.clone())?;
    let md = g.constant(sample.map.descriptors.clone())?;
    let mr = g.constant(sample.map.ray_features.clone())?;
    let q = bound.embed_query(g, qd)?;
    let m = bound.fuse_map(g, md, mr)?;
    let (fq, fm) = bound.decode(g, q, m)?;
    let rq = bound.head(g, fq, "query")?;
    let rm = bound.head(g, fm, "map")?;
    let (xq, cq) = split_head(g, rq)?;
    let (xm, cm) = split_head(g, rm)?;
    let lq = branch_loss(g, xq, cq, &sample.query_targets, alpha)?;
    let lm = branch_loss(g, xm, cm, &sample.map.ground_truth, alpha)?;
    let total = g.add(lq, lm)?;
    Ok((total, lq, lm))
}

#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: LossBreakdown,
    pub grads: Vec<Tensor>,
}

pub fn sample_gradient(
    params: &NetworkParams,
    sample: &PreparedSample,
    alpha: f64,
) -> Result<SampleGradient> {
    let mut g = Graph::checked();
    let bound = params.bind(&mut g, true)?;
    let (total, lq, lm) = sample_loss_graph(&mut g, &bound, sample, alpha)?;
    let loss = LossBreakdown {
        total: g.value(total).item(),
        query: g.value(lq).item(),
        mapping: g.value(lm).item(),
    };
    g.backward(total)?;
    let vars = bound.vars().to_vec();
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(SampleGradient { loss, grads })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub query_loss: f64,
    pub mapping_loss: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "iteration,lr,loss,query_loss,mapping_loss,wall_ms";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:.9},{:.9},{:.9},{}",
            self.iteration, self.lr, self.loss, self.query_loss, self.mapping_loss, self.wall_ms
        )
    }
}

/// Training state that can be written to disk and resumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub optimizer: AdamW,
    /// Iterations completed.
    pub iteration: u64,
    pub config: TrainConfig,
    pub history: Vec<LogRow>,
}

impl Checkpoint {
    pub fn new(params: NetworkParams, config: TrainConfig) -> Self {
        let optimizer = AdamW::new(config.optimizer, params.tensors());
        Self {
            params,
            optimizer,
            iteration: 0,
            config,
            history: Vec::new(),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("checkpoint");
        for (name, rec) in self.params.to_container().records() {
            c.push(name.clone(), rec.clone());
        }
        c.put_u64("train/iteration", self.iteration);
        c.put_u64("adam/step", self.optimizer.step);
        for (i, n) in self.params.names().iter().enumerate() {
            c.put_tensor(
                format!("adam/m/{n}"),
                self.optimizer.first_moment[i].clone(),
            );
            c.put_tensor(
                format!("adam/v/{n}"),
                self.optimizer.second_moment[i].clone(),
            );
        }
        let o = &self.config.optimizer;
        c.put_f64s("adam/config", vec![o.beta1, o.beta2, o.eps, o.weight_decay]);
        c.put_text("train/config", train_config_text(&self.config));
        let cols = 6;
        let mut hist = Vec::with_capacity(self.history.len() * cols);
        for r in &self.history {
            hist.extend([
                r.iteration as f64,
                r.lr,
                r.loss,
                r.query_loss,
                r.mapping_loss,
                r.wall_ms as f64,
            ]);
        }
        c.put_tensor(
            "train/history",
            Tensor::matrix(self.history.len(), cols, hist).expect("history shape"),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let params = NetworkParams::from_container(c)?;
        let ac = c.f64s("adam/config")?;
        if ac.len() != 4 {
            return Err(Error::Format("optimizer config malformed".into()));
        }
        let opt_cfg = AdamWConfig {
            beta1: ac[0],
            beta2: ac[1],
            eps: ac[2],
            weight_decay: ac[3],
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (n, t) in params.names().iter().zip(params.tensors()) {
            let m = c.tensor(&format!("adam/m/{n}"))?;
            let v = c.tensor(&format!("adam/v/{n}"))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "optimizer moments for {n} have the wrong shape"
                )));
            }
            first.push(m.clone());
            second.push(v.clone());
        }
        let optimizer = AdamW {
            config: opt_cfg,
            step: c.u64("adam/step")?,
            first_moment: first,
            second_moment: second,
        };
        let mut config = parse_train_config_text(c.text("train/config")?)?;
        config.optimizer = opt_cfg;
        let h = c.tensor("train/history")?;
        let history = (0..h.rows())
            .map(|i| {
                let r = h.row(i);
                LogRow {
                    iteration: r[0] as u64,
                    lr: r[1],
                    loss: r[2],
                    query_loss: r[3],
                    mapping_loss: r[4],
                    wall_ms: r[5] as u64,
                }
            })
            .collect();
        Ok(Self {
            params,
            optimizer,
            iteration: c.u64("train/iteration")?,
            config,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        self.to_container().save(&tmp)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Loads network weights from either a checkpoint or a bare network file.
pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let c = Container::load(path)?;
    NetworkParams::from_container(&c)
}

fn train_config_text(c: &TrainConfig) -> String {
    format!(
        "k={}\nn_min={}\nn_max={}\noverlap_min={:e}\noverlap_max={:e}\nbatch={}\niterations={}\nwarmup={}\npeak_lr={:e}\nseed={}\nalpha={:e}\ncheckpoint_every={}\n",
        c.k,
        c.n_min,
        c.n_max,
        c.overlap_min,
        c.overlap_max,
        c.batch,
        c.iterations,
        c.warmup,
        c.peak_lr,
        c.seed,
        c.loss.alpha,
        c.checkpoint_every
    )
}

fn parse_train_config_text(text: &str) -> Result<TrainConfig> {
    let mut c = TrainConfig::desk();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
        let f = || -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad value for {k}: {v:?}")))
        };
        let u = || -> Result<u64> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad value for {k}: {v:?}")))
        };
        match k {
            "k" => c.k = u()? as usize,
            "n_min" => c.n_min = u()? as usize,
            "n_max" => c.n_max = u()? as usize,
            "overlap_min" => c.overlap_min = f()?,
            "overlap_max" => c.overlap_max = f()?,
            "batch" => c.batch = u()? as usize,
            "iterations" => c.iterations = u()?,
            "warmup" => c.warmup = u()?,
            "peak_lr" => c.peak_lr = f()?,
            "seed" => c.seed = u()?,
            "alpha" => c.loss.alpha = f()?,
            "checkpoint_every" => c.checkpoint_every = u()?,
            other => return Err(Error::Format(format!("unknown training key {other:?}"))),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only CSV log.
    pub log_path: Option<PathBuf>,
    /// Record wall-clock time in the log; off keeps logs reproducible.
    pub record_timing: bool,
    /// Stop after this many iterations in this call (for tests).
    pub max_steps: Option<u64>,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Seed of tuple `b` at iteration `it`.
pub fn tuple_seed(seed: u64, iteration: u64, b: usize) -> u64 {
    derive_seed(seed, &[iteration, b as u64])
}

/// One optimization step; returns the batch-mean losses.
pub fn train_step(
    ckpt: &mut Checkpoint,
    scenes: &[SceneRecord],
    overlaps: &OverlapTable,
) -> Result<LossBreakdown> {
    let cfg = ckpt.config.clone();
    let it = ckpt.iteration;
    let lr = cosine_lr(it, cfg.iterations, cfg.warmup, cfg.peak_lr)?;
    let params = &ckpt.params;
    let results: Vec<Result<SampleGradient>> = (0..cfg.batch)
        .into_par_iter()
        .map(|b| {
            let seed = tuple_seed(cfg.seed, it, b);
            let mut rng = rng_for(seed, &[0]);
            let tuple = sample_training_tuple(scenes, overlaps, &cfg, &mut rng)?;
            let sample = prepare_sample(&tuple, params, derive_seed(seed, &[1]))?;
            sample_gradient(params, &sample, cfg.loss.alpha).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("iteration {it}, tuple seed {seed:#x}: {msg}"))
                }
                other => other,
            })
        })
        .collect();
    // Reduce in batch order so the result does not depend on thread count.
    let mut grads: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut mean = LossBreakdown {
        total: 0.0,
        query: 0.0,
        mapping: 0.0,
    };
    let inv = 1.0 / cfg.batch as f64;
    for r in results {
        let r = r?;
        mean.total += r.loss.total * inv;
        mean.query += r.loss.query * inv;
        mean.mapping += r.loss.mapping * inv;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += x * inv;
            }
        }
    }
    if !mean.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "iteration {it}: loss {}",
            mean.total
        )));
    }
    let decay = ckpt.params.decay_flags();
    ckpt.optimizer
        .step(ckpt.params.tensors_mut(), &grads, &decay, lr)?;
    if !ckpt.params.is_finite() {
        return Err(Error::NonFinite(format!(
            "iteration {it}: parameters after update"
        )));
    }
    ckpt.iteration += 1;
    Ok(mean)
}

/// Runs (or resumes) training until `config.iterations`.
pub fn train<F>(
    scenes: &[SceneRecord],
    mut ckpt: Checkpoint,
    opts: &TrainOptions,
    mut progress: F,
) -> Result<Checkpoint>
where
    F: FnMut(&LogRow),
{
    ckpt.config.validate()?;
    let overlaps = OverlapTable::new(scenes)?;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match &opts.log_path {
        Some(p) => {
            let fresh = !p.exists() || ckpt.iteration == 0;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(p)?;
            if fresh {
                writeln!(f, "{LOG_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let start = Instant::now();
    let mut steps = 0;
    while ckpt.iteration < ckpt.config.iterations {
        if opts.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let it = ckpt.iteration;
        let lr = cosine_lr(
            it,
            ckpt.config.iterations,
            ckpt.config.warmup,
            ckpt.config.peak_lr,
        )?;
        let loss = train_step(&mut ckpt, scenes, &overlaps)?;
        steps += 1;
        let row = LogRow {
            iteration: it,
            lr,
            loss: loss.total,
            query_loss: loss.query,
            mapping_loss: loss.mapping,
            wall_ms: if opts.record_timing {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
        }
        progress(&row);
        ckpt.history.push(row);
        if let Some(dir) = &opts.checkpoint_dir {
            let every = ckpt.config.checkpoint_every;
            if every > 0 && ckpt.iteration.is_multiple_of(every) {
                ckpt.save(dir.join(format!("step-{:08}.ckpt", ckpt.iteration)))?;
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        if ckpt.iteration >= ckpt.config.iterations {
            ckpt.save(dir.join(FINAL_CHECKPOINT))?;
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!((confidence_term(2.0, 1.0, 0.2) - 1.861_370_563_888_011).abs() < 1e-12);
        assert_eq!(confidence_term(1.0, 0.7, 0.2), 0.7);
        assert_eq!(
            regression_loss(&Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros()),
            1.0
        );
    }

    #[test]
    fn presets_and_validation() {
        let d = TrainConfig::desk();
        assert_eq!(
            (d.k, d.n_min, d.n_max, d.batch, d.iterations),
            (5, 250, 1000, 8, 20_000)
        );
        let p = TrainConfig::paper();
        assert_eq!(
            (p.batch, p.iterations, p.warmup, p.peak_lr),
            (48, 615_000, 30_000, 1e-4)
        );
        assert!(TrainConfig::preset("cluster").is_err());
        let bad = TrainConfig {
            overlap_min: 0.9,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let back = parse_train_config_text(&train_config_text(&p)).unwrap();
        assert_eq!(back, p);
    }
}

//! Run configuration: a flat set of dotted keys (`synth.points = 2000`),
//! read from TOML and written back in a fixed order so a run can be replayed
//! from the file it emits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{LocalizeConfig, Threshold};
use crate::geometry::TokenGrid;
use crate::model::ModelConfig;
use crate::retrieval::SelectionStrategy;
use crate::solver::SolverConfig;
use crate::synth::{default_intrinsics, DatasetConfig, TrajectoryConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub scenes: usize,
    pub points: usize,
    pub extent: f64,
    pub descriptor_width: usize,
    pub noise: f64,
    pub visibility_falloff: f64,
    pub split_ratio: usize,
    pub mapping_frames: usize,
    pub query_frames: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub height: f64,
    pub look_jitter: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            scenes: 9,
            points: d.point_count,
            extent: d.extent,
            descriptor_width: d.descriptor_width,
            noise: d.noise,
            visibility_falloff: d.visibility_falloff,
            split_ratio: d.split_ratio,
            mapping_frames: d.mapping.frames,
            query_frames: d.query.frames,
            radius_min: d.mapping.radius.0,
            radius_max: d.mapping.radius.1,
            height: d.mapping.height.1,
            look_jitter: d.mapping.look_jitter,
            grid_rows: d.mapping.grid.rows,
            grid_cols: d.mapping.grid.cols,
            patch: d.mapping.grid.patch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub thresholds: Vec<Threshold>,
    pub frame_counts: Vec<usize>,
    pub feature_counts: Vec<usize>,
    /// Map size for the frame-count sweep.
    pub sweep_n: usize,
    /// Frame count for the feature-count sweep.
    pub sweep_k: usize,
    pub scale_factor: f64,
    pub sweep_frames: bool,
    pub sweep_features: bool,
    pub ablation: bool,
}

/// Input artifacts of a command. Empty paths and negative ids mean unset.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSettings {
    pub dataset: String,
    pub checkpoint: String,
    pub raw_checkpoint: String,
    pub map: String,
    pub results: String,
    pub index: String,
    pub resume: String,
    pub scene: i64,
    pub query: i64,
}

impl Default for InputSettings {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            checkpoint: String::new(),
            raw_checkpoint: String::new(),
            map: String::new(),
            results: String::new(),
            index: String::new(),
            resume: String::new(),
            scene: -1,
            query: -1,
        }
    }
}

fn opt_path(s: &str) -> Option<PathBuf> {
    (!s.is_empty()).then(|| PathBuf::from(s))
}

impl InputSettings {
    pub fn dataset(&self) -> Option<PathBuf> {
        opt_path(&self.dataset)
    }
    pub fn checkpoint(&self) -> Option<PathBuf> {
        opt_path(&self.checkpoint)
    }
    pub fn raw_checkpoint(&self) -> Option<PathBuf> {
        opt_path(&self.raw_checkpoint)
    }
    pub fn map(&self) -> Option<PathBuf> {
        opt_path(&self.map)
    }
    pub fn results(&self) -> Option<PathBuf> {
        opt_path(&self.results)
    }
    pub fn index(&self) -> Option<PathBuf> {
        opt_path(&self.index)
    }
    pub fn resume(&self) -> Option<PathBuf> {
        opt_path(&self.resume)
    }
    pub fn scene(&self) -> Option<u64> {
        u64::try_from(self.scene).ok()
    }
    pub fn query(&self) -> Option<u64> {
        u64::try_from(self.query).ok()
    }
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            thresholds: crate::eval::default_thresholds(SynthSettings::default().extent),
            frame_counts: vec![1, 2, 5, 10, 20],
            feature_counts: vec![64, 128, 256, 512],
            sweep_n: 768,
            sweep_k: 5,
            scale_factor: 10.0,
            sweep_frames: false,
            sweep_features: false,
            ablation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub threads: usize,
    /// Record wall-clock columns; off keeps every output reproducible.
    pub timing: bool,
    /// Localize also writes points, patches and cameras for plotting.
    pub viz: bool,
    pub synth: SynthSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub strategy: SelectionStrategy,
    pub topk: usize,
    pub map_n: usize,
    pub eval: EvalSettings,
    pub input: InputSettings,
    /// Random points per case in the gradient suite.
    pub grad_points: usize,
    /// Random points for the full-network case.
    pub grad_network_points: usize,
    /// Run the gradient suite before training.
    pub grad_before_train: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs"),
            threads: 0,
            timing: false,
            viz: false,
            synth: SynthSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            solver: SolverConfig::default(),
            strategy: SelectionStrategy::Retrieval,
            topk: 5,
            map_n: 256,
            eval: EvalSettings::default(),
            input: InputSettings::default(),
            grad_points: 100,
            grad_network_points: 1,
            grad_before_train: false,
        }
    }
}

/// Every key with its one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed"),
    ("output", "output directory"),
    ("threads", "worker threads (0 = all cores)"),
    ("io.timing", "record wall-clock columns"),
    ("io.viz", "localize also writes visualization files"),
    ("synth.scenes", "scene count"),
    ("synth.points", "points per scene"),
    ("synth.extent", "side of the point box, scene units"),
    ("synth.descriptor_width", "raw descriptor width"),
    ("synth.noise", "per-token descriptor noise sigma"),
    (
        "synth.visibility_falloff",
        "relative-depth falloff of member weights (0 = plain mean)",
    ),
    ("synth.split_ratio", "one test scene per this many scenes"),
    ("synth.mapping_frames", "mapping frames per scene"),
    ("synth.query_frames", "query frames per scene"),
    ("synth.radius_min", "smallest orbit radius"),
    ("synth.radius_max", "largest orbit radius"),
    ("synth.height", "camera height range is [-height, height]"),
    ("synth.look_jitter", "look-at jitter, radians"),
    ("synth.grid_rows", "token rows"),
    ("synth.grid_cols", "token columns"),
    ("synth.patch", "patch size, pixels"),
    ("model.dim", "feature width"),
    ("model.heads", "attention heads"),
    ("model.blocks", "decoder blocks per branch"),
    (
        "model.fourier_levels",
        "Fourier frequencies per ray coordinate",
    ),
    ("model.mlp_ratio", "MLP hidden width over feature width"),
    (
        "model.normalize_scale",
        "divide translations by the scene scale",
    ),
    ("train.k", "mapping frames per tuple"),
    ("train.n_min", "smallest map size"),
    ("train.n_max", "largest map size"),
    ("train.overlap_min", "smallest query/mapping overlap"),
    ("train.overlap_max", "largest query/mapping overlap"),
    ("train.batch", "tuples per step"),
    ("train.iterations", "optimizer steps"),
    ("train.warmup", "linear warmup steps"),
    ("train.peak_lr", "peak learning rate"),
    ("train.alpha", "confidence regularizer weight"),
    ("train.weight_decay", "AdamW weight decay"),
    ("train.beta1", "AdamW beta1"),
    ("train.beta2", "AdamW beta2"),
    ("train.eps", "AdamW epsilon"),
    (
        "train.checkpoint_every",
        "checkpoint period in steps (0 = final only)",
    ),
    ("solver.tau", "confidence threshold"),
    ("solver.cap", "correspondence cap"),
    (
        "solver.inlier_threshold",
        "RANSAC reprojection threshold, pixels",
    ),
    ("solver.max_iterations", "RANSAC iteration budget"),
    ("solver.confidence", "RANSAC success confidence"),
    ("solver.refine_iterations", "Levenberg-Marquardt iterations"),
    ("retrieval.strategy", "retrieval | random | uniform"),
    ("retrieval.topk", "mapping frames per query"),
    ("map.n", "map size"),
    ("eval.thresholds", "translation:degrees pairs"),
    ("eval.frame_counts", "mapping-frame sweep"),
    ("eval.feature_counts", "map-size sweep"),
    ("eval.sweep_n", "map size during the frame sweep"),
    ("eval.sweep_k", "frame count during the map-size sweep"),
    (
        "eval.scale_factor",
        "scene enlargement for the scale ablation",
    ),
    ("eval.sweep_frames", "run the mapping-frame sweep"),
    ("eval.sweep_features", "run the map-size sweep"),
    ("eval.ablation", "run the scale ablation"),
    ("grad.points", "random points per gradient-check case"),
    (
        "grad.before_train",
        "run the gradient suite before training",
    ),
    (
        "grad.network_points",
        "random points for the whole-network case",
    ),
    ("input.dataset", "dataset file"),
    ("input.checkpoint", "network or checkpoint file"),
    (
        "input.raw_checkpoint",
        "raw-translation network for the scale ablation",
    ),
    ("input.map", "precomputed map file"),
    ("input.results", "result CSV to aggregate"),
    ("input.index", "retrieval index file"),
    ("input.resume", "checkpoint to resume training from"),
    ("input.scene", "scene id (-1 = every test scene)"),
    ("input.query", "query frame id (-1 = every query)"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        let m = &mut self.model;
        let t = &mut self.train;
        let o = &mut self.solver;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output" => self.output = PathBuf::from(v),
            "threads" => self.threads = parse(key, v)?,
            "io.timing" => self.timing = parse(key, v)?,
            "io.viz" => self.viz = parse(key, v)?,
            "synth.scenes" => s.scenes = parse(key, v)?,
            "synth.points" => s.points = parse(key, v)?,
            "synth.extent" => s.extent = parse(key, v)?,
            "synth.descriptor_width" => s.descriptor_width = parse(key, v)?,
            "synth.noise" => s.noise = parse(key, v)?,
            "synth.visibility_falloff" => s.visibility_falloff = parse(key, v)?,
            "synth.split_ratio" => s.split_ratio = parse(key, v)?,
            "synth.mapping_frames" => s.mapping_frames = parse(key, v)?,
            "synth.query_frames" => s.query_frames = parse(key, v)?,
            "synth.radius_min" => s.radius_min = parse(key, v)?,
            "synth.radius_max" => s.radius_max = parse(key, v)?,
            "synth.height" => s.height = parse(key, v)?,
            "synth.look_jitter" => s.look_jitter = parse(key, v)?,
            "synth.grid_rows" => s.grid_rows = parse(key, v)?,
            "synth.grid_cols" => s.grid_cols = parse(key, v)?,
            "synth.patch" => s.patch = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.blocks" => m.blocks = parse(key, v)?,
            "model.fourier_levels" => m.fourier_levels = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.normalize_scale" => m.normalize_scale = parse(key, v)?,
            "train.k" => t.k = parse(key, v)?,
            "train.n_min" => t.n_min = parse(key, v)?,
            "train.n_max" => t.n_max = parse(key, v)?,
            "train.overlap_min" => t.overlap_min = parse(key, v)?,
            "train.overlap_max" => t.overlap_max = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.iterations" => t.iterations = parse(key, v)?,
            "train.warmup" => t.warmup = parse(key, v)?,
            "train.peak_lr" => t.peak_lr = parse(key, v)?,
            "train.alpha" => t.loss.alpha = parse(key, v)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "train.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "train.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "train.eps" => t.optimizer.eps = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "solver.tau" => o.tau = parse(key, v)?,
            "solver.cap" => o.cap = parse(key, v)?,
            "solver.inlier_threshold" => o.inlier_threshold = parse(key, v)?,
            "solver.max_iterations" => o.max_iterations = parse(key, v)?,
            "solver.confidence" => o.confidence = parse(key, v)?,
            "solver.refine_iterations" => o.refine_iterations = parse(key, v)?,
            "retrieval.strategy" => self.strategy = v.parse()?,
            "retrieval.topk" => self.topk = parse(key, v)?,
            "map.n" => self.map_n = parse(key, v)?,
            "eval.thresholds" => {
                self.eval.thresholds = v
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| {
                        let (a, b) = p.split_once(':').ok_or_else(|| {
                            Error::Config(format!("threshold {p:?} is not translation:degrees"))
                        })?;
                        Ok(Threshold {
                            translation: parse(key, a)?,
                            rotation: parse(key, b)?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "eval.frame_counts" => self.eval.frame_counts = parse_list(key, v)?,
            "eval.feature_counts" => self.eval.feature_counts = parse_list(key, v)?,
            "eval.sweep_n" => self.eval.sweep_n = parse(key, v)?,
            "eval.sweep_k" => self.eval.sweep_k = parse(key, v)?,
            "eval.scale_factor" => self.eval.scale_factor = parse(key, v)?,
            "eval.sweep_frames" => self.eval.sweep_frames = parse(key, v)?,
            "eval.sweep_features" => self.eval.sweep_features = parse(key, v)?,
            "eval.ablation" => self.eval.ablation = parse(key, v)?,
            "grad.points" => self.grad_points = parse(key, v)?,
            "grad.before_train" => self.grad_before_train = parse(key, v)?,
            "grad.network_points" => self.grad_network_points = parse(key, v)?,
            "input.dataset" => self.input.dataset = v.to_string(),
            "input.checkpoint" => self.input.checkpoint = v.to_string(),
            "input.raw_checkpoint" => self.input.raw_checkpoint = v.to_string(),
            "input.map" => self.input.map = v.to_string(),
            "input.results" => self.input.results = v.to_string(),
            "input.index" => self.input.index = v.to_string(),
            "input.resume" => self.input.resume = v.to_string(),
            "input.scene" => self.input.scene = parse(key, v)?,
            "input.query" => self.input.query = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        let s = &self.synth;
        let m = &self.model;
        let t = &self.train;
        let o = &self.solver;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "output" => self.output.display().to_string(),
            "threads" => self.threads.to_string(),
            "io.timing" => self.timing.to_string(),
            "io.viz" => self.viz.to_string(),
            "synth.scenes" => s.scenes.to_string(),
            "synth.points" => s.points.to_string(),
            "synth.extent" => fmt_f(s.extent),
            "synth.descriptor_width" => s.descriptor_width.to_string(),
            "synth.noise" => fmt_f(s.noise),
            "synth.visibility_falloff" => fmt_f(s.visibility_falloff),
            "synth.split_ratio" => s.split_ratio.to_string(),
            "synth.mapping_frames" => s.mapping_frames.to_string(),
            "synth.query_frames" => s.query_frames.to_string(),
            "synth.radius_min" => fmt_f(s.radius_min),
            "synth.radius_max" => fmt_f(s.radius_max),
            "synth.height" => fmt_f(s.height),
            "synth.look_jitter" => fmt_f(s.look_jitter),
            "synth.grid_rows" => s.grid_rows.to_string(),
            "synth.grid_cols" => s.grid_cols.to_string(),
            "synth.patch" => s.patch.to_string(),
            "model.dim" => m.dim.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.blocks" => m.blocks.to_string(),
            "model.fourier_levels" => m.fourier_levels.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "model.normalize_scale" => m.normalize_scale.to_string(),
            "train.k" => t.k.to_string(),
            "train.n_min" => t.n_min.to_string(),
            "train.n_max" => t.n_max.to_string(),
            "train.overlap_min" => fmt_f(t.overlap_min),
            "train.overlap_max" => fmt_f(t.overlap_max),
            "train.batch" => t.batch.to_string(),
            "train.iterations" => t.iterations.to_string(),
            "train.warmup" => t.warmup.to_string(),
            "train.peak_lr" => fmt_f(t.peak_lr),
            "train.alpha" => fmt_f(t.loss.alpha),
            "train.weight_decay" => fmt_f(t.optimizer.weight_decay),
            "train.beta1" => fmt_f(t.optimizer.beta1),
            "train.beta2" => fmt_f(t.optimizer.beta2),
            "train.eps" => fmt_f(t.optimizer.eps),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "solver.tau" => fmt_f(o.tau),
            "solver.cap" => o.cap.to_string(),
            "solver.inlier_threshold" => fmt_f(o.inlier_threshold),
            "solver.max_iterations" => o.max_iterations.to_string(),
            "solver.confidence" => fmt_f(o.confidence),
            "solver.refine_iterations" => o.refine_iterations.to_string(),
            "retrieval.strategy" => self.strategy.to_string(),
            "retrieval.topk" => self.topk.to_string(),
            "map.n" => self.map_n.to_string(),
            "eval.thresholds" => self
                .eval
                .thresholds
                .iter()
                .map(|t| format!("{}:{}", fmt_f(t.translation), fmt_f(t.rotation)))
                .collect::<Vec<_>>()
                .join(","),
            "eval.frame_counts" => join(&self.eval.frame_counts),
            "eval.feature_counts" => join(&self.eval.feature_counts),
            "eval.sweep_n" => self.eval.sweep_n.to_string(),
            "eval.sweep_k" => self.eval.sweep_k.to_string(),
            "eval.scale_factor" => fmt_f(self.eval.scale_factor),
            "eval.sweep_frames" => self.eval.sweep_frames.to_string(),
            "eval.sweep_features" => self.eval.sweep_features.to_string(),
            "eval.ablation" => self.eval.ablation.to_string(),
            "grad.points" => self.grad_points.to_string(),
            "grad.before_train" => self.grad_before_train.to_string(),
            "grad.network_points" => self.grad_network_points.to_string(),
            "input.dataset" => self.input.dataset.clone(),
            "input.checkpoint" => self.input.checkpoint.clone(),
            "input.raw_checkpoint" => self.input.raw_checkpoint.clone(),
            "input.map" => self.input.map.clone(),
            "input.results" => self.input.results.clone(),
            "input.index" => self.input.index.clone(),
            "input.resume" => self.input.resume.clone(),
            "input.scene" => self.input.scene.to_string(),
            "input.query" => self.input.query.to_string(),
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        })
    }

    /// Applies every key of a TOML document. Tables and dotted keys are
    /// equivalent; lists may be given as arrays or comma-separated strings.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Config(format!("configuration syntax: {}", e.message()))
        })?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat)?;
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_toml(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::Config(format!("override {:?} is not key=value", o.as_ref()))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Fully resolved configuration, every key in a fixed order.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, doc) in KEYS {
            let sec = key.split_once('.').map_or("", |(s, _)| s);
            if sec != section {
                out.push('\n');
                section = sec;
            }
            let v = self.get(key).expect("every listed key is readable");
            let literal = match toml_kind(key) {
                Kind::Text => format!("{:?}", v),
                Kind::Bare => v,
            };
            let _ = writeln!(out, "{key} = {literal}  # {doc}");
        }
        out.trim_start().to_string()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_config()?;
        self.model_config().validate()?;
        self.train.validate()?;
        self.solver.validate()?;
        if self.topk < 1 || self.map_n < 1 {
            return Err(Error::Config(
                "retrieval.topk and map.n must be positive".into(),
            ));
        }
        if self.synth.scenes < 2 {
            return Err(Error::Config("synth.scenes must be at least 2".into()));
        }
        if !(self.eval.scale_factor > 0.0) {
            return Err(Error::Config("eval.scale_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        let s = &self.synth;
        let grid = TokenGrid::new(s.grid_rows, s.grid_cols, s.patch);
        if grid.is_empty() || s.patch == 0 {
            return Err(Error::Config("token grid must be nonempty".into()));
        }
        let mapping = TrajectoryConfig {
            frames: s.mapping_frames,
            radius: (s.radius_min, s.radius_max),
            height: (-s.height, s.height),
            look_jitter: s.look_jitter,
            ordered: true,
            intrinsics: default_intrinsics(&grid),
            grid,
        };
        let query = TrajectoryConfig {
            frames: s.query_frames,
            ordered: false,
            ..mapping.clone()
        };
        mapping
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        query.validate().map_err(|e| Error::Config(e.to_string()))?;
        if s.points == 0 || !(s.extent > 0.0) || s.descriptor_width == 0 || s.noise < 0.0 {
            return Err(Error::Config("invalid synth settings".into()));
        }
        if s.visibility_falloff < 0.0 {
            return Err(Error::Config(
                "synth.visibility_falloff must be non-negative".into(),
            ));
        }
        Ok(DatasetConfig {
            point_count: s.points,
            extent: s.extent,
            descriptor_width: s.descriptor_width,
            noise: s.noise,
            visibility_falloff: s.visibility_falloff,
            mapping,
            query,
            split_ratio: s.split_ratio,
        })
    }

    /// Model configuration with the widths implied by the synth settings.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            descriptor_width: self.synth.descriptor_width,
            query_tokens: self.synth.grid_rows * self.synth.grid_cols,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn localize_config(&self) -> LocalizeConfig {
        LocalizeConfig {
            strategy: self.strategy,
            k: self.topk,
            n: self.map_n,
            seed: self.seed,
            solver: SolverConfig {
                seed: self.seed,
                ..self.solver.clone()
            },
            record_timing: self.timing,
        }
    }

    /// Replaces the training keys with a named preset.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        self.train = TrainConfig::preset(name)?;
        Ok(())
    }
}

enum Kind {
    Text,
    Bare,
}

fn toml_kind(key: &str) -> Kind {
    match key {
        "input.scene" | "input.query" => Kind::Bare,
        k if k.starts_with("input.") => Kind::Text,
        "output"
        | "retrieval.strategy"
        | "eval.thresholds"
        | "eval.frame_counts"
        | "eval.feature_counts" => Kind::Text,
        _ => Kind::Bare,
    }
}

/// Shortest text that parses back to the same value and is a valid TOML
/// float.
fn fmt_f(x: f64) -> String {
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::String(s) => out.push((key, s.clone())),
            toml::Value::Integer(i) => out.push((key, i.to_string())),
            toml::Value::Float(f) => out.push((key, fmt_f(*f))),
            toml::Value::Boolean(b) => out.push((key, b.to_string())),
            toml::Value::Array(a) => {
                let parts = a
                    .iter()
                    .map(|x| match x {
                        toml::Value::Integer(i) => Ok(i.to_string()),
                        toml::Value::Float(f) => Ok(fmt_f(*f)),
                        toml::Value::String(s) => Ok(s.clone()),
                        _ => Err(Error::Config(format!("unsupported list entry under {key}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push((key, parts.join(",")));
            }
            toml::Value::Datetime(_) => {
                return Err(Error::Config(format!("unsupported value for {key}")))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_defaults() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), c.to_toml());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("synth.pointz = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("synth.pointz"), "{err}");
    }

    #[test]
    fn tables_and_overrides() {
        let mut c =
            RunConfig::from_toml("[synth]\npoints = 500\n[eval]\nframe_counts = [1, 3]\n").unwrap();
        assert_eq!(c.synth.points, 500);
        assert_eq!(c.eval.frame_counts, vec![1, 3]);
        c.apply_overrides(&["train.batch=2", "retrieval.strategy = uniform"])
            .unwrap();
        assert_eq!(c.train.batch, 2);
        assert_eq!(c.strategy, SelectionStrategy::Uniform);
        assert!(c.apply_overrides(&["nokey"]).is_err());
    }

    #[test]
    fn every_key_readable() {
        let c = RunConfig::default();
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }
}

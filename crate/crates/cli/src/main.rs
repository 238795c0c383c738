use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayloc::checks::{gradient_suite, TOLERANCE};
use rayloc::config::RunConfig;
use rayloc::eval::{
    self, localize_with_map, map_for_query, map_seed, mapping_frames_for, query_result, EvalReport,
    QueryLocalization,
};
use rayloc::frame::FrameTokens;
use rayloc::model::{build_map, occupied_tokens, MapRepresentation, NetworkParams};
use rayloc::retrieval::{RetrievalIndex, SelectionStrategy};
use rayloc::solver::{parse_results_csv, write_results_csv, QueryResult};
use rayloc::synth::{make_dataset, Dataset, SceneRecord};
use rayloc::training::{load_network, train, Checkpoint, TrainOptions, FINAL_CHECKPOINT};
use rayloc::Error;

/// Environment variable naming the default output root.
const OUTPUT_ENV: &str = "RAYLOC_OUTPUT";
const CONFIG_FILE: &str = "config.toml";
/// Map-sampling anchor when a map is built without a query.
const NO_QUERY: u64 = u64::MAX;

#[derive(Parser)]
#[command(
    name = "rayloc",
    version,
    about = "Feed-forward relocalization against sparse ray-encoded maps"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.batch=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output root (default: $RAYLOC_OUTPUT, else the config value).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    SynthGen {
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train a network.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Training recipe: desk or paper.
        #[arg(long)]
        preset: Option<String>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run the finite-difference suite before training.
        #[arg(long)]
        grad_check: bool,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Build and save a map for one scene.
    BuildMap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        scene: Option<u64>,
        /// Query frame for retrieval (also anchors the sampling seed).
        #[arg(long)]
        query: Option<u64>,
        /// Retrieval index to rank frames with instead of a query.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Localize queries and write per-query results.
    Localize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Precomputed map; otherwise maps are built per query.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        scene: Option<u64>,
        #[arg(long)]
        query: Option<u64>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        /// Also write predicted points, sampled patches and cameras.
        #[arg(long)]
        viz: bool,
    },
    /// Aggregate results, run sweeps and the scale ablation.
    Eval {
        /// Result CSV to summarize (no network needed).
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// `frames=1,2,5` or `features=64,128`. Repeatable.
        #[arg(long)]
        sweep: Vec<String>,
        /// Raw-translation network; enables the scale ablation.
        #[arg(long)]
        raw_checkpoint: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        #[arg(long)]
        points: Option<usize>,
    },
}

/// Usage errors exit with 1, failed internal checks with 2.
enum Failure {
    Usage(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Shape(_) | Error::Degenerate(_) => {
                Failure::Internal(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

fn set(cfg: &mut RunConfig, key: &str, value: Option<impl ToString>) -> Outcome {
    if let Some(v) = value {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn resolve_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(root) = std::env::var(OUTPUT_ENV) {
        if !root.is_empty() {
            cfg.output = PathBuf::from(root);
        }
    }
    if let Some(path) = &cli.common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_toml(&text)?;
    }
    // Command flags first so explicit `--set` wins.
    match &cli.command {
        Command::SynthGen { scenes } => set(&mut cfg, "synth.scenes", *scenes)?,
        Command::Train {
            dataset,
            preset,
            resume,
            iterations,
            grad_check,
        } => {
            cfg.grad_before_train |= *grad_check;
            if let Some(p) = preset {
                cfg.apply_preset(p)?;
            }
            set(&mut cfg, "input.dataset", path_str(dataset))?;
            set(&mut cfg, "input.resume", path_str(resume))?;
            set(&mut cfg, "train.iterations", *iterations)?;
        }
        Command::BuildMap {
            checkpoint,
            dataset,
            scene,
            query,
            index,
            strategy,
            topk,
            n,
        } => {
            set(&mut cfg, "input.checkpoint", path_str(checkpoint))?;
            set(&mut cfg, "input.dataset", path_str(dataset))?;
            set(&mut cfg, "input.scene", *scene)?;
            set(&mut cfg, "input.query", *query)?;
            set(&mut cfg, "input.index", path_str(index))?;
            set(&mut cfg, "retrieval.strategy", strategy.as_ref())?;
            set(&mut cfg, "retrieval.topk", *topk)?;
            set(&mut cfg, "map.n", *n)?;
        }
        Command::Localize {
            checkpoint,
            dataset,
            map,
            scene,
            query,
            strategy,
            topk,
            n,
            viz,
        } => {
            cfg.viz |= *viz;
            set(&mut cfg, "input.checkpoint", path_str(checkpoint))?;
            set(&mut cfg, "input.dataset", path_str(dataset))?;
            set(&mut cfg, "input.map", path_str(map))?;
            set(&mut cfg, "input.scene", *scene)?;
            set(&mut cfg, "input.query", *query)?;
            set(&mut cfg, "retrieval.strategy", strategy.as_ref())?;
            set(&mut cfg, "retrieval.topk", *topk)?;
            set(&mut cfg, "map.n", *n)?;
        }
        Command::Eval {
            results,
            checkpoint,
            dataset,
            sweep,
            raw_checkpoint,
        } => {
            set(&mut cfg, "input.results", path_str(results))?;
            set(&mut cfg, "input.checkpoint", path_str(checkpoint))?;
            set(&mut cfg, "input.dataset", path_str(dataset))?;
            set(&mut cfg, "input.raw_checkpoint", path_str(raw_checkpoint))?;
            if raw_checkpoint.is_some() {
                cfg.eval.ablation = true;
            }
            for s in sweep {
                let (kind, values) = s.split_once('=').ok_or_else(|| {
                    Failure::Usage(format!("sweep {s:?} is not frames=… or features=…"))
                })?;
                match kind {
                    "frames" => {
                        cfg.set("eval.frame_counts", values)?;
                        cfg.eval.sweep_frames = true;
                    }
                    "features" => {
                        cfg.set("eval.feature_counts", values)?;
                        cfg.eval.sweep_features = true;
                    }
                    other => return Err(Failure::Usage(format!("unknown sweep {other:?}"))),
                }
            }
        }
        Command::GradCheck { points } => set(&mut cfg, "grad.points", *points)?,
    }
    cfg.apply_overrides(&cli.common.overrides)?;
    set(&mut cfg, "seed", cli.common.seed)?;
    set(&mut cfg, "threads", cli.common.threads)?;
    if let Some(o) = &cli.common.output {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = resolve_config(&cli)?;
    // Record chained defaults so the emitted config stands on its own.
    let (dataset, network) = match &cli.command {
        Command::SynthGen { .. } | Command::GradCheck { .. } => (false, false),
        Command::Train { .. } => (true, false),
        Command::Eval { .. } => {
            let e = &cfg.eval;
            let network =
                cfg.input.results().is_none() || e.sweep_frames || e.sweep_features || e.ablation;
            (network, network)
        }
        _ => (true, true),
    };
    if dataset {
        cfg.input.dataset = dataset_path(&cfg).display().to_string();
    }
    if network {
        cfg.input.checkpoint = checkpoint_path(&cfg).display().to_string();
    }
    if cfg.threads > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    match &cli.command {
        Command::SynthGen { .. } => cmd_synth_gen(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::BuildMap { .. } => cmd_build_map(&cfg),
        Command::Localize { .. } => cmd_localize(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::GradCheck { .. } => cmd_grad_check(&cfg),
    }
}

fn out_dir(cfg: &RunConfig, command: &str) -> Outcome<PathBuf> {
    let dir = cfg.output.join(command);
    fs::create_dir_all(&dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Outcome {
    write(&dir.join(CONFIG_FILE), cfg.to_toml())
}

fn dataset_path(cfg: &RunConfig) -> PathBuf {
    cfg.input
        .dataset()
        .unwrap_or_else(|| cfg.output.join("synth-gen").join("dataset.bin"))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.input
        .checkpoint()
        .unwrap_or_else(|| cfg.output.join("train").join(FINAL_CHECKPOINT))
}

fn load_dataset(cfg: &RunConfig) -> Outcome<Dataset> {
    let p = dataset_path(cfg);
    Dataset::load(&p).map_err(|e| Failure::Usage(format!("dataset {}: {e}", p.display())))
}

fn load_params(path: &Path) -> Outcome<NetworkParams> {
    load_network(path).map_err(|e| Failure::Usage(format!("checkpoint {}: {e}", path.display())))
}

fn cmd_synth_gen(cfg: &RunConfig) -> Outcome {
    let dir = out_dir(cfg, "synth-gen")?;
    let ds = make_dataset(cfg.synth.scenes, &cfg.dataset_config()?, cfg.seed)?;
    ds.save(dir.join("dataset.bin"))?;
    write_config(cfg, &dir)?;
    println!(
        "{} scenes ({} train, {} test), {} frames -> {}",
        ds.train.len() + ds.test.len(),
        ds.train.len(),
        ds.test.len(),
        ds.frame_count(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    if cfg.grad_before_train {
        run_gradient_suite(cfg)?;
    }
    let dir = out_dir(cfg, "train")?;
    let ds = load_dataset(cfg)?;
    let train_cfg = cfg.train_config();
    let ckpt = match cfg.input.resume() {
        Some(p) => {
            let mut c = Checkpoint::load(&p)
                .map_err(|e| Failure::Usage(format!("resume {}: {e}", p.display())))?;
            if c.params.config != cfg.model_config() {
                return Err(Failure::Usage(
                    "resumed checkpoint has a different model configuration".into(),
                ));
            }
            c.config = train_cfg;
            c
        }
        None => Checkpoint::new(
            NetworkParams::init(cfg.model_config(), cfg.seed)?,
            train_cfg,
        ),
    };
    write_config(cfg, &dir)?;
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.clone()),
        log_path: Some(dir.join("log.csv")),
        record_timing: cfg.timing,
        max_steps: None,
    };
    let total = ckpt.config.iterations;
    let every = (total / 20).max(1);
    let done = train(&ds.train, ckpt, &opts, |row| {
        if row.iteration % every == 0 || row.iteration + 1 == total {
            eprintln!(
                "step {:>7}/{total}  lr {:.2e}  loss {:.4}",
                row.iteration, row.lr, row.loss
            );
        }
    })?;
    println!(
        "trained {} steps -> {}",
        done.iteration,
        dir.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn find_scene(ds: &Dataset, id: Option<u64>) -> Outcome<&SceneRecord> {
    match id {
        Some(id) => ds
            .scene(id)
            .ok_or_else(|| Failure::Usage(format!("scene {id} not in the dataset"))),
        None => ds
            .test
            .first()
            .ok_or_else(|| Failure::Usage("dataset has no test scene".into())),
    }
}

fn find_query(scene: &SceneRecord, id: u64) -> Outcome<&FrameTokens> {
    scene
        .queries
        .iter()
        .find(|q| q.frame_id == id)
        .ok_or_else(|| Failure::Usage(format!("query {id} not in scene {}", scene.id)))
}

fn cmd_build_map(cfg: &RunConfig) -> Outcome {
    let dir = out_dir(cfg, "build-map")?;
    let ds = load_dataset(cfg)?;
    let params = load_params(&checkpoint_path(cfg))?;
    let scene = find_scene(&ds, cfg.input.scene())?;
    let lcfg = cfg.localize_config();
    let query = cfg
        .input
        .query()
        .map(|q| find_query(scene, q))
        .transpose()?;

    let frames: Vec<&FrameTokens> = match (cfg.strategy, query, cfg.input.index()) {
        (SelectionStrategy::Retrieval, Some(q), _) => mapping_frames_for(&scene.mapping, q, &lcfg)?,
        (SelectionStrategy::Retrieval, None, Some(index_path)) => {
            // Rank by similarity to the scene's mean mapping descriptor.
            let index = RetrievalIndex::load(&index_path)?;
            let mut mean = vec![0.0; index.width()];
            for i in 0..index.len() {
                for (m, x) in mean.iter_mut().zip(index.descriptor(i)) {
                    *m += x;
                }
            }
            let ids = index.topk(&mean, cfg.topk)?;
            ids.iter()
                .map(|id| {
                    scene
                        .mapping
                        .iter()
                        .find(|f| f.frame_id == *id)
                        .ok_or_else(|| {
                            Failure::Usage(format!("indexed frame {id} not in scene {}", scene.id))
                        })
                })
                .collect::<Outcome<_>>()?
        }
        (SelectionStrategy::Retrieval, None, None) => {
            return Err(Failure::Usage("retrieval needs --query or --index".into()));
        }
        (_, q, _) => {
            let anchor = q.unwrap_or(&scene.mapping[0]);
            mapping_frames_for(&scene.mapping, anchor, &lcfg)?
        }
    };
    let available = occupied_tokens(&frames).len();
    if cfg.map_n > available {
        return Err(Failure::Usage(format!(
            "map size {} exceeds the {available} non-empty tokens of the selected frames",
            cfg.map_n
        )));
    }
    let anchor = query.map_or(NO_QUERY, |q| q.frame_id);
    let map = build_map(
        &frames,
        cfg.map_n,
        map_seed(cfg.seed, scene.id, anchor),
        &params,
    )?;
    let name = match query {
        Some(q) => format!("scene-{}-query-{}.map", scene.id, q.frame_id),
        None => format!("scene-{}.map", scene.id),
    };
    map.save(dir.join(&name))?;
    // Index of the scene's mapping frames, for later retrieval without a query.
    let (index, _) = RetrievalIndex::build(&scene.mapping)?;
    index.save(dir.join(format!("scene-{}.index", scene.id)))?;
    write_config(cfg, &dir)?;
    println!(
        "map with {} entries from {} frames -> {}",
        map.len(),
        map.source_frames().len(),
        dir.join(name).display()
    );
    Ok(())
}

struct Job<'a> {
    scene: &'a SceneRecord,
    query: &'a FrameTokens,
}

fn select_jobs<'a>(cfg: &RunConfig, ds: &'a Dataset) -> Outcome<Vec<Job<'a>>> {
    let scenes: Vec<&SceneRecord> = match cfg.input.scene() {
        Some(id) => vec![find_scene(ds, Some(id))?],
        None => ds.test.iter().collect(),
    };
    let mut jobs = Vec::new();
    for s in scenes {
        match cfg.input.query() {
            Some(q) => jobs.push(Job {
                scene: s,
                query: find_query(s, q)?,
            }),
            None => jobs.extend(s.queries.iter().map(|q| Job { scene: s, query: q })),
        }
    }
    Ok(jobs)
}

fn cmd_localize(cfg: &RunConfig) -> Outcome {
    use rayon::prelude::*;
    let dir = out_dir(cfg, "localize")?;
    let ds = load_dataset(cfg)?;
    let params = load_params(&checkpoint_path(cfg))?;
    let lcfg = cfg.localize_config();
    let fixed_map = match cfg.input.map() {
        Some(p) => Some(
            MapRepresentation::load(&p)
                .map_err(|e| Failure::Usage(format!("map {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let jobs = select_jobs(cfg, &ds)?;
    let runs: Vec<(QueryResult, Option<(QueryLocalization, MapRepresentation)>)> = jobs
        .par_iter()
        .map(|job| -> Result<_, Error> {
            let start = Instant::now();
            let map = match &fixed_map {
                Some(m) => Some(m.clone()),
                None => {
                    let frames = mapping_frames_for(&job.scene.mapping, job.query, &lcfg)?;
                    map_for_query(job.query, &frames, &params, &lcfg)?
                }
            };
            let loc = match &map {
                Some(m) => Some(localize_with_map(job.query, m, &params, &lcfg)?),
                None => None,
            };
            let wall = if lcfg.record_timing {
                start.elapsed().as_millis() as u64
            } else {
                0
            };
            let result = query_result(job.query, loc.as_ref(), wall);
            Ok((result, loc.zip(map)))
        })
        .collect::<Result<_, _>>()?;
    let results: Vec<QueryResult> = runs.iter().map(|(r, _)| r.clone()).collect();
    write(&dir.join("results.csv"), write_results_csv(&results))?;
    if cfg.viz {
        write_visualization(&dir, &jobs, &runs)?;
    }
    write_config(cfg, &dir)?;
    let solved = results.iter().filter(|r| r.solved).count();
    println!(
        "{} queries, {solved} solved -> {}",
        results.len(),
        dir.join("results.csv").display()
    );
    Ok(())
}

fn pose_fields(p: &rayloc::geometry::Pose) -> String {
    let q = p.quaternion();
    let t = p.translation;
    format!(
        "{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
        q[0], q[1], q[2], q[3], t.x, t.y, t.z
    )
}

/// Predicted scene points, sampled map patches and cameras per query.
fn write_visualization(
    dir: &Path,
    jobs: &[Job],
    runs: &[(QueryResult, Option<(QueryLocalization, MapRepresentation)>)],
) -> Outcome {
    let mut points = String::from("query_id,u,v,x,y,z,confidence\n");
    let mut patches = String::from("query_id,frame_id,row,col\n");
    let mut cameras = String::from("query_id,kind,frame_id,qw,qx,qy,qz,tx,ty,tz\n");
    for (job, (_, run)) in jobs.iter().zip(runs) {
        let qid = job.query.frame_id;
        let _ = writeln!(
            cameras,
            "{qid},truth,{qid},{}",
            pose_fields(&job.query.pose)
        );
        let Some((loc, map)) = run else { continue };
        if let Some(p) = &loc.pose {
            let _ = writeln!(cameras, "{qid},estimate,{qid},{}", pose_fields(p));
        }
        for f in &job.scene.mapping {
            if map.frame_ids.contains(&f.frame_id) {
                let _ = writeln!(
                    cameras,
                    "{qid},mapping,{},{}",
                    f.frame_id,
                    pose_fields(&f.pose)
                );
            }
        }
        for (fid, (r, c)) in map.frame_ids.iter().zip(&map.cells) {
            let _ = writeln!(patches, "{qid},{fid},{r},{c}");
        }
        for rec in &loc.correspondences.records {
            let x = map.reference_pose.transform_point(&(rec.point * map.scale));
            let _ = writeln!(
                points,
                "{qid},{},{},{:.9},{:.9},{:.9},{:.9}",
                rec.pixel.0, rec.pixel.1, x.x, x.y, x.z, rec.confidence
            );
        }
    }
    write(&dir.join("viz_points.csv"), points)?;
    write(&dir.join("viz_patches.csv"), patches)?;
    write(&dir.join("viz_cameras.csv"), cameras)
}

fn cmd_eval(cfg: &RunConfig) -> Outcome {
    let dir = out_dir(cfg, "eval")?;
    let thresholds = &cfg.eval.thresholds;
    let needs_network = cfg.input.results().is_none()
        || cfg.eval.sweep_frames
        || cfg.eval.sweep_features
        || cfg.eval.ablation;
    let ds = if needs_network {
        Some(load_dataset(cfg)?)
    } else {
        None
    };
    let params = if needs_network {
        Some(load_params(&checkpoint_path(cfg))?)
    } else {
        None
    };
    let lcfg = cfg.localize_config();

    let results = match cfg.input.results() {
        Some(p) => {
            let text = fs::read_to_string(&p)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            parse_results_csv(&text)?
        }
        None => eval::evaluate(
            &ds.as_ref().expect("loaded").test,
            params.as_ref().expect("loaded"),
            &lcfg,
        )?,
    };
    if results.is_empty() {
        return Err(Failure::Usage("no results to evaluate".into()));
    }
    let report = EvalReport::new(results, thresholds)?;
    write(&dir.join("summary.csv"), report.summary_csv())?;
    write(&dir.join("results.csv"), write_results_csv(&report.results))?;
    print!("{}", report.summary_csv());

    if let (Some(ds), Some(params)) = (&ds, &params) {
        if cfg.eval.sweep_frames {
            let t = eval::sweep_mapping_images(
                params,
                &ds.test,
                &cfg.eval.frame_counts,
                cfg.eval.sweep_n,
                &lcfg,
                thresholds,
            )?;
            write(&dir.join("sweep_frames.csv"), t.to_csv())?;
            write(&dir.join("sweep_frames.svg"), t.to_svg())?;
            print!("{}", t.to_csv());
        }
        if cfg.eval.sweep_features {
            let t = eval::sweep_mapping_features(
                params,
                &ds.test,
                &cfg.eval.feature_counts,
                cfg.eval.sweep_k,
                &lcfg,
                thresholds,
            )?;
            write(&dir.join("sweep_features.csv"), t.to_csv())?;
            write(&dir.join("sweep_features.svg"), t.to_svg())?;
            print!("{}", t.to_csv());
        }
        if cfg.eval.ablation {
            let raw_path = cfg.input.raw_checkpoint().ok_or_else(|| {
                Failure::Usage("the scale ablation needs a raw-translation checkpoint".into())
            })?;
            let raw = load_params(&raw_path)?;
            let t = eval::scale_ablation(
                params,
                &raw,
                &ds.test,
                cfg.eval.scale_factor,
                &lcfg,
                thresholds,
            )?;
            write(&dir.join("scale_ablation.csv"), t.to_csv())?;
            print!("{}", t.to_csv());
        }
    }
    write_config(cfg, &dir)?;
    Ok(())
}

fn run_gradient_suite(cfg: &RunConfig) -> Outcome<String> {
    let cases = gradient_suite(cfg.grad_points, cfg.grad_network_points, cfg.seed)?;
    let mut report = String::from("case,points,max_relative_error,status\n");
    let mut failed = Vec::new();
    for c in &cases {
        let status = if c.passed() { "pass" } else { "FAIL" };
        let _ = writeln!(report, "{},{},{:.3e},{status}", c.name, c.points, c.worst);
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    print!("{report}");
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(Failure::Internal(format!(
            "gradient check above {TOLERANCE:e} for: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_grad_check(cfg: &RunConfig) -> Outcome {
    let dir = out_dir(cfg, "grad-check")?;
    let report = run_gradient_suite(cfg)?;
    write(&dir.join("report.csv"), report)?;
    write_config(cfg, &dir)
}

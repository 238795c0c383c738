//! Localization runs over a test split, error aggregation and the sweep and
//! ablation tables.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::FrameTokens;
use crate::geometry::{pose_error, Pose};
use crate::model::{
    build_map, forward_localize, occupied_tokens, MapRepresentation, NetworkParams,
};
use crate::retrieval::{select_mapping_frames, SelectionStrategy};
use crate::rng::derive_seed;
use crate::solver::{localize_pose, CorrespondenceSet, QueryResult, SolverConfig};
use crate::synth::SceneRecord;

/// Median with failures sorting last; an even count averages the middle pair.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("median of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a == b {
            a
        } else {
            0.5 * (a + b)
        }
    })
}

pub fn median_errors(results: &[QueryResult]) -> Result<(f64, f64)> {
    let t: Vec<f64> = results.iter().map(|r| r.e_t).collect();
    let r: Vec<f64> = results.iter().map(|r| r.e_r).collect();
    Ok((median(&t)?, median(&r)?))
}

/// Fraction of queries solved with both errors at or below the thresholds.
pub fn acceptance_rate(results: &[QueryResult], thr_t: f64, thr_r: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidInput("acceptance rate of no results".into()));
    }
    let ok = results
        .iter()
        .filter(|r| r.solved && r.e_t <= thr_t && r.e_r <= thr_r)
        .count();
    Ok(ok as f64 / results.len() as f64)
}

/// Translation (scene units) and rotation (degrees) threshold pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub translation: f64,
    pub rotation: f64,
}

impl Threshold {
    pub fn label(&self) -> String {
        format!("{}/{}deg", self.translation, self.rotation)
    }
}

/// Report thresholds: three fixed pairs (0.05/5°, 0.10/10°, 0.20/20°) plus
/// an extent-relative fine pair (5% / 5°) and coarse pair (20% / 20°).
pub fn default_thresholds(extent: f64) -> Vec<Threshold> {
    let t = |translation, rotation| Threshold {
        translation,
        rotation,
    };
    vec![
        t(0.05, 5.0),
        t(0.10, 10.0),
        t(0.20, 20.0),
        t(0.05 * extent, 5.0),
        t(0.20 * extent, 20.0),
    ]
}

/// Column of the extent-relative fine pair in [`default_thresholds`].
pub const FINE: usize = 3;
/// Column of the extent-relative coarse pair in [`default_thresholds`].
pub const COARSE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub results: Vec<QueryResult>,
    pub median_t: f64,
    pub median_r: f64,
    pub thresholds: Vec<Threshold>,
    pub rates: Vec<f64>,
    pub failures: usize,
}

impl EvalReport {
    pub fn new(results: Vec<QueryResult>, thresholds: &[Threshold]) -> Result<Self> {
        let (median_t, median_r) = median_errors(&results)?;
        let rates = thresholds
            .iter()
            .map(|t| acceptance_rate(&results, t.translation, t.rotation))
            .collect::<Result<Vec<_>>>()?;
        let failures = results.iter().filter(|r| !r.solved).count();
        Ok(Self {
            results,
            median_t,
            median_r,
            thresholds: thresholds.to_vec(),
            rates,
            failures,
        })
    }

    /// `metric,value` summary.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "queries,{}", self.results.len());
        let _ = writeln!(s, "failures,{}", self.failures);
        let _ = writeln!(s, "median_e_t,{}", fmt_f(self.median_t));
        let _ = writeln!(s, "median_e_r,{}", fmt_f(self.median_r));
        for (t, r) in self.thresholds.iter().zip(&self.rates) {
            let _ = writeln!(s, "accuracy@{},{:.6}", t.label(), r);
        }
        s
    }
}

fn fmt_f(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.9}")
    }
}

/// How a query is localized against its scene's mapping frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeConfig {
    pub strategy: SelectionStrategy,
    /// Mapping frames per query.
    pub k: usize,
    /// Map size; clamped to the non-empty tokens available.
    pub n: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub record_timing: bool,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::Retrieval,
            k: 5,
            n: 256,
            seed: 0,
            solver: SolverConfig::default(),
            record_timing: false,
        }
    }
}

/// Mapping frames chosen for `query`, in selection order.
pub fn mapping_frames_for<'a>(
    mapping: &'a [FrameTokens],
    query: &FrameTokens,
    cfg: &LocalizeConfig,
) -> Result<Vec<&'a FrameTokens>> {
    let ids = select_mapping_frames(mapping, cfg.strategy, cfg.k, query, cfg.seed)?;
    ids.iter()
        .map(|id| {
            mapping
                .iter()
                .find(|f| f.frame_id == *id)
                .ok_or_else(|| Error::InvalidInput(format!("mapping frame {id} not found")))
        })
        .collect()
}

/// Seed for sampling the map used by `anchor` (usually the query frame id).
pub fn map_seed(seed: u64, scene_id: u64, anchor: u64) -> u64 {
    derive_seed(seed, &[scene_id, anchor])
}

/// Map built from `frames` for `query`; `None` when the frames hold no
/// non-empty token.
pub fn map_for_query(
    query: &FrameTokens,
    frames: &[&FrameTokens],
    params: &NetworkParams,
    cfg: &LocalizeConfig,
) -> Result<Option<MapRepresentation>> {
    let available = occupied_tokens(frames).len();
    if available == 0 {
        return Ok(None);
    }
    let seed = map_seed(cfg.seed, query.scene_id, query.frame_id);
    build_map(frames, cfg.n.min(available), seed, params).map(Some)
}

/// Outcome of localizing one query against a map.
#[derive(Debug, Clone)]
pub struct QueryLocalization {
    pub pose: Option<Pose>,
    pub inliers: usize,
    pub iterations: usize,
    pub correspondences: CorrespondenceSet,
}

pub fn localize_with_map(
    query: &FrameTokens,
    map: &MapRepresentation,
    params: &NetworkParams,
    cfg: &LocalizeConfig,
) -> Result<QueryLocalization> {
    let set = forward_localize(query, map, params)?;
    let solver = SolverConfig {
        seed: derive_seed(cfg.solver.seed, &[query.scene_id, query.frame_id]),
        ..cfg.solver.clone()
    };
    let loc = localize_pose(
        &set,
        map.scale,
        &map.reference_pose,
        &query.intrinsics,
        &solver,
    )?;
    Ok(QueryLocalization {
        pose: loc.pose,
        inliers: loc.outcome.solution().map_or(0, |s| s.inlier_count()),
        iterations: loc.outcome.iterations(),
        correspondences: set,
    })
}

/// Result row for `query` given an estimate (or a failure).
pub fn query_result(
    query: &FrameTokens,
    loc: Option<&QueryLocalization>,
    wall_ms: u64,
) -> QueryResult {
    match loc {
        Some(QueryLocalization {
            pose: Some(p),
            inliers,
            iterations,
            ..
        }) => {
            let (e_t, e_r) = pose_error(p, &query.pose);
            QueryResult {
                query_id: query.frame_id,
                solved: true,
                e_t,
                e_r,
                inliers: *inliers,
                iterations: *iterations,
                wall_ms,
            }
        }
        Some(l) => QueryResult::failed(query.frame_id, l.iterations, wall_ms),
        None => QueryResult::failed(query.frame_id, 0, wall_ms),
    }
}

pub fn localize_query(
    scene: &SceneRecord,
    query: &FrameTokens,
    params: &NetworkParams,
    cfg: &LocalizeConfig,
) -> Result<QueryResult> {
    let start = Instant::now();
    let frames = mapping_frames_for(&scene.mapping, query, cfg)?;
    let loc = match map_for_query(query, &frames, params, cfg)? {
        Some(map) => Some(localize_with_map(query, &map, params, cfg)?),
        None => None,
    };
    let wall_ms = if cfg.record_timing {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    Ok(query_result(query, loc.as_ref(), wall_ms))
}

/// Localizes every query of every scene. Results are in scene then query
/// order regardless of scheduling.
pub fn evaluate(
    scenes: &[SceneRecord],
    params: &NetworkParams,
    cfg: &LocalizeConfig,
) -> Result<Vec<QueryResult>> {
    let jobs: Vec<(&SceneRecord, &FrameTokens)> = scenes
        .iter()
        .flat_map(|s| s.queries.iter().map(move |q| (s, q)))
        .collect();
    jobs.par_iter()
        .map(|(s, q)| localize_query(s, q, params, cfg))
        .collect()
}

/// One row per swept value with the acceptance rate at each threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub parameter: String,
    pub thresholds: Vec<Threshold>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = self.parameter.clone();
        for t in &self.thresholds {
            let _ = write!(s, ",accuracy@{}", t.label());
        }
        s.push('\n');
        for (v, rates) in &self.rows {
            let _ = write!(s, "{v}");
            for r in rates {
                let _ = write!(s, ",{r:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Rates for threshold column `i`, in row order.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|(_, r)| r[i]).collect()
    }

    pub fn to_svg(&self) -> String {
        line_chart_svg(self)
    }
}

/// Acceptance for each mapping-frame count at a fixed map size.
pub fn sweep_mapping_images(
    params: &NetworkParams,
    scenes: &[SceneRecord],
    counts: &[usize],
    n: usize,
    base: &LocalizeConfig,
    thresholds: &[Threshold],
) -> Result<SweepTable> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("no frame counts to sweep".into()));
    }
    let available = scenes.iter().map(|s| s.mapping.len()).min().unwrap_or(0);
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > available) {
        return Err(Error::OutOfBounds(format!(
            "frame count {c} outside 1..={available} mapping frames"
        )));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &c in counts {
        let cfg = LocalizeConfig {
            k: c,
            n,
            ..base.clone()
        };
        let report = EvalReport::new(evaluate(scenes, params, &cfg)?, thresholds)?;
        rows.push((c, report.rates));
    }
    Ok(SweepTable {
        parameter: "mapping_frames".into(),
        thresholds: thresholds.to_vec(),
        rows,
    })
}

/// Acceptance for each map size at a fixed mapping-frame count.
pub fn sweep_mapping_features(
    params: &NetworkParams,
    scenes: &[SceneRecord],
    sizes: &[usize],
    k: usize,
    base: &LocalizeConfig,
    thresholds: &[Threshold],
) -> Result<SweepTable> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidInput(
            "map sizes must be nonempty and positive".into(),
        ));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let cfg = LocalizeConfig {
            k,
            n,
            ..base.clone()
        };
        let report = EvalReport::new(evaluate(scenes, params, &cfg)?, thresholds)?;
        rows.push((n, report.rates));
    }
    Ok(SweepTable {
        parameter: "mapping_features".into(),
        thresholds: thresholds.to_vec(),
        rows,
    })
}

/// Copy of a scene record with every length multiplied by `factor`.
pub fn scale_scene(scene: &SceneRecord, factor: f64) -> Result<SceneRecord> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidInput(format!("scale factor {factor}")));
    }
    let mut out = scene.clone();
    out.scene.extent *= factor;
    for p in &mut out.scene.points {
        p.position *= factor;
    }
    for f in out.mapping.iter_mut().chain(out.queries.iter_mut()) {
        f.pose.translation *= factor;
        if let Some(gt) = f.ground_truth.as_mut() {
            for x in gt.iter_mut().flatten() {
                *x *= factor;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub model: String,
    pub scale: f64,
    pub median_t_relative: f64,
    pub median_r: f64,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// Thresholds at 1×; translation thresholds scale with the scene.
    pub thresholds: Vec<Threshold>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,scale,median_e_t_over_scale,median_e_r");
        for t in &self.thresholds {
            let _ = write!(s, ",accuracy@{}", t.label());
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{}",
                r.model,
                r.scale,
                fmt_f(r.median_t_relative),
                fmt_f(r.median_r)
            );
            for x in &r.rates {
                let _ = write!(s, ",{x:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn row(&self, model: &str, scale: f64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.scale == scale)
    }
}

/// Evaluates a scale-normalized and a raw model on the test scenes at 1× and
/// at `factor`× size.
pub fn scale_ablation(
    normalized: &NetworkParams,
    raw: &NetworkParams,
    scenes: &[SceneRecord],
    factor: f64,
    cfg: &LocalizeConfig,
    thresholds: &[Threshold],
) -> Result<AblationTable> {
    if !normalized.config.normalize_scale {
        return Err(Error::InvalidInput(
            "first model must use scale normalization".into(),
        ));
    }
    if raw.config.normalize_scale {
        return Err(Error::InvalidInput(
            "second model must be the raw-translation variant".into(),
        ));
    }
    let scaled: Vec<SceneRecord> = scenes
        .iter()
        .map(|s| scale_scene(s, factor))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (name, params) in [("normalized", normalized), ("raw", raw)] {
        for (scale, set) in [(1.0, scenes), (factor, scaled.as_slice())] {
            let th: Vec<Threshold> = thresholds
                .iter()
                .map(|t| Threshold {
                    translation: t.translation * scale,
                    rotation: t.rotation,
                })
                .collect();
            let report = EvalReport::new(evaluate(set, params, cfg)?, &th)?;
            rows.push(AblationRow {
                model: name.into(),
                scale,
                median_t_relative: report.median_t / scale,
                median_r: report.median_r,
                rates: report.rates,
            });
        }
    }
    Ok(AblationTable {
        thresholds: thresholds.to_vec(),
        rows,
    })
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Accuracy against the swept value, one polyline per threshold.
pub fn line_chart_svg(table: &SweepTable) -> String {
    let xs: Vec<f64> = table.rows.iter().map(|(v, _)| *v as f64).collect();
    let (x0, x1) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| MARGIN + (x - x0) / span * (SVG_W - 2.0 * MARGIN);
    let py = |y: f64| SVG_H - MARGIN - y * (SVG_H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN,
        t = MARGIN
    );
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{:.2}</text>"#,
            MARGIN - 4.0,
            py(y) + 4.0,
            y
        );
    }
    for &x in &xs {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(x),
            SVG_H - MARGIN + 14.0,
            x
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        SVG_W / 2.0,
        SVG_H - 8.0,
        table.parameter
    );
    for (i, t) in table.thresholds.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = table
            .rows
            .iter()
            .map(|(v, r)| format!("{:.2},{:.2}", px(*v as f64), py(r[i])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            MARGIN + 8.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            t.label()
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(e_t: f64, e_r: f64) -> QueryResult {
        QueryResult {
            query_id: 0,
            solved: e_t.is_finite(),
            e_t,
            e_r,
            inliers: 0,
            iterations: 0,
            wall_ms: 0,
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median_errors(&[r(0.1, 1.0)]).unwrap(), (0.1, 1.0));
        assert!((median(&[0.1, 0.3]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(median(&[0.1, f64::INFINITY, 0.2]).unwrap(), 0.2);
        assert_eq!(
            median(&[f64::INFINITY, f64::INFINITY]).unwrap(),
            f64::INFINITY
        );
        assert!(median(&[]).is_err());
    }

    #[test]
    fn rates() {
        let v = [r(0.05, 5.0), r(0.5, 5.0)];
        assert_eq!(acceptance_rate(&v, 0.1, 10.0).unwrap(), 0.5);
        let f = [r(f64::INFINITY, f64::INFINITY)];
        assert_eq!(
            acceptance_rate(&f, f64::INFINITY, f64::INFINITY).unwrap(),
            0.0
        );
        assert_eq!(
            acceptance_rate(&v, f64::INFINITY, f64::INFINITY).unwrap(),
            1.0
        );
        assert!(acceptance_rate(&[], 1.0, 1.0).is_err());
    }
}

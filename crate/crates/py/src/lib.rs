//! Python bindings for the relocalization library.

use nalgebra::{Matrix4, Vector3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::rayloc::checks::gradient_suite;
use ::rayloc::eval::{self, EvalReport, LocalizeConfig};
use ::rayloc::geometry::{normalize_scene, pose_error as core_pose_error, Intrinsics, Pose};
use ::rayloc::retrieval::RetrievalIndex;
use ::rayloc::solver::{p3p as core_p3p, parse_results_csv, write_results_csv, QueryResult};
use ::rayloc::synth::{make_dataset, Dataset, DatasetConfig};
use ::rayloc::training::load_network;
use ::rayloc::Error;

type Mat = Vec<Vec<f64>>;

fn err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) | Error::Shape(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn pose_from(m: &Mat) -> PyResult<Pose> {
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
        return Err(PyValueError::new_err("pose must be a 4x4 nested list"));
    }
    let h = Matrix4::from_fn(|i, j| m[i][j]);
    Ok(Pose::from_homogeneous(&h))
}

fn pose_to(p: &Pose) -> Mat {
    let h = p.to_homogeneous();
    (0..4)
        .map(|i| (0..4).map(|j| h[(i, j)]).collect())
        .collect()
}

/// Relative poses to `reference` with translations divided by the scene
/// scale. Returns `(poses, scale)`.
#[pyfunction]
#[pyo3(signature = (poses, reference = 0))]
fn normalize_poses(poses: Vec<Mat>, reference: usize) -> PyResult<(Vec<Mat>, f64)> {
    let poses: Vec<Pose> = poses.iter().map(pose_from).collect::<PyResult<_>>()?;
    let n = normalize_scene(&poses, reference).map_err(err)?;
    Ok((n.normalized_poses.iter().map(pose_to).collect(), n.scale))
}

/// Translation and rotation (degrees) error of `estimate` against `truth`.
#[pyfunction]
fn pose_error(estimate: Mat, truth: Mat) -> PyResult<(f64, f64)> {
    Ok(core_pose_error(&pose_from(&estimate)?, &pose_from(&truth)?))
}

/// Camera-to-scene poses from three pixel/point pairs.
#[pyfunction]
fn p3p(pixels: Vec<(f64, f64)>, points: Vec<[f64; 3]>, intrinsics: [f64; 6]) -> PyResult<Vec<Mat>> {
    if pixels.len() != 3 || points.len() != 3 {
        return Err(PyValueError::new_err(
            "p3p takes exactly three correspondences",
        ));
    }
    let [fx, fy, cx, cy, w, h] = intrinsics;
    let k = Intrinsics::new(fx, fy, cx, cy, w, h).map_err(err)?;
    let px = [pixels[0], pixels[1], pixels[2]];
    let pts = [0, 1, 2].map(|i| Vector3::from(points[i]));
    let sols = core_p3p(&px, &pts, &k).map_err(err)?;
    Ok(sols.iter().map(pose_to).collect())
}

/// Ids of the `k` rows of `descriptors` most similar to `query`.
#[pyfunction]
fn topk(ids: Vec<u64>, descriptors: Mat, query: Vec<f64>, k: usize) -> PyResult<Vec<u64>> {
    if ids.len() != descriptors.len() || descriptors.is_empty() {
        return Err(PyValueError::new_err("need one descriptor per id"));
    }
    let mut index = RetrievalIndex::new(descriptors[0].len());
    for (id, d) in ids.iter().zip(&descriptors) {
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let unit: Vec<f64> = d.iter().map(|x| x / n).collect();
        index.insert(*id, &unit).map_err(err)?;
    }
    index.topk(&query, k).map_err(err)
}

/// Generates a synthetic dataset, saves it, and returns `(train, test)`
/// scene counts.
#[pyfunction]
#[pyo3(signature = (path, scenes = 9, seed = 0))]
fn generate_dataset(
    py: Python<'_>,
    path: &str,
    scenes: usize,
    seed: u64,
) -> PyResult<(usize, usize)> {
    let ds = py
        .detach(|| make_dataset(scenes, &DatasetConfig::default(), seed))
        .map_err(err)?;
    ds.save(path).map_err(err)?;
    Ok((ds.train.len(), ds.test.len()))
}

/// Finite-difference check of every differentiable building block.
/// Returns `(case, worst relative error)` pairs.
#[pyfunction]
#[pyo3(signature = (points = 3, seed = 0))]
fn gradient_check(py: Python<'_>, points: usize, seed: u64) -> PyResult<Vec<(String, f64)>> {
    let cases = py.detach(|| gradient_suite(points, 1, seed)).map_err(err)?;
    Ok(cases.into_iter().map(|c| (c.name, c.worst)).collect())
}

fn result_dict<'py>(py: Python<'py>, r: &QueryResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("query_id", r.query_id)?;
    d.set_item("solved", r.solved)?;
    d.set_item("e_t", r.e_t)?;
    d.set_item("e_r", r.e_r)?;
    d.set_item("inliers", r.inliers)?;
    Ok(d)
}

/// Localizes every test query of a dataset with a trained network.
#[pyfunction]
#[pyo3(signature = (dataset, checkpoint, k = 5, n = 256, seed = 0))]
fn localize<'py>(
    py: Python<'py>,
    dataset: &str,
    checkpoint: &str,
    k: usize,
    n: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let results = py
        .detach(|| -> ::rayloc::Result<Vec<QueryResult>> {
            let ds = Dataset::load(dataset)?;
            let params = load_network(checkpoint)?;
            let mut cfg = LocalizeConfig {
                k,
                n,
                seed,
                ..LocalizeConfig::default()
            };
            cfg.solver.seed = seed;
            eval::evaluate(&ds.test, &params, &cfg)
        })
        .map_err(err)?;
    results.iter().map(|r| result_dict(py, r)).collect()
}

/// Median errors and acceptance rates of a result CSV, as a CSV string.
#[pyfunction]
#[pyo3(signature = (results_csv, extent = 10.0))]
fn summarize(results_csv: &str, extent: f64) -> PyResult<String> {
    let results = parse_results_csv(results_csv).map_err(err)?;
    let report = EvalReport::new(results, &eval::default_thresholds(extent)).map_err(err)?;
    Ok(report.summary_csv())
}

/// Canonical CSV text of result rows given as `(query_id, e_t, e_r)`; a
/// non-finite error marks a failure.
#[pyfunction]
fn results_csv(rows: Vec<(u64, f64, f64)>) -> String {
    let results: Vec<QueryResult> = rows
        .into_iter()
        .map(|(id, e_t, e_r)| {
            if e_t.is_finite() && e_r.is_finite() {
                QueryResult {
                    query_id: id,
                    solved: true,
                    e_t,
                    e_r,
                    inliers: 0,
                    iterations: 0,
                    wall_ms: 0,
                }
            } else {
                QueryResult::failed(id, 0, 0)
            }
        })
        .collect();
    write_results_csv(&results)
}

#[pymodule]
fn rayloc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_poses, m)?)?;
    m.add_function(wrap_pyfunction!(pose_error, m)?)?;
    m.add_function(wrap_pyfunction!(p3p, m)?)?;
    m.add_function(wrap_pyfunction!(topk, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(results_csv, m)?)?;
    Ok(())
}

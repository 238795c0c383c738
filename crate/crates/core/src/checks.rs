//! Finite-difference gradient suite over every graph primitive, the decoder
//! block, the confidence loss and a full tiny network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{split_head, ModelConfig, NetworkParams};
use crate::rng::rng_for;
use crate::tensor::{grad_check, Graph, Tensor, Var};
use crate::training::branch_loss;
use nalgebra::Vector3;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub points: usize,
    pub worst: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

/// Contracts `y` against a fixed random weight so every output entry
/// contributes a distinct amount to the scalar.
fn contract(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

struct Case {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    /// Shape of the value contracted to a scalar; `None` when the built
    /// graph is already scalar.
    output: Option<Vec<usize>>,
    build: Build,
}

fn unary(
    name: &'static str,
    shape: &[usize],
    output: &[usize],
    f: fn(&mut Graph, Var) -> Result<Var>,
) -> Case {
    Case {
        name,
        inputs: vec![shape.to_vec()],
        output: Some(output.to_vec()),
        build: Box::new(move |g, v| f(g, v[0])),
    }
}

fn primitive_cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            inputs: vec![vec![3, 4], vec![4, 5]],
            output: Some(vec![3, 5]),
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        Case {
            name: "matmul_transposed",
            inputs: vec![vec![4, 3], vec![5, 4]],
            output: Some(vec![3, 5]),
            build: Box::new(|g, v| g.matmul_t(v[0], v[1], true, true)),
        },
        Case {
            name: "add_broadcast",
            inputs: vec![vec![3, 4], vec![4]],
            output: Some(vec![3, 4]),
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        Case {
            name: "sub",
            inputs: vec![vec![3, 4], vec![3, 4]],
            output: Some(vec![3, 4]),
            build: Box::new(|g, v| g.sub(v[0], v[1])),
        },
        Case {
            name: "mul_broadcast",
            inputs: vec![vec![3, 4], vec![4]],
            output: Some(vec![3, 4]),
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        unary("scale", &[3, 4], &[3, 4], |g, x| g.scale(x, -1.7)),
        unary("add_scalar", &[3, 4], &[3, 4], |g, x| g.add_scalar(x, 0.3)),
        unary("softmax", &[3, 5], &[3, 5], |g, x| g.softmax(x)),
        unary("layer_norm", &[3, 6], &[3, 6], |g, x| g.layer_norm(x, 1e-5)),
        unary("gelu", &[3, 4], &[3, 4], |g, x| g.gelu(x)),
        unary("exp", &[3, 4], &[3, 4], |g, x| g.exp(x)),
        unary("log", &[3, 4], &[3, 4], |g, x| {
            let sq = g.mul(x, x)?;
            let pos = g.add_scalar(sq, 0.5)?;
            g.log(pos)
        }),
        unary("sqrt", &[3, 4], &[3, 4], |g, x| {
            let sq = g.mul(x, x)?;
            let pos = g.add_scalar(sq, 0.5)?;
            g.sqrt(pos)
        }),
        Case {
            name: "sum",
            inputs: vec![vec![3, 4]],
            output: None,
            build: Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            }),
        },
        unary("sum_last", &[3, 4], &[3], |g, x| {
            let sq = g.mul(x, x)?;
            g.sum_last(sq)
        }),
        unary("slice_cols", &[3, 6], &[3, 3], |g, x| {
            let s = g.slice_cols(x, 2, 3)?;
            g.mul(s, s)
        }),
        Case {
            name: "concat_cols",
            inputs: vec![vec![3, 2], vec![3, 4]],
            output: Some(vec![3, 6]),
            build: Box::new(|g, v| {
                let c = g.concat_cols(&[v[0], v[1]])?;
                g.mul(c, c)
            }),
        },
        unary("transpose", &[3, 4], &[4, 3], |g, x| {
            let t = g.transpose(x)?;
            g.mul(t, t)
        }),
    ]
}

fn run_case(case: &Case, points: usize, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let mut worst = 0.0_f64;
    for _ in 0..points {
        let inputs: Vec<Tensor> = case.inputs.iter().map(|s| randn(rng, s)).collect();
        let w = case.output.as_ref().map(|s| randn(rng, s));
        let err = grad_check(
            |g, v| {
                let y = (case.build)(g, v)?;
                match &w {
                    Some(w) => contract(g, y, w),
                    None => Ok(y),
                }
            },
            &inputs,
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(CaseResult {
        name: case.name.to_string(),
        points,
        worst,
    })
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        descriptor_width: 4,
        dim: 8,
        heads: 2,
        blocks: 1,
        fourier_levels: 1,
        mlp_ratio: 2,
        query_tokens: 3,
        normalize_scale: true,
    }
}

/// Perturbs every parameter of a freshly initialized network so biases and
/// norm gains are exercised away from their initial values.
fn jittered_params(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<NetworkParams> {
    let mut p = NetworkParams::init(config, rng.random())?;
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    Ok(p)
}

/// Decoder block (self-attention, cross-attention, MLP) with respect to its
/// parameters and both token sets.
fn block_case(points: usize, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let config = tiny_config();
    let mut worst = 0.0_f64;
    for _ in 0..points {
        let params = jittered_params(config.clone(), rng)?;
        let mut inputs = params.tensors().to_vec();
        let np = inputs.len();
        inputs.push(randn(rng, &[3, config.dim]));
        inputs.push(randn(rng, &[4, config.dim]));
        let w = randn(rng, &[3, config.dim]);
        let err = grad_check(
            |g, v| {
                let bound = params.bind_vars(v[..np].to_vec())?;
                let y = bound.block(g, v[np], v[np + 1], "query.0")?;
                contract(g, y, &w)
            },
            &inputs,
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(CaseResult {
        name: "decoder_block".into(),
        points,
        worst,
    })
}

/// Confidence-weighted loss of a raw head output against targets, one of
/// which is masked out.
fn loss_case(points: usize, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let n = 5;
    let mut worst = 0.0_f64;
    for _ in 0..points {
        let targets: Vec<Option<Vector3<f64>>> = (0..n)
            .map(|i| {
                (i != 2).then(|| {
                    Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
            })
            .collect();
        let raw = randn(rng, &[n, 4]);
        let err = grad_check(
            |g, v| {
                let (x, c) = split_head(g, v[0])?;
                branch_loss(g, x, c, &targets, 0.2)
            },
            &[raw],
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(CaseResult {
        name: "confidence_loss".into(),
        points,
        worst,
    })
}

/// Full forward pass and loss of a tiny network, with respect to every
/// parameter.
fn network_case(points: usize, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let config = tiny_config();
    let mut worst = 0.0_f64;
    for _ in 0..points {
        let params = jittered_params(config.clone(), rng)?;
        let query = randn(rng, &[config.query_tokens, config.descriptor_width]);
        let map_desc = randn(rng, &[4, config.descriptor_width]);
        let map_rays = randn(rng, &[4, config.ray_feature_width()]);
        let target =
            |rng: &mut ChaCha8Rng| Some(Vector3::new(rng.random(), rng.random(), rng.random()));
        let qt: Vec<_> = (0..config.query_tokens).map(|_| target(rng)).collect();
        let mt: Vec<_> = (0..4)
            .map(|i| if i == 1 { None } else { target(rng) })
            .collect();
        let err = grad_check(
            |g, v| {
                let bound = params.bind_vars(v.to_vec())?;
                let qd = g.constant(query.clone())?;
                let md = g.constant(map_desc.clone())?;
                let mr = g.constant(map_rays.clone())?;
                let q = bound.embed_query(g, qd)?;
                let m = bound.fuse_map(g, md, mr)?;
                let (fq, fm) = bound.decode(g, q, m)?;
                let rq = bound.head(g, fq, "query")?;
                let rm = bound.head(g, fm, "map")?;
                let (xq, cq) = split_head(g, rq)?;
                let (xm, cm) = split_head(g, rm)?;
                let lq = branch_loss(g, xq, cq, &qt, 0.2)?;
                let lm = branch_loss(g, xm, cm, &mt, 0.2)?;
                g.add(lq, lm)
            },
            params.tensors(),
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(CaseResult {
        name: "network_loss".into(),
        points,
        worst,
    })
}

/// Runs every case: primitives, block and loss at `points` random points,
/// the full network at `network_points`.
pub fn gradient_suite(points: usize, network_points: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (i, case) in primitive_cases().iter().enumerate() {
        let mut rng = rng_for(seed, &[i as u64]);
        out.push(run_case(case, points, &mut rng)?);
    }
    out.push(block_case(points, &mut rng_for(seed, &[100]))?);
    out.push(loss_case(points, &mut rng_for(seed, &[101]))?);
    if network_points > 0 {
        out.push(network_case(network_points, &mut rng_for(seed, &[102]))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_smoke() {
        let r = gradient_suite(2, 1, 3).unwrap();
        for c in &r {
            assert!(c.passed(), "{c:?}");
        }
        assert!(r.iter().any(|c| c.name == "network_loss"));
    }
}

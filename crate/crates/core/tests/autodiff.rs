use rayloc::checks::{gradient_suite, TOLERANCE};
use rayloc::tensor::{grad_check, Graph, Tensor};

#[test]
fn every_case_passes_at_one_hundred_points() {
    let cases = gradient_suite(100, 2, 7).unwrap();
    let mut failed = Vec::new();
    for c in &cases {
        assert_eq!(c.points, if c.name == "network_loss" { 2 } else { 100 });
        if !c.passed() {
            failed.push(format!("{} {:.3e}", c.name, c.worst));
        }
    }
    assert!(failed.is_empty(), "above {TOLERANCE:e}: {failed:?}");
    for name in [
        "matmul",
        "softmax",
        "layer_norm",
        "gelu",
        "decoder_block",
        "confidence_loss",
    ] {
        assert!(cases.iter().any(|c| c.name == name), "{name} missing");
    }
}

#[test]
fn checker_catches_a_wrong_gradient() {
    // Value is sum(exp x) but the graph differentiates 2 sum(exp x).
    let err = grad_check(
        |g: &mut Graph, v| {
            let e = g.exp(v[0])?;
            let e2 = g.scale(e, 2.0)?;
            let s = g.sum(e2)?;
            let detached = g.value(e).clone();
            let c = g.constant(detached)?;
            let cs = g.sum(c)?;
            let neg = g.scale(cs, -1.0)?;
            g.add(s, neg)
        },
        &[Tensor::vector(vec![0.3, -0.4])],
        1e-5,
    )
    .unwrap();
    assert!(err > 0.1, "{err}");
}

#[test]
fn matmul_gradient_matches_closed_form() {
    // d/dA sum(A B) = 1 Bᵀ.
    let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let va = g.param(a).unwrap();
    let vb = g.constant(b).unwrap();
    let y = g.matmul(va, vb).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let expect = [-0.5, 2.0, 4.0, -0.5, 2.0, 4.0];
    assert_eq!(g.grad(va).unwrap().data(), &expect);
}

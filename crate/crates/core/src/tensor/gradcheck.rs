use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// differences with step `h`, over every component of every input. Returns
/// the largest relative error.
pub fn grad_check<F>(build: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Shape(format!(
                "grad check needs a scalar output, got {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars = point
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Shape(format!(
            "grad check needs a scalar output, got {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(point)
        .map(|(v, t)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut worst = 0.0_f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        for j in 0..point[i].len() {
            let x = point[i].data()[j];
            probe[i].data_mut()[j] = x + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pt = vec![
            Tensor::randn(&[4, 3], 1.0, &mut rng),
            Tensor::randn(&[3, 2], 1.0, &mut rng),
            Tensor::randn(&[2], 1.0, &mut rng),
        ];
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.add(y, v[2])?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            },
            &pt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_like() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pt = vec![
            Tensor::randn(&[3, 5], 1.0, &mut rng),
            Tensor::randn(&[3, 5], 1.0, &mut rng),
        ];
        let err = grad_check(
            |g, v| {
                let p = g.softmax(v[0])?;
                let lp = g.log(p)?;
                let t = g.softmax(v[1])?;
                let prod = g.mul(lp, t)?;
                let s = g.sum(prod)?;
                g.scale(s, -1.0)
            },
            &pt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let pt = vec![Tensor::vector(vec![1.0, 2.0])];
        assert!(grad_check(|g, v| g.exp(v[0]), &pt, 1e-5).is_err());
    }
}

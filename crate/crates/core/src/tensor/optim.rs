use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update. `decay[i]` selects whether weight decay applies to
    /// parameter `i`.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        decay: &[bool],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len()
            || params.len() != self.first_moment.len()
            || decay.len() != params.len()
        {
            return Err(Error::Shape(format!(
                "adamw: {} params, {} grads, {} moments, {} decay flags",
                params.len(),
                grads.len(),
                self.first_moment.len(),
                decay.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::Shape(format!(
                    "adamw param {i}: {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let wd = if decay[i] { weight_decay } else { 0.0 };
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let w = params[i].data_mut();
            for (((w, g), m), v) in w
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * wd * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then cosine decay to zero at `total`.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, peak: f64) -> Result<f64> {
    if warmup >= total || step > total {
        return Err(Error::InvalidInput(format!(
            "schedule step {step}, warmup {warmup}, total {total}"
        )));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_only_step() {
        let mut p = vec![Tensor::vector(vec![2.0, -4.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, &[true], 0.1).unwrap();
        assert_eq!(p[0].data(), &[2.0 * (1.0 - 0.001), -4.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn single_step_hand_computed() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let g = vec![Tensor::vector(vec![1.0])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, &[true], 0.1).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        let expected = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert!((p[0].item() - 0.899).abs() < 1e-5);
    }

    #[test]
    fn mirrored_parameters_stay_mirrored() {
        let mut p = vec![Tensor::vector(vec![0.7, -0.7])];
        let g = vec![Tensor::vector(vec![-0.3, 0.3])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for _ in 0..2 {
            opt.step(&mut p, &g, &[true], 0.05).unwrap();
        }
        assert_eq!(p[0].data()[0], -p[0].data()[1]);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn step_shape_mismatch() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let bad = vec![Tensor::vector(vec![1.0])];
        assert!(opt.step(&mut p, &bad, &[true], 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 10, 1e-4).unwrap(), 0.0);
        assert_eq!(cosine_lr(10, 100, 10, 1e-4).unwrap(), 1e-4);
        assert_eq!(cosine_lr(30_000, 615_000, 30_000, 1e-4).unwrap(), 1e-4);
        assert!(cosine_lr(100, 100, 10, 1e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(55, 100, 10, 1e-4).unwrap() - 0.5e-4).abs() < 1e-12);
        assert!(cosine_lr(101, 100, 10, 1e-4).is_err());
        assert!(cosine_lr(5, 10, 10, 1e-4).is_err());
    }
}

use crate::error::AutodiffError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step. Gradients are validated before any parameter moves,
    /// so a rejected step leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), AutodiffError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(AutodiffError::GradientMismatch(format!(
                "{} parameters, {} gradients, optimizer built for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.m[i]) {
                return Err(AutodiffError::GradientMismatch(format!(
                    "parameter {i} has shape {:?} but gradient has {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient {
                    param: i,
                    index,
                    value,
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::row(&[1.0, -2.0, 3.5])];
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
        for _ in 0..10 {
            adam.step(&mut params, &[Tensor::zeros(1, 3)]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m1 = 0.1, v1 = 0.001; bias-corrected ratio is 1 / (1 + 1e-8)
        let mut params = vec![Tensor::scalar(0.0)];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
        adam.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut params = vec![Tensor::row(&[0.5, 0.5])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &params);
        for k in 0..50 {
            let g = (k as f64 * 0.37).sin();
            adam.step(&mut params, &[Tensor::row(&[g, g])]).unwrap();
            assert_eq!(params[0].data()[0], params[0].data()[1]);
        }
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut params = vec![Tensor::row(&[1.0, 2.0])];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let err = adam
            .step(&mut params, &[Tensor::row(&[0.0, f64::NAN])])
            .unwrap_err();
        assert!(matches!(
            err,
            AutodiffError::NonFiniteGradient { param: 0, index: 1, .. }
        ));
        assert_eq!(params[0].data(), &[1.0, 2.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn step_count_increments_by_one() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for k in 1..=3 {
            adam.step(&mut params, &[Tensor::scalar(0.3)]).unwrap();
            assert_eq!(adam.steps(), k);
        }
    }
}

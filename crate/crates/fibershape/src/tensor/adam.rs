//! Adam optimizer with decoupled weight decay.
//!
//! The decay is applied to the parameter *before* the gradient moments are
//! updated, i.e. `p ← p·(1 − lr·wd)` followed by the standard
//! bias-corrected Adam step. Moments are kept per parameter tensor and
//! aligned by index with the parameter list passed to [`Adam::step`].

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    /// Moment buffers are created lazily to match whatever parameter list the
    /// first `step` receives.
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over `params`; `grads[i]` is the gradient for `params[i]`.
    /// A missing or non-finite gradient aborts the step before any parameter
    /// is touched, naming the offending parameter.
    pub fn step(
        &mut self,
        params: &mut [(String, Tensor)],
        grads: &[Option<&Tensor>],
    ) -> Result<(), TensorError> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.rows(), p.cols()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(params.len(), self.m.len(), "parameter count changed mid-run");

        for ((name, p), g) in params.iter().zip(grads) {
            let g = g.ok_or_else(|| TensorError::MissingGradient { name: name.clone() })?;
            assert_eq!(g.shape(), p.shape(), "gradient shape mismatch for {name}");
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient { name: name.clone() });
            }
        }

        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[i].unwrap();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                *pj *= 1.0 - c.lr * c.weight_decay;
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pj -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn named(v: Vec<f64>) -> Vec<(String, Tensor)> {
        vec![("w".into(), Tensor::row(v))]
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params_unchanged() {
        let mut params = named(vec![1.5, -2.0, 0.0]);
        let before = params[0].1.clone();
        let mut opt = Adam::new(AdamConfig::default());
        let zero = Tensor::zeros(1, 3);
        opt.step(&mut params, &[Some(&zero)]).unwrap();
        opt.step(&mut params, &[Some(&zero)]).unwrap();
        assert_eq!(params[0].1, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = named(vec![1.0, 1.0, 1.0]);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg);
        let g = Tensor::row(vec![0.5, -3.0, 1e-3]);
        opt.step(&mut params, &[Some(&g)]).unwrap();
        for (j, sign) in [1.0, -1.0, 1.0].into_iter().enumerate() {
            let delta = params[0].1.data()[j] - 1.0;
            assert!(
                (delta + cfg.lr * sign).abs() < 1e-6,
                "delta {delta} for sign {sign}"
            );
        }
    }

    #[test]
    fn decay_only_shrinks_parameters_geometrically() {
        let mut params = named(vec![4.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg);
        let zero = Tensor::zeros(1, 1);
        opt.step(&mut params, &[Some(&zero)]).unwrap();
        assert_eq!(params[0].1.data()[0], 4.0 * (1.0 - 0.01));
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // Minimize (w − 3)² from w = 0 with lr 1e-2.
        let mut params = named(vec![0.0]);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg);
        let mut reached_at = None;
        for step in 0..2000 {
            let mut g = Graph::new(true, 0);
            let w = g.param(params[0].1.clone());
            let target = g.constant(Tensor::scalar(3.0));
            let loss = g.mse_loss(w, target);
            g.backward(loss).unwrap();
            let grad = g.grad(w).unwrap().clone();
            opt.step(&mut params, &[Some(&grad)]).unwrap();
            if (params[0].1.data()[0] - 3.0).abs() < 1e-3 {
                reached_at = Some(step + 1);
                break;
            }
        }
        assert!(
            reached_at.is_some(),
            "did not reach |w-3| < 1e-3 in 2000 steps, w = {}",
            params[0].1.data()[0]
        );
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut params = vec![
            ("a".to_string(), Tensor::scalar(1.0)),
            ("b".to_string(), Tensor::scalar(2.0)),
        ];
        let mut opt = Adam::new(AdamConfig::default());
        let g = Tensor::scalar(0.5);
        let err = opt.step(&mut params, &[Some(&g), None]).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient { name: "b".into() });
        // The step aborted before applying anything.
        assert_eq!(params[0].1.data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = named(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        let g = Tensor::scalar(f64::NAN);
        let err = opt.step(&mut params, &[Some(&g)]).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { name: "w".into() });
        assert_eq!(params[0].1.data()[0], 1.0);
    }
}

//! Adam with bias correction.

use super::model::{CnnModel, Params};
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub hyper: AdamConfig,
    step: u64,
    m: Params<F>,
    v: Params<F>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &Params<F>, hyper: AdamConfig) -> Self {
        Self {
            hyper,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Rejects non-finite or mis-shaped gradients without
    /// touching the model.
    pub fn step(&mut self, model: &mut CnnModel<F>, grads: &Params<F>) -> Result<()> {
        if grads.len() != self.m.len() || model.params().len() != self.m.len() {
            return Err(Error::Shape("gradient/optimizer shape mismatch".into()));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let (bc1, bc2, lr, eps) = (F::of(bc1), F::of(bc2), F::of(lr), F::of(eps));
        let params = model.params_mut();
        for (((p, g), m), v) in params
            .buffers_mut()
            .into_iter()
            .zip(grads.buffers())
            .zip(self.m.buffers_mut())
            .zip(self.v.buffers_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ArchSpec;
    use crate::profile::{ChannelConfig, ConfigKind};

    fn tiny() -> CnnModel<f64> {
        let arch = ArchSpec {
            input_rows: 2,
            input_width: 2,
            conv: vec![],
            hidden: vec![],
        };
        CnnModel::zeroed(ChannelConfig::of(ConfigKind::Flip), arch).unwrap()
    }

    fn grad_with(model: &CnnModel<f64>, g: f64) -> Params<f64> {
        let mut grads = model.params().zeros_like();
        for b in grads.buffers_mut() {
            b.fill(g);
        }
        grads
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = tiny();
        m.params_mut().dense[0].weights[0] = 0.3;
        let before = m.params().clone();
        let mut opt = AdamState::new(m.params(), AdamConfig::default());
        let g = grad_with(&m, 0.0);
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m.params(), &before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut m = tiny();
        let mut opt = AdamState::new(m.params(), AdamConfig::default());
        let g = grad_with(&m, 1.0);
        opt.step(&mut m, &g).unwrap();
        let w = m.params().dense[0].weights[0];
        assert!((w - (-1e-4 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w + 9.99999e-5).abs() < 1e-10);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let mut m = tiny();
        let h = AdamConfig::default();
        let mut opt = AdamState::new(m.params(), h);
        let g = 0.37;
        let grads = grad_with(&m, g);
        opt.step(&mut m, &grads).unwrap();
        opt.step(&mut m, &grads).unwrap();

        let (mut w, mut mm, mut vv) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            mm = h.beta1 * mm + (1.0 - h.beta1) * g;
            vv = h.beta2 * vv + (1.0 - h.beta2) * g * g;
            let mh = mm / (1.0 - h.beta1.powi(t));
            let vh = vv / (1.0 - h.beta2.powi(t));
            w -= h.lr * mh / (vh.sqrt() + h.eps);
        }
        for v in m.params().to_f64_vec() {
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut m = tiny();
        let before = m.params().clone();
        let mut opt = AdamState::new(m.params(), AdamConfig::default());
        let mut g = grad_with(&m, 0.1);
        g.dense[0].bias[0] = f64::NAN;
        assert!(matches!(opt.step(&mut m, &g), Err(Error::NonFinite(_))));
        assert_eq!(m.params(), &before);
        assert_eq!(opt.step_count(), 0);
    }
}

//! Adam with decoupled weight decay and a step learning-rate schedule.

use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tape::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning rate `initial * ratio^(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub initial: f64,
    pub ratio: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = epoch.checked_div(self.every).unwrap_or(0);
        self.initial * self.ratio.powi(drops as i32)
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_params(params: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            state: AdamState::for_params(params),
        }
    }

    /// One update with learning rate `lr`; `grads` in parameter order.
    ///
    /// Weight decay is decoupled: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(NumError::shape(
                "adam_step",
                &[params.len()],
                &[grads.len(), self.state.m.len()],
            ));
        }
        for ((p, g), m) in params.tensors_mut().iter().zip(grads).zip(&self.state.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumError::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(c.beta1), f(c.beta2));
        let (one_b1, one_b2) = (f(1.0 - c.beta1), f(1.0 - c.beta2));
        let (lr_t, eps, wd) = (f(lr), f(c.eps), f(c.weight_decay));
        let (bc1, bc2) = (f(bc1), f(bc2));

        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.state.m)
            .zip(&mut self.state.v)
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * *gv;
                *vv = b2 * *vv + one_b2 * *gv * *gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_only_shrinks() {
        let mut params = scalar_store(2.0);
        let cfg = AdamConfig {
            weight_decay: 0.0005,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &params);
        let zero = vec![Tensor::zeros(&[1])];
        for _ in 0..5 {
            adam.step(&mut params, &zero, 0.01).unwrap();
        }
        let expected = 2.0 * (1.0 - 0.01 * 0.0005f64).powi(5);
        assert!((params.get(crate::ParamId(0)).data()[0] - expected).abs() < 1e-15);

        let mut params = scalar_store(2.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &zero, 0.01).unwrap();
        assert_eq!(params.get(crate::ParamId(0)).data()[0], 2.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::scalar(1.0)], 0.01).unwrap();
        let moved = params.get(crate::ParamId(0)).data()[0] - 1.0;
        assert!((moved + 0.01).abs() < 1e-8, "{moved}");
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut params = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let mut tape = Tape::new();
            let x = tape.param(&params, crate::ParamId(0));
            let loss = tape.mse(x, Tensor::zeros(&[1])).unwrap();
            let f = tape.value(loss).data()[0];
            assert!(f < prev);
            prev = f;
            let g = tape.backward(loss).unwrap().param_grads(&params);
            adam.step(&mut params, &g, 0.05).unwrap();
        }
        assert!(prev < 1.0);
    }

    #[test]
    fn step_decay_schedule() {
        let s = StepDecay {
            initial: 0.01,
            ratio: 0.5,
            every: 6,
        };
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(5), 0.01);
        assert_eq!(s.lr_at(6), 0.005);
        assert_eq!(s.lr_at(59), 0.01 * 0.5f64.powi(9));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        assert!(adam
            .step(&mut params, &[Tensor::zeros(&[2])], 0.1)
            .is_err());
        assert!(adam.step(&mut params, &[], 0.1).is_err());
    }
}

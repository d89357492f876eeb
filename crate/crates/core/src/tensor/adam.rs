use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched if any
/// gradient is non-finite.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Dimension(format!("adam: parameter {i} shape {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(beta1, t as f64);
    let bc2 = 1.0 - libm::pow(beta2, t as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (libm::sqrt(vhat) + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = one(1.5);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.m[0][0] = 0.2;
        st.v[0][0] = 0.04;
        adam_step(&mut p, &one(0.0), &mut st, 1e-3).unwrap();
        assert!((st.m[0][0] - 0.18).abs() < 1e-15);
        assert!((st.v[0][0] - 0.04 * 0.999).abs() < 1e-15);

        let mut q = one(1.5);
        let mut fresh = AdamState::new(&q, AdamConfig::default());
        adam_step(&mut q, &one(0.0), &mut fresh, 1e-3).unwrap();
        assert_eq!(q[0].data()[0], 1.5);
    }

    #[test]
    fn unit_gradient_first_step_is_lr() {
        // m1 = 0.1, v1 = 0.001; mhat = 1, vhat = 1 -> step = lr / (1 + eps)
        let lr = 1e-3;
        let mut p = one(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &one(1.0), &mut st, lr).unwrap();
        let expected = -lr / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-18);
        // constant gradient keeps mhat = vhat = 1, so every step is lr/(1+eps)
        for _ in 0..9 {
            adam_step(&mut p, &one(1.0), &mut st, lr).unwrap();
        }
        assert!((p[0].data()[0] - 10.0 * expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = one(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &one(f64::NAN), &mut st, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = vec![Tensor::from_vec(vec![0.3, -0.7, 1.1])];
            let mut st = AdamState::new(&p, AdamConfig::default());
            for k in 0..20 {
                let g = Tensor::from_vec(vec![0.1 * k as f64, -0.2, libm::sin(k as f64)]);
                adam_step(&mut p, &[g], &mut st, 1e-2).unwrap();
            }
            p[0].data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
///
/// A parameter whose gradient is `None` is skipped entirely, moments included.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    config: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::StateMismatch(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::StateMismatch(format!(
                "param {i}: shape {:?}, moments {:?}",
                p.shape(),
                state.m[i].shape()
            )));
        }
        if let Some(g) = &grads[i] {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![0.5, -1.5]);
        let before = p.clone();
        let mut state = AdamState::new(&[&p]);
        adam_step(
            &mut [&mut p],
            &[Some(Tensor::zeros(&[2]))],
            &mut state,
            AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g|+eps).
        let mut p = Tensor::from_vec(vec![2.0]);
        let mut state = AdamState::new(&[&p]);
        let config = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p], &[Some(Tensor::from_vec(vec![1.0]))], &mut state, config).unwrap();
        let expected = 2.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let mut state = AdamState::new(&[&Tensor::zeros(&[3])]);
        let err = adam_step(
            &mut [&mut p],
            &[Some(Tensor::zeros(&[2]))],
            &mut state,
            AdamConfig::default(),
        );
        assert!(matches!(err, Err(Error::StateMismatch(_))));
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut p = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
            let mut state = AdamState::new(&[&p]);
            for step in 0..50 {
                let g: Vec<f64> = p.data().iter().map(|w| (w * 3.0 + step as f64).sin()).collect();
                adam_step(
                    &mut [&mut p],
                    &[Some(Tensor::from_vec(g))],
                    &mut state,
                    AdamConfig::default(),
                )
                .unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

//! Adam with bias correction over the parameter store.

use super::TrainError;
use crate::diffcore::graph::ParamRef;
use crate::diffcore::tensor::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment estimates, aligned index-for-index with the
/// parameter list they were created from.
pub struct AdamState<E: Element> {
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    step: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(params: &[ParamRef<E>]) -> AdamState<E> {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(&p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected update. A non-finite gradient aborts the whole step
/// before any parameter is touched, naming the offending parameter.
/// Non-trainable (frozen) parameters are skipped entirely.
pub fn adam_step<E: Element>(
    params: &[ParamRef<E>],
    state: &mut AdamState<E>,
    lr: f64,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), state.m.len(), "state built for another list");
    for p in params {
        if p.trainable() && !p.grad().is_all_finite() {
            return Err(TrainError::NonFiniteGrad {
                param: p.name().to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let b1 = E::from_f64(BETA1);
    let b2 = E::from_f64(BETA2);
    let one_b1 = E::from_f64(1.0 - BETA1);
    let one_b2 = E::from_f64(1.0 - BETA2);
    let corr1 = E::from_f64(1.0 / (1.0 - BETA1.powi(t as i32)));
    let corr2 = E::from_f64(1.0 / (1.0 - BETA2.powi(t as i32)));
    let lr_e = E::from_f64(lr);
    let eps = E::from_f64(EPS);
    for (i, p) in params.iter().enumerate() {
        if !p.trainable() {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        p.update(|values, grads| {
            for j in 0..values.len() {
                let g = grads[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let m_hat = m[j] * corr1;
                let v_hat = v[j] * corr2;
                values[j] = values[j] - lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::Param;

    #[test]
    fn first_step_magnitude_is_lr() {
        let p = Param::new("w", Tensor::<f64>::from_f64s(&[3], &[1.0, 2.0, 3.0]));
        // plant a constant gradient
        {
            let mut g = crate::diffcore::Graph::new();
            let v = g.param(&p);
            let s = g.scale(v, 0.37).unwrap();
            let loss = g.sum(s).unwrap();
            g.backward(loss).unwrap();
        }
        let params = vec![p.clone()];
        let mut state = AdamState::new(&params);
        adam_step(&params, &mut state, 1e-2).unwrap();
        let updated = p.value();
        for (i, want) in [1.0, 2.0, 3.0].iter().enumerate() {
            let delta = (updated.data()[i] - want).abs();
            assert!((delta - 1e-2).abs() < 1e-6, "update magnitude {delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = Param::new("w", Tensor::<f64>::from_f64s(&[2], &[5.0, -1.0]));
        let params = vec![p.clone()];
        let mut state = AdamState::new(&params);
        for _ in 0..10 {
            adam_step(&params, &mut state, 1e-2).unwrap();
        }
        assert_eq!(p.value().data(), &[5.0, -1.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        // accumulated near-max gradients overflow to inf without any single
        // backward pass ever seeing a non-finite value
        let p = Param::new("net.bad", Tensor::<f64>::from_f64s(&[1], &[1.5]));
        for _ in 0..3 {
            let mut g = crate::diffcore::Graph::new();
            let v = g.param(&p);
            let s = g.scale(v, 0.9e308).unwrap();
            let loss = g.sum(s).unwrap();
            g.backward(loss).unwrap();
        }
        assert!(!p.grad().is_all_finite());
        let params = vec![p.clone()];
        let mut state = AdamState::new(&params);
        match adam_step(&params, &mut state, 1e-3) {
            Err(TrainError::NonFiniteGrad { param }) => assert_eq!(param, "net.bad"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
        assert_eq!(p.value().data(), &[1.5], "no partial update");
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let p = Param::new("w", Tensor::<f64>::from_f64s(&[2], &[0.3, -0.8]));
            let params = vec![p.clone()];
            let mut state = AdamState::new(&params);
            for step in 0..100 {
                let mut g = crate::diffcore::Graph::new();
                let v = g.param(&p);
                let sq = g.mul(v, v).unwrap();
                let loss = g.sum(sq).unwrap();
                g.backward(loss).unwrap();
                adam_step(&params, &mut state, 1e-3 * (1.0 + (step % 7) as f64)).unwrap();
                crate::diffcore::zero_grads(&params);
            }
            p.value().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}

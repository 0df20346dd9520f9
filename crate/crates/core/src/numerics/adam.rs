use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError, Parameter, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Parameter<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Frozen parameters and their moments are
/// left untouched; the step counter advances once per call.
pub fn adam_step<T: Real>(
    params: &mut [Parameter<T>],
    state: &mut AdamState<T>,
    hp: &AdamConfig,
) -> Result<(), NumericsError> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            left: (params.len(), 0),
            right: (state.m.len(), state.v.len()),
        });
    }
    for ((p, m), v) in params.iter().zip(&state.m).zip(&state.v) {
        if p.value.shape() != m.shape() || p.value.shape() != v.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                left: p.value.shape(),
                right: m.shape(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let c1 = T::one() / (T::one() - b1.powi(t));
    let c2 = T::one() / (T::one() - b2.powi(t));
    let lr = T::from_f64(hp.lr);
    let eps = T::from_f64(hp.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if p.frozen {
            continue;
        }
        let values = p.value.as_mut_slice();
        let grads = p.grad.as_slice();
        for (((w, &g), mi), vi) in values
            .iter_mut()
            .zip(grads)
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi * c1;
            let v_hat = *vi * c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

use ndarray::Array1;

use crate::config::AdamConfig;
use crate::hostmgr::ParamState;

/// One bias-corrected Adam step on `param` with its moment buffers; `t` is
/// the 1-based step count of this parameter group.
pub fn adam_step(
    cfg: &AdamConfig,
    t: u64,
    param: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    grad: &[f64],
) {
    debug_assert!(t >= 1);
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(exp);
    let c2 = 1.0 - cfg.beta2.powi(exp);
    for (((p, m), v), &g) in param.iter_mut().zip(m).zip(v).zip(grad) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Lazy sparse Adam: advances one feature's own step count and state.
pub fn sparse_adam_step(cfg: &AdamConfig, state: &mut ParamState, grad: &[f64]) {
    state.steps += 1;
    adam_step(
        cfg,
        state.steps,
        &mut state.embedding,
        &mut state.momentum,
        &mut state.velocity,
        grad,
    );
}

/// Adam state for the replicated dense parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAdam {
    m: Array1<f64>,
    v: Array1<f64>,
    steps: u64,
}

impl DenseAdam {
    pub fn new(len: usize) -> Self {
        Self {
            m: Array1::zeros(len),
            v: Array1::zeros(len),
            steps: 0,
        }
    }

    pub fn step(&mut self, cfg: &AdamConfig, params: &mut Array1<f64>, grad: &Array1<f64>) {
        self.steps += 1;
        adam_step(
            cfg,
            self.steps,
            params.as_slice_mut().expect("contiguous params"),
            self.m.as_slice_mut().expect("contiguous"),
            self.v.as_slice_mut().expect("contiguous"),
            grad.as_slice().expect("contiguous grads"),
        );
    }
}

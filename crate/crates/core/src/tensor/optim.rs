use serde::{Deserialize, Serialize};

use super::{shape_err, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Step counter and per-parameter moment estimates for AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .values()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One AdamW update. Weight decay is applied to the parameter directly,
    /// never folded into the moment estimates.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        adamw_step(params, grads, self)
    }
}

pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(shape_err(
            "adamw_step",
            "parameter/gradient/state counts differ",
        ));
    }
    for (p, g) in params.values().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(shape_err(
                "adamw_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(TensorError::NonFinite { op: "adamw_step" });
        }
    }
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    if lr < 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "adamw_step",
            detail: "learning rate must be non-negative".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (i, param) in params.values_mut().iter_mut().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((theta, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta -= lr * weight_decay * *theta;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

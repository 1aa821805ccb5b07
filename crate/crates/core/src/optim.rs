//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Parameter("rates must be non-negative, eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Parameter("betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates for one tensor.
#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

/// Optimizer state across both towers and the log-temperature scalar.
#[derive(Debug, Clone)]
pub struct AdamWState {
    text: Vec<Moments>,
    image: Vec<Moments>,
    log_tau_m: f64,
    log_tau_v: f64,
    /// Strictly increasing update counter (drives bias correction).
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &crate::encoder::ModelParams) -> Self {
        let zeros = |set: &ParamSet| {
            set.iter()
                .map(|t| Moments {
                    m: Matrix::zeros(t.value.rows(), t.value.cols()),
                    v: Matrix::zeros(t.value.rows(), t.value.cols()),
                })
                .collect()
        };
        Self {
            text: zeros(&params.text),
            image: zeros(&params.image),
            log_tau_m: 0.0,
            log_tau_v: 0.0,
            step: 0,
        }
    }
}

fn update_tensor(
    value: &mut Matrix,
    grad: &Matrix,
    moments: &mut Moments,
    cfg: &AdamWConfig,
    bias1: f64,
    bias2: f64,
    name: &str,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::Numeric(format!("gradient for '{name}' is not finite")));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for ((theta, g), (m, v)) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(moments.m.data_mut().iter_mut().zip(moments.v.data_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        // Decoupled decay uses the pre-step value of theta.
        let decay = cfg.lr * cfg.weight_decay * *theta;
        *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) + decay;
    }
    Ok(())
}

/// One AdamW step over the whole model. Clamps the log-temperature afterward.
pub fn adamw_update(
    params: &mut crate::encoder::ModelParams,
    grads: &crate::train::ModelGrads,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    cfg.validate()?;
    if grads.text.len() != params.text.len() || grads.image.len() != params.image.len() {
        return Err(Error::Dimension("gradient set shape mismatch".into()));
    }
    state.step += 1;
    let bias1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(state.step as i32);

    for idx in 0..params.text.len() {
        let name = params.text.tensor(idx).name.clone();
        update_tensor(
            &mut params.text.tensor_mut(idx).value,
            &grads.text[idx],
            &mut state.text[idx],
            cfg,
            bias1,
            bias2,
            &format!("text.{name}"),
        )?;
    }
    for idx in 0..params.image.len() {
        let name = params.image.tensor(idx).name.clone();
        update_tensor(
            &mut params.image.tensor_mut(idx).value,
            &grads.image[idx],
            &mut state.image[idx],
            cfg,
            bias1,
            bias2,
            &format!("image.{name}"),
        )?;
    }

    let g = grads.log_tau;
    if !g.is_finite() {
        return Err(Error::Numeric("gradient for 'log_tau' is not finite".into()));
    }
    state.log_tau_m = cfg.beta1 * state.log_tau_m + (1.0 - cfg.beta1) * g;
    state.log_tau_v = cfg.beta2 * state.log_tau_v + (1.0 - cfg.beta2) * g * g;
    let m_hat = state.log_tau_m / bias1;
    let v_hat = state.log_tau_v / bias2;
    let decay = cfg.lr * cfg.weight_decay * params.log_tau;
    params.log_tau -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) + decay;
    params.clamp_log_tau();
    Ok(())
}

/// AdamW on a bare parameter set (used by the linear-probe and head training
/// paths, where there is no tower structure).
#[derive(Debug, Clone)]
pub struct ParamSetAdamW {
    moments: Vec<Moments>,
    step: u64,
    cfg: AdamWConfig,
}

impl ParamSetAdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Self {
        Self {
            moments: params
                .iter()
                .map(|t| Moments {
                    m: Matrix::zeros(t.value.rows(), t.value.cols()),
                    v: Matrix::zeros(t.value.rows(), t.value.cols()),
                })
                .collect(),
            step: 0,
            cfg,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) -> Result<()> {
        self.step += 1;
        let bias1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for idx in 0..params.len() {
            let name = params.tensor(idx).name.clone();
            update_tensor(
                &mut params.tensor_mut(idx).value,
                &grads[idx],
                &mut self.moments[idx],
                &self.cfg,
                bias1,
                bias2,
                &name,
            )?;
        }
        Ok(())
    }
}

//! Cloud-side optimizers applied to the aggregated update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{apply_update, GradientVector, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    /// Adam with decoupled weight decay.
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamwParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwParams {
    fn default() -> Self {
        AdamwParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adamw {
        lr: f64,
        params: AdamwParams,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, adamw: AdamwParams, n: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be > 0")));
        }
        Ok(match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adamw => {
                let ok = (0.0..1.0).contains(&adamw.beta1)
                    && (0.0..1.0).contains(&adamw.beta2)
                    && adamw.eps > 0.0
                    && adamw.weight_decay >= 0.0;
                if !ok {
                    return Err(Error::Config(format!("invalid AdamW parameters {adamw:?}")));
                }
                Optimizer::Adamw {
                    lr,
                    params: adamw,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                }
            }
        })
    }

    pub fn step(&mut self, theta: &ModelParams, g: &GradientVector) -> Result<ModelParams> {
        match self {
            Optimizer::Sgd { lr } => apply_update(theta, g, *lr),
            Optimizer::Adamw { lr, params, m, v, t } => {
                if g.len() != theta.len() || m.len() != theta.len() {
                    return Err(Error::Shape(format!(
                        "update has {} entries, model {}",
                        g.len(),
                        theta.len()
                    )));
                }
                *t += 1;
                let bc1 = 1.0 - params.beta1.powi(*t as i32);
                let bc2 = 1.0 - params.beta2.powi(*t as i32);
                let mut next = theta.values.clone();
                for i in 0..next.len() {
                    let gi = g.values[i];
                    m[i] = params.beta1 * m[i] + (1.0 - params.beta1) * gi;
                    v[i] = params.beta2 * v[i] + (1.0 - params.beta2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    next[i] -= *lr * (m_hat / (v_hat.sqrt() + params.eps) + params.weight_decay * next[i]);
                }
                let out = theta.with_values(next)?;
                if !out.all_finite() {
                    return Err(Error::Numeric("optimizer produced non-finite parameters".into()));
                }
                Ok(out)
            }
        }
    }
}

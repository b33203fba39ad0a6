use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamRegistry};

/// AdamW hyperparameters. Weight decay is decoupled from the moment
/// update; gradients are clipped to a global norm before the moments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 5.0,
        }
    }
}

/// Step-based learning-rate schedule: linear warm-up from zero, then a
/// one-shot multiplicative decay at `decay_step`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub decay_step: u64,
    pub decay_factor: f64,
}

/// Learning rate at a step: `base * min(step/warmup, 1)`, multiplied by
/// the decay factor once `step >= decay_step`.
pub fn lr_at(step: u64, schedule: &LrSchedule) -> f64 {
    let warm = if schedule.warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / schedule.warmup_steps as f64).min(1.0)
    };
    let decay = if step >= schedule.decay_step {
        schedule.decay_factor
    } else {
        1.0
    };
    schedule.base * warm * decay
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl OptimState {
    pub fn new(params: &ParamRegistry, config: AdamWConfig) -> Self {
        let m = params
            .iter()
            .map(|(_, t)| vec![0.0; t.elem_count()])
            .collect();
        let v = params
            .iter()
            .map(|(_, t)| vec![0.0; t.elem_count()])
            .collect();
        OptimState {
            m,
            v,
            step: 0,
            config,
        }
    }
}

/// One AdamW update over every registered parameter.
///
/// Missing gradients count as zero (the parameter still decays). A
/// non-finite gradient aborts with the parameter's name.
pub fn adamw_step(
    params: &ParamRegistry,
    state: &mut OptimState,
    lr: f64,
) -> Result<(), NumericsError> {
    let cfg = state.config;

    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    let mut norm_sq = 0.0;
    for (name, tensor) in params.iter() {
        let g = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.elem_count()]);
        for &v in &g {
            if !v.is_finite() {
                return Err(NumericsError::NonFiniteGrad(name.to_string()));
            }
            norm_sq += v * v;
        }
        grads.push(g);
    }
    let norm = norm_sq.sqrt();
    let clip_scale = if norm > cfg.clip_norm && norm > 0.0 {
        cfg.clip_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - cfg.beta1.powf(t);
    let bias2 = 1.0 - cfg.beta2.powf(t);

    for (idx, (_, tensor)) in params.iter().enumerate() {
        let mut data = tensor.value();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for (i, value) in data.iter_mut().enumerate() {
            let g = grads[idx][i] * clip_scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            *value -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *value);
        }
        tensor.set_data(&data);
    }
    Ok(())
}

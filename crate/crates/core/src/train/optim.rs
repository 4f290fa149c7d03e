//! Learning-rate schedules and optimizer rules. Conventions follow the Keras
//! semantics the reference hyperparameter table is written in: staircase
//! exponential decay, cosine decay with linear warmup, SGD momentum as
//! `v ← m·v − η·g; θ ← θ + v`, Adam with bias correction and ε=1e-7, global
//! gradient-norm clipping, and decoupled weight decay `θ ← θ·(1 − η·wd)`
//! applied before the rule.

use crate::gradcore::Tensor;

use super::{OptimizerKind, ScheduleKind, TrainConfig, TrainError};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-7;

/// The learning rate the schedule prescribes at an absolute step count.
pub fn lr_at_step(config: &TrainConfig, step: usize) -> f64 {
    match config.schedule {
        ScheduleKind::ExponentialStaircase => {
            let boundaries = (step / config.decay_steps.max(1)) as i32;
            config.initial_lr * config.decay_rate.powi(boundaries)
        }
        ScheduleKind::CosineWithWarmup => {
            if step < config.warmup_steps {
                let frac = step as f64 / config.warmup_steps as f64;
                config.initial_lr + (config.warmup_target - config.initial_lr) * frac
            } else {
                let into = (step - config.warmup_steps) as f64;
                let frac = (into / config.decay_steps.max(1) as f64).min(1.0);
                config.warmup_target * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Per-parameter optimizer slots plus the counters that drive the schedule.
/// The delta buffer holds the persistent adversarial perturbation of free
/// adversarial training, sliced to the batch at hand.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    /// Persistent perturbation, `batch_size × pixels`, always within
    /// [−ε, ε].
    pub delta: Vec<f32>,
    /// SGD velocity, or Adam first moment.
    slot_a: Vec<Vec<f32>>,
    /// Adam second moment (empty for SGD).
    slot_b: Vec<Vec<f32>>,
}

impl TrainState {
    pub fn new(params: &[(String, Tensor<f32>)], config: &TrainConfig) -> TrainState {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let slot_b = match config.optimizer {
            OptimizerKind::SgdMomentum => Vec::new(),
            OptimizerKind::Adam => zeros.clone(),
        };
        TrainState { step: 0, epoch: 0, delta: Vec::new(), slot_a: zeros, slot_b }
    }
}

/// One optimizer application: global-norm clip, decoupled weight decay, then
/// the update rule, advancing the step counter. Aborts on non-finite params.
pub fn optimizer_step(
    params: &mut [(String, Tensor<f32>)],
    mut grads: Vec<(String, Tensor<f32>)>,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<(), TrainError> {
    if grads.len() != params.len()
        || grads.iter().zip(params.iter()).any(|((gn, g), (pn, p))| {
            gn != pn || g.shape() != p.shape()
        })
    {
        return Err(TrainError::Invalid {
            detail: "gradients are not aligned with the parameter list".to_string(),
        });
    }

    if let Some(clip) = config.global_clipnorm {
        let mut sq = 0.0f64;
        for (_, g) in &grads {
            for &v in g.data() {
                sq += f64::from(v) * f64::from(v);
            }
        }
        let norm = sq.sqrt();
        if norm > clip {
            let scale = (clip / norm) as f32;
            for (_, g) in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }

    let lr = lr_at_step(config, state.step) as f32;
    if config.weight_decay > 0.0 {
        let keep = 1.0 - lr * config.weight_decay as f32;
        for (_, p) in params.iter_mut() {
            for v in p.data_mut() {
                *v *= keep;
            }
        }
    }

    match config.optimizer {
        OptimizerKind::SgdMomentum => {
            let m = config.momentum as f32;
            for (i, ((_, p), (_, g))) in params.iter_mut().zip(&grads).enumerate() {
                let vel = &mut state.slot_a[i];
                for ((w, &gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                    *v = m * *v - lr * gv;
                    *w += *v;
                }
            }
        }
        OptimizerKind::Adam => {
            let t = (state.step + 1) as i32;
            let b1 = ADAM_BETA1 as f32;
            let b2 = ADAM_BETA2 as f32;
            let corr1 = 1.0 - (ADAM_BETA1).powi(t) as f32;
            let corr2 = 1.0 - (ADAM_BETA2).powi(t) as f32;
            let eps = ADAM_EPS as f32;
            for (i, ((_, p), (_, g))) in params.iter_mut().zip(&grads).enumerate() {
                let ma = &mut state.slot_a[i];
                let va = &mut state.slot_b[i];
                for (((w, &gv), m1), v2) in
                    p.data_mut().iter_mut().zip(g.data()).zip(ma.iter_mut()).zip(va.iter_mut())
                {
                    *m1 = b1 * *m1 + (1.0 - b1) * gv;
                    *v2 = b2 * *v2 + (1.0 - b2) * gv * gv;
                    let mhat = *m1 / corr1;
                    let vhat = *v2 / corr2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    state.step += 1;

    for (name, p) in params.iter() {
        if !p.is_finite() {
            return Err(TrainError::Diverged {
                detail: format!("parameter {name} became non-finite at step {}", state.step),
            });
        }
    }
    Ok(())
}

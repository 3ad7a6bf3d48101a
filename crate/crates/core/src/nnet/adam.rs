use crate::error::{Error, Result};

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
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

/// First/second moment accumulators, keyed like the parameters they track.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl OptimState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam step that *descends* `grads`. Parameters absent
/// from `grads` are left untouched. Fails without modifying anything if a
/// gradient is non-finite.
pub fn opt_step(state: &mut OptimState, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        match (params.get(name), state.m.get(name)) {
            (Some(p), Some(m)) if p.dim() == g.dim() && m.dim() == g.dim() => {}
            _ => {
                return Err(Error::Shape(format!(
                    "gradient {name} does not match a tracked parameter"
                )))
            }
        }
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads.iter() {
        let m = state.m.get_mut(name).expect("checked");
        let v = state.v.get_mut(name).expect("checked");
        let p = params.get_mut(name).expect("checked");
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
    }
    Ok(())
}

use serde::{Deserialize, Serialize};

use super::ModelParameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves both the
/// parameters and the state untouched.
pub fn adam_step(params: &mut ModelParameters, grad: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = params.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::LengthMismatch {
            what: "adam gradient/state",
            expected: n,
            got: if grad.len() != n { grad.len() } else { state.m.len().min(state.v.len()) },
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index: i });
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for (((p, &g), m), v) in params.values_mut().iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = ModelParameters::new(vec![1.0, -2.0]).unwrap();
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = ModelParameters::new(vec![0.0, 0.0, 0.0]).unwrap();
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.5, 1e-3], &mut s, 0.01, &AdamConfig::default()).unwrap();
        for (v, sign) in p.values().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 0.01).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn converges_on_parabola() {
        let mut p = ModelParameters::new(vec![1.0]).unwrap();
        let mut s = AdamState::new(1);
        for _ in 0..100 {
            let g = 2.0 * p.values()[0];
            adam_step(&mut p, &[g], &mut s, 0.1, &AdamConfig::default()).unwrap();
        }
        assert!(p.values()[0].abs() < 0.05, "{}", p.values()[0]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = ModelParameters::new(vec![1.0, 1.0]).unwrap();
        let mut s = AdamState::new(2);
        let err = adam_step(&mut p, &[0.1, f64::NAN], &mut s, 0.1, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteGradient { index: 1 })));
        assert_eq!(p.values(), &[1.0, 1.0]);
        assert_eq!(s, AdamState::new(2));
    }
}

//! Adam with decoupled weight decay and a step-down learning-rate schedule.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update in place:
/// `p ← p − lr·wd·p − lr·m̂ / (√v̂ + ε)`.
///
/// Nothing is modified when a gradient entry is non-finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, optimizer state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at parameter {i}"
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - BETA1.powi(t);
    let bias2 = 1.0 - BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * weight_decay * *p + lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

/// Learning rate for a 1-based epoch: `lr · decay^(milestones reached)`.
pub fn lr_at(epoch: usize, lr: f64, decay: f64, milestones: &[usize]) -> f64 {
    let drops = milestones.iter().filter(|&&m| epoch >= m).count();
    lr * decay.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 1e-3, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let g = [0.3, -4.0];
        adam_step(&mut p, &g, &mut s, 1e-3, 0.0).unwrap();
        for (pv, gv) in p.iter().zip(g) {
            let expected = -1e-3 * gv / (gv.abs() + EPSILON);
            assert!((pv - expected).abs() < 1e-15, "{pv} vs {expected}");
        }
    }

    #[test]
    fn decay_only_scales() {
        let mut p = vec![2.0, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3, 5e-4).unwrap();
        let factor = 1.0 - 1e-3 * 5e-4;
        assert!((p[0] - 2.0 * factor).abs() < 1e-15);
        assert!((p[1] + factor).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_leaves_params() {
        let mut p = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut p, &[0.1, f64::NAN], &mut s, 1e-3, 0.0).is_err());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn step_down_schedule() {
        assert_eq!(lr_at(29, 1e-3, 0.5, &[30, 40]), 1e-3);
        assert_eq!(lr_at(30, 1e-3, 0.5, &[30, 40]), 5e-4);
        assert_eq!(lr_at(45, 1e-3, 0.5, &[30, 40]), 2.5e-4);
    }
}

//! Adam and momentum SGD over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

fn check_grads(grads: &ParamVector, step: u64) -> Result<()> {
    if let Some(i) = grads.values().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {} at step {step}",
            grads.values()[i]
        )));
    }
    Ok(())
}

/// Bias-corrected Adam without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> Self {
        AdamState {
            m: ParamVector::zeros(like.layout().clone()),
            v: ParamVector::zeros(like.layout().clone()),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut ParamVector, grads: &ParamVector, state: &mut AdamState, lr: f64) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.m)?;
    check_grads(grads, state.step)?;
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let m = state.m.values_mut();
    let v = state.v.values_mut();
    for (((p, &g), m), v) in params.values_mut().iter_mut().zip(grads.values()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay (torch semantics).
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub buffer: ParamVector,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step: u64,
}

impl SgdState {
    pub fn new(like: &ParamVector, momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            buffer: ParamVector::zeros(like.layout().clone()),
            momentum,
            weight_decay,
            step: 0,
        }
    }
}

/// One SGD step. Entries where `mask` is false receive no update and are
/// held at zero.
pub fn sgd_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut SgdState,
    lr: f64,
    mask: Option<&[bool]>,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.buffer)?;
    check_grads(grads, state.step)?;
    if let Some(m) = mask {
        if m.len() != params.len() {
            return Err(Error::Layout("mask length differs from parameters".into()));
        }
    }
    let first = state.step == 0;
    state.step += 1;
    let (mu, wd) = (state.momentum, state.weight_decay);
    let buf = state.buffer.values_mut();
    for (i, ((p, &g), b)) in params.values_mut().iter_mut().zip(grads.values()).zip(buf).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            *p = 0.0;
            *b = 0.0;
            continue;
        }
        let d = g + wd * *p;
        *b = if first { d } else { mu * *b + d };
        *p -= lr * *b;
    }
    Ok(())
}

/// Piecewise-constant schedule dividing the rate by `factor` at each milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiStep {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl MultiStep {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        let increasing = self.milestones.windows(2).all(|w| w[0] < w[1]);
        let inside = self.milestones.last().is_none_or(|&m| m < epochs);
        if !increasing || !inside {
            return Err(Error::Config(format!(
                "milestones {:?} must be strictly increasing and below {epochs} epochs",
                self.milestones
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base / self.factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layout, SegmentTag};
    use std::sync::Arc;

    fn pv(v: Vec<f64>) -> ParamVector {
        let mut l = Layout::new();
        l.push("w", vec![v.len()], SegmentTag::Weight);
        ParamVector::new(Arc::new(l), v).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = pv(vec![1.0, -2.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &pv(vec![0.0, 0.0]), &mut st, 1e-3).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = pv(vec![0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &pv(vec![3.0, -0.5, 1e-2]), &mut st, 1e-3).unwrap();
        for (x, s) in p.values().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-3).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = pv(vec![0.0]);
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &pv(vec![f64::NAN]), &mut st, 1e-3),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn sgd_momentum_and_mask() {
        let mut p = pv(vec![1.0, 1.0]);
        let mut st = SgdState::new(&p, 0.9, 0.0);
        let g = pv(vec![1.0, 1.0]);
        let mask = [true, false];
        sgd_step(&mut p, &g, &mut st, 0.1, Some(&mask)).unwrap();
        sgd_step(&mut p, &g, &mut st, 0.1, Some(&mask)).unwrap();
        // buffers 1 then 1.9
        assert!((p.values()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
        assert_eq!(p.values()[1], 0.0);
    }

    #[test]
    fn multistep_schedule() {
        let s = MultiStep {
            base: 0.1,
            milestones: vec![80, 120],
            factor: 10.0,
        };
        s.validate(160).unwrap();
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(80) - 0.01).abs() < 1e-18);
        assert!((s.lr_at(159) - 0.001).abs() < 1e-18);
        assert!(s.validate(100).is_err());
    }
}

//! Learning-rate schedules and the local/central optimizers.
//!
//! Layer-wise optimizers (LARS, LAMB) compute their trust ratio per
//! [`ParamTree`] layer, the same granularity used by per-layer clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_tree::ParamTree;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    ExponentialDecay,
    StepDecay,
}

fn one() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub kind: ScheduleKind,
    #[serde(default)]
    pub decay_start: u64,
    #[serde(default = "one")]
    pub decay_rate: f64,
    #[serde(default = "one_u64")]
    pub transition_steps: u64,
}

impl Schedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            kind: ScheduleKind::Constant,
            decay_start: 0,
            decay_rate: 1.0,
            transition_steps: 1,
        }
    }

    pub fn exponential(base_lr: f64, decay_start: u64, decay_rate: f64, transition_steps: u64) -> Self {
        Self {
            base_lr,
            kind: ScheduleKind::ExponentialDecay,
            decay_start,
            decay_rate,
            transition_steps,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!("{field}.base_lr"), "must be positive and finite"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config(format!("{field}.decay_rate"), "must lie in (0, 1]"));
        }
        if self.transition_steps == 0 {
            return Err(Error::config(format!("{field}.transition_steps"), "must be positive"));
        }
        Ok(())
    }

    /// Learning rate for (zero-based) step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.kind == ScheduleKind::Constant || t < self.decay_start {
            return self.base_lr;
        }
        let elapsed = (t - self.decay_start) as f64 / self.transition_steps as f64;
        let exponent = match self.kind {
            ScheduleKind::ExponentialDecay => elapsed,
            ScheduleKind::StepDecay => elapsed.floor(),
            ScheduleKind::Constant => unreachable!(),
        };
        self.base_lr * self.decay_rate.powf(exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    #[serde(rename = "adagrad")]
    AdaGrad,
    Lars,
    Lamb,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn epsilon() -> f64 {
    1e-6
}

/// Optimizer hyperparameters. Defaults: β₁ 0.9, β₂ 0.999, ε 1e-6, no momentum,
/// no weight decay, unbounded trust ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Upper bound on the LARS/LAMB trust ratio; `None` leaves it unbounded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust_clip: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            beta1: beta1(),
            beta2: beta2(),
            epsilon: epsilon(),
            momentum: 0.0,
            weight_decay: 0.0,
            trust_clip: None,
        }
    }
}

impl Hyper {
    pub fn validate(&self, field: &str) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) {
            return Err(Error::config(format!("{field}.beta1"), "must lie in [0, 1)"));
        }
        if !unit(self.beta2) {
            return Err(Error::config(format!("{field}.beta2"), "must lie in [0, 1)"));
        }
        if !unit(self.momentum) {
            return Err(Error::config(format!("{field}.momentum"), "must lie in [0, 1)"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::config(format!("{field}.epsilon"), "must be nonnegative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{field}.weight_decay"), "must be nonnegative"));
        }
        if let Some(c) = self.trust_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("{field}.trust_clip"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// An optimizer instance with its moment buffers.
///
/// Moments are allocated on the first [`apply`](Optimizer::apply) and must
/// stay congruent with the parameters afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T: Real = f64> {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    pub step_count: u64,
    pub first_moment: Option<ParamTree<T>>,
    pub second_moment: Option<ParamTree<T>>,
}

fn trust_ratio<T: Real>(param_norm: T, update_norm: T, clip: Option<f64>) -> T {
    // zero norms (fresh zero-initialized biases, zero updates) fall back to 1
    let r = if param_norm > T::zero() && update_norm > T::zero() {
        param_norm / update_norm
    } else {
        T::one()
    };
    match clip {
        Some(c) => r.min(T::of(c)),
        None => r,
    }
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, hyper: Hyper) -> Self {
        Self {
            kind,
            hyper,
            step_count: 0,
            first_moment: None,
            second_moment: None,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        Self::new(
            OptimizerKind::Sgd,
            Hyper {
                momentum,
                ..Hyper::default()
            },
        )
    }

    fn moments(&mut self, params: &ParamTree<T>) -> Result<(&mut ParamTree<T>, &mut ParamTree<T>)> {
        let m = self.first_moment.get_or_insert_with(|| params.zeros_like());
        m.check_congruent(params)?;
        let v = self.second_moment.get_or_insert_with(|| params.zeros_like());
        v.check_congruent(params)?;
        Ok((
            self.first_moment.as_mut().expect("just set"),
            self.second_moment.as_mut().expect("just set"),
        ))
    }

    /// One update; returns the new parameters and advances `step_count`.
    pub fn apply(&mut self, params: &ParamTree<T>, grad: &ParamTree<T>, lr: T) -> Result<ParamTree<T>> {
        params.check_congruent(grad)?;
        let h = self.hyper.clone();
        let t = self.step_count + 1;
        let wd = T::of(h.weight_decay);
        let mut out = params.clone();
        match self.kind {
            OptimizerKind::Sgd => {
                if h.momentum == 0.0 {
                    for (lp, lg) in out.layers_mut().iter_mut().zip(grad.layers()) {
                        for (p, &g) in lp.values.iter_mut().zip(&lg.values) {
                            let g = if h.weight_decay > 0.0 { g + wd * *p } else { g };
                            *p = *p - lr * g;
                        }
                    }
                } else {
                    let mu = T::of(h.momentum);
                    let (buf, _) = self.moments(params)?;
                    for ((lp, lg), lb) in out.layers_mut().iter_mut().zip(grad.layers()).zip(buf.layers_mut()) {
                        for ((p, &g), b) in lp.values.iter_mut().zip(&lg.values).zip(lb.values.iter_mut()) {
                            let g = if h.weight_decay > 0.0 { g + wd * *p } else { g };
                            *b = mu * *b + g;
                            *p = *p - lr * *b;
                        }
                    }
                }
            }
            OptimizerKind::Adam | OptimizerKind::Lamb => {
                let (b1, b2, eps) = (T::of(h.beta1), T::of(h.beta2), T::of(h.epsilon));
                let bc1 = T::one() - T::of(h.beta1.powf(t as f64));
                let bc2 = T::one() - T::of(h.beta2.powf(t as f64));
                let layerwise = self.kind == OptimizerKind::Lamb;
                let (m, v) = self.moments(params)?;
                for (((lp, lg), lm), lv) in out
                    .layers_mut()
                    .iter_mut()
                    .zip(grad.layers())
                    .zip(m.layers_mut())
                    .zip(v.layers_mut())
                {
                    let mut dir = Vec::with_capacity(lp.dim());
                    for (((p, &g), mi), vi) in lp.values.iter().zip(&lg.values).zip(lm.values.iter_mut()).zip(lv.values.iter_mut()) {
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let r = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                        dir.push(if h.weight_decay > 0.0 { r + wd * *p } else { r });
                    }
                    let scale = if layerwise {
                        lr * trust_ratio(norm(&lp.values), norm(&dir), h.trust_clip)
                    } else {
                        lr
                    };
                    for (p, d) in lp.values.iter_mut().zip(dir) {
                        *p = *p - scale * d;
                    }
                }
            }
            OptimizerKind::AdaGrad => {
                let eps = T::of(h.epsilon);
                let (_, acc) = self.moments(params)?;
                for ((lp, lg), la) in out.layers_mut().iter_mut().zip(grad.layers()).zip(acc.layers_mut()) {
                    for ((p, &g), a) in lp.values.iter_mut().zip(&lg.values).zip(la.values.iter_mut()) {
                        let g = if h.weight_decay > 0.0 { g + wd * *p } else { g };
                        *a = *a + g * g;
                        *p = *p - lr * g / (a.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Lars => {
                let mu = T::of(h.momentum);
                let (buf, _) = self.moments(params)?;
                for ((lp, lg), lb) in out.layers_mut().iter_mut().zip(grad.layers()).zip(buf.layers_mut()) {
                    let u: Vec<T> = lp
                        .values
                        .iter()
                        .zip(&lg.values)
                        .map(|(&p, &g)| if h.weight_decay > 0.0 { g + wd * p } else { g })
                        .collect();
                    let trust = trust_ratio(norm(&lp.values), norm(&u), h.trust_clip);
                    for ((p, ui), b) in lp.values.iter_mut().zip(u).zip(lb.values.iter_mut()) {
                        let step = if h.momentum > 0.0 {
                            *b = mu * *b + trust * ui;
                            *b
                        } else {
                            trust * ui
                        };
                        *p = *p - lr * step;
                    }
                }
            }
        }
        self.step_count = t;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree(layers: &[(&str, &[f64])]) -> ParamTree {
        ParamTree::new(layers.iter().map(|(n, v)| (*n, v.to_vec()))).unwrap()
    }

    #[test]
    fn exponential_decay_points() {
        let s = Schedule::exponential(0.006, 1000, 0.6, 500);
        assert_eq!(s.lr_at(0), 0.006);
        assert_eq!(s.lr_at(999), 0.006);
        assert!((s.lr_at(1500) - 0.0036).abs() < 1e-15);
        assert!((s.lr_at(2000) - 0.00216).abs() < 1e-15);
        // continuous exponent between transitions
        assert!((s.lr_at(1250) - 0.006 * 0.6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn step_decay_is_piecewise_constant() {
        let s = Schedule {
            kind: ScheduleKind::StepDecay,
            ..Schedule::exponential(1.0, 10, 0.5, 4)
        };
        assert_eq!(s.lr_at(9), 1.0);
        assert_eq!(s.lr_at(10), 1.0);
        assert_eq!(s.lr_at(13), 1.0);
        assert_eq!(s.lr_at(14), 0.5);
        assert_eq!(s.lr_at(22), 0.125);
        assert_eq!(Schedule::constant(0.3).lr_at(1_000_000), 0.3);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let p = tree(&[("a", &[1.0, -2.0]), ("b", &[0.0, 3.0])]);
        let g = p.zeros_like();
        for kind in [
            OptimizerKind::Sgd,
            OptimizerKind::Adam,
            OptimizerKind::AdaGrad,
            OptimizerKind::Lars,
            OptimizerKind::Lamb,
        ] {
            let mut opt = Optimizer::<f64>::new(kind, Hyper::default());
            assert_eq!(opt.apply(&p, &g, 0.1).unwrap(), p, "{kind:?}");
            assert_eq!(opt.step_count, 1);
        }
    }

    #[test]
    fn sgd_shrinks_by_lr_when_grad_is_params() {
        let p = tree(&[("a", &[1.0, -2.0]), ("b", &[4.0])]);
        let out = Optimizer::sgd(0.0).apply(&p, &p, 0.1).unwrap();
        for (o, x) in out.iter_values().zip(p.iter_values()) {
            assert!((o - 0.9 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let p = tree(&[("a", &[0.0])]);
        let g = tree(&[("a", &[1.0])]);
        let mut opt = Optimizer::sgd(0.5);
        let p1 = opt.apply(&p, &g, 1.0).unwrap();
        let p2 = opt.apply(&p1, &g, 1.0).unwrap();
        assert_eq!(p1.get("a").unwrap()[0], -1.0);
        assert_eq!(p2.get("a").unwrap()[0], -2.5);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let p = tree(&[("w", &[0.5])]);
        let g = tree(&[("w", &[2.0])]);
        let mut opt = Optimizer::new(
            OptimizerKind::Adam,
            Hyper {
                epsilon: 1e-8,
                ..Hyper::default()
            },
        );
        let out = opt.apply(&p, &g, 0.01).unwrap();
        let delta = out.get("w").unwrap()[0] - 0.5;
        // m̂ = 2, v̂ = 4: update = -0.01 * 2 / (2 + 1e-8)
        assert!((delta + 0.01 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
        assert!((delta + 0.01).abs() < 1e-10);
    }

    #[test]
    fn adagrad_accumulates_squares() {
        let p = tree(&[("w", &[0.0])]);
        let g = tree(&[("w", &[3.0])]);
        let mut opt = Optimizer::new(OptimizerKind::AdaGrad, Hyper { epsilon: 0.0, ..Hyper::default() });
        let p1 = opt.apply(&p, &g, 1.0).unwrap();
        assert_eq!(p1.get("w").unwrap()[0], -1.0);
        let g2 = tree(&[("w", &[4.0])]);
        let p2 = opt.apply(&p1, &g2, 1.0).unwrap();
        // acc = 9 + 16 = 25
        assert!((p2.get("w").unwrap()[0] - (-1.0 - 4.0 / 5.0)).abs() < 1e-15);
    }

    #[test]
    fn lamb_first_step_update_norm_is_lr_times_param_norm() {
        let p = tree(&[("a", &[1.0, 2.0, 2.0]), ("b", &[0.3, -0.4])]);
        let g = tree(&[("a", &[0.1, -5.0, 0.0001]), ("b", &[7.0, 1e-3])]);
        let lr = 0.05;
        let out = Optimizer::new(OptimizerKind::Lamb, Hyper::default()).apply(&p, &g, lr).unwrap();
        let d = out.sub(&p).unwrap();
        for ((_, dn), (_, pn)) in d.layer_norms().into_iter().zip(p.layer_norms()) {
            assert!((dn - lr * pn).abs() < 1e-12 * pn, "{dn} vs {}", lr * pn);
        }
    }

    #[test]
    fn lars_update_norm_and_zero_norm_guard() {
        let p = tree(&[("a", &[3.0, 4.0]), ("bias", &[0.0, 0.0])]);
        let g = tree(&[("a", &[0.01, 0.0]), ("bias", &[0.5, 0.5])]);
        let out = Optimizer::new(OptimizerKind::Lars, Hyper::default()).apply(&p, &g, 0.1).unwrap();
        let d = out.sub(&p).unwrap();
        let norms = d.layer_norms();
        assert!((norms[0].1 - 0.5).abs() < 1e-12);
        // zero parameter norm: trust ratio 1, plain SGD step
        assert_eq!(d.get("bias").unwrap(), &[-0.05, -0.05]);
    }

    #[test]
    fn trust_clip_caps_ratio() {
        let p = tree(&[("a", &[100.0])]);
        let g = tree(&[("a", &[1.0])]);
        let h = Hyper { trust_clip: Some(2.0), ..Hyper::default() };
        let out = Optimizer::new(OptimizerKind::Lars, h).apply(&p, &g, 0.1).unwrap();
        assert!((out.get("a").unwrap()[0] - (100.0 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn incongruent_grad_rejected() {
        let p = tree(&[("a", &[1.0])]);
        let g = tree(&[("b", &[1.0])]);
        assert!(Optimizer::sgd(0.0).apply(&p, &g, 0.1).is_err());
    }

    #[test]
    fn apply_is_deterministic() {
        let p = tree(&[("a", &[0.3, -0.7]), ("b", &[1.1])]);
        let g = tree(&[("a", &[0.2, 0.9]), ("b", &[-0.4])]);
        let run = || {
            let mut o = Optimizer::new(OptimizerKind::Lamb, Hyper::default());
            let mut x = p.clone();
            for _ in 0..5 {
                x = o.apply(&x, &g, 0.01).unwrap();
            }
            (x, o)
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn lamb_direction_invariant_to_layer_gradient_scale(
            ga in prop::collection::vec(-10.0f64..10.0, 3),
            gb in prop::collection::vec(-10.0f64..10.0, 2),
            c in 0.01f64..100.0,
        ) {
            let p = tree(&[("a", &[0.5, -1.0, 2.0]), ("b", &[1.5, 0.25])]);
            let g1 = tree(&[("a", &ga), ("b", &gb)]);
            let scaled: Vec<f64> = ga.iter().map(|v| v * c).collect();
            let g2 = tree(&[("a", &scaled), ("b", &gb)]);
            let h = Hyper { epsilon: 0.0, ..Hyper::default() };
            let u1 = Optimizer::new(OptimizerKind::Lamb, h.clone()).apply(&p, &g1, 0.1).unwrap().sub(&p).unwrap();
            let u2 = Optimizer::new(OptimizerKind::Lamb, h).apply(&p, &g2, 0.1).unwrap().sub(&p).unwrap();
            for (x, y) in u1.iter_values().zip(u2.iter_values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn adam_step_bounded(grads in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let (b1, b2, lr) = (0.9f64, 0.999f64, 0.01);
            let mut opt = Optimizer::new(OptimizerKind::Adam, Hyper::default());
            let mut p = tree(&[("w", &[0.0])]);
            for (i, g) in grads.iter().enumerate() {
                let t = (i + 1) as i32;
                let next = opt.apply(&p, &tree(&[("w", &[*g])]), lr).unwrap();
                let step = (next.get("w").unwrap()[0] - p.get("w").unwrap()[0]).abs();
                // Cauchy–Schwarz bound on |m̂|/sqrt(v̂) after t steps
                let geo: f64 = (0..t).map(|k| (b1 * b1 / b2).powi(k)).sum();
                let bound = lr * (1.0 - b1) / (1.0 - b2).sqrt() * geo.sqrt()
                    * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
                prop_assert!(step <= bound * (1.0 + 1e-12), "t={t} step={step} bound={bound}");
                p = next;
            }
        }
    }
}

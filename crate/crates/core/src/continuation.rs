//! Continuation models: maps from per-step cost signals to `alpha in [0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

/// `exp(-lambda * sum_i c_i)`.
pub fn alpha_exponential(cost_vec: &[f64], lambda: f64) -> Result<f64> {
    check_costs(cost_vec)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return usage(format!("lambda must be finite and nonnegative, got {lambda}"));
    }
    let total: f64 = cost_vec.iter().sum();
    Ok((-lambda * total).exp())
}

/// Normalized saturating continuation `1 - p_max * clip(v / max(c_max, eps), 0, 1)`.
pub fn alpha_cat(violation: f64, p_max: f64, c_max: f64, eps: f64) -> f64 {
    let scale = c_max.max(eps);
    let ratio = (violation / scale).clamp(0.0, 1.0);
    1.0 - p_max * ratio
}

/// Elementwise minimum of per-constraint continuation probabilities.
pub fn aggregate_min(alphas: &[f64]) -> Result<f64> {
    if alphas.is_empty() {
        return usage("aggregate_min needs at least one alpha");
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return usage(format!("alpha {a} outside [0, 1]"));
    }
    Ok(alphas.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// `[c - b]_+`.
pub fn violation(cost: f64, limit_b: f64) -> f64 {
    (cost - limit_b).max(0.0)
}

/// EMA of the batch maximum violation:
/// `c_max <- rho * c_max + (1 - rho) * max_{c in batch} [c - b]_+`.
/// An empty batch leaves the scale unchanged.
pub fn ema_update(c_max: f64, batch_costs: &[f64], limit_b: f64, rho: f64) -> f64 {
    if batch_costs.is_empty() {
        log::warn!("ema_update called with an empty batch; c_max left at {c_max}");
        return c_max;
    }
    let peak = batch_costs
        .iter()
        .map(|&c| violation(c, limit_b))
        .fold(0.0, f64::max);
    (rho * c_max + (1.0 - rho) * peak).max(0.0)
}

/// Per-sample variant: one EMA step per batch element, in order.
pub fn ema_update_per_sample(c_max: f64, batch_costs: &[f64], limit_b: f64, rho: f64) -> f64 {
    if batch_costs.is_empty() {
        log::warn!("ema_update_per_sample called with an empty batch; c_max left at {c_max}");
        return c_max;
    }
    batch_costs
        .iter()
        .fold(c_max, |acc, &c| rho * acc + (1.0 - rho) * violation(c, limit_b))
        .max(0.0)
}

/// Additive hazard `-ln(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hazard {
    Finite(f64),
    /// `alpha == 0`: the step is certainly fatal.
    Infinite,
}

impl Hazard {
    pub fn value(self) -> f64 {
        match self {
            Hazard::Finite(h) => h,
            Hazard::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Hazard::Infinite)
    }
}

pub fn hazard(alpha: f64) -> Result<Hazard> {
    if !(0.0..=1.0).contains(&alpha) {
        return usage(format!("alpha {alpha} outside [0, 1]"));
    }
    if alpha == 0.0 {
        return Ok(Hazard::Infinite);
    }
    // -ln(1) is -0.0; report +0.0.
    Ok(Hazard::Finite((-alpha.ln()).max(0.0)))
}

/// How per-channel costs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Combine the channel costs by summation, then map once.
    Sum,
    /// Map each channel separately and take the minimum alpha.
    Min,
}

/// Which EMA form the violation scaler uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    #[default]
    BatchMax,
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContinuationModel {
    Exponential {
        lambda: f64,
        #[serde(default = "sum_aggregation")]
        aggregation: Aggregation,
    },
    CatNormalized {
        p_max: f64,
        c_max: f64,
        eps: f64,
        #[serde(default)]
        limit_b: f64,
        rho: f64,
        #[serde(default = "min_aggregation")]
        aggregation: Aggregation,
        #[serde(default)]
        ema_mode: EmaMode,
    },
    /// `alpha = 1` iff every channel is `<= 0`, else 0.
    HardIndicator,
    Constant {
        alpha: f64,
    },
}

fn sum_aggregation() -> Aggregation {
    Aggregation::Sum
}

fn min_aggregation() -> Aggregation {
    Aggregation::Min
}

fn check_costs(cost_vec: &[f64]) -> Result<()> {
    match cost_vec.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
        Some(c) => usage(format!("costs must be finite and nonnegative, got {c}")),
        None => Ok(()),
    }
}

impl ContinuationModel {
    pub fn exponential(lambda: f64) -> Self {
        ContinuationModel::Exponential {
            lambda,
            aggregation: Aggregation::Sum,
        }
    }

    /// CaT model with `eps = 1e-8`, no cost limit and `rho = 0.99`.
    pub fn cat(p_max: f64, c_max: f64) -> Self {
        ContinuationModel::CatNormalized {
            p_max,
            c_max,
            eps: 1e-8,
            limit_b: 0.0,
            rho: 0.99,
            aggregation: Aggregation::Min,
            ema_mode: EmaMode::BatchMax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ContinuationModel::Exponential { lambda, .. } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return usage("exponential lambda must be finite and nonnegative");
                }
            }
            ContinuationModel::CatNormalized { p_max, c_max, eps, limit_b, rho, .. } => {
                if !(p_max > 0.0 && p_max <= 1.0) {
                    return usage("p_max must lie in (0, 1]");
                }
                if !(eps > 0.0) || !(c_max >= 0.0) || !(limit_b >= 0.0) {
                    return usage("CaT requires eps > 0, c_max >= 0 and limit_b >= 0");
                }
                if !(0.0..=1.0).contains(&rho) {
                    return usage("rho must lie in [0, 1]");
                }
            }
            ContinuationModel::HardIndicator => {}
            ContinuationModel::Constant { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return usage("constant alpha must lie in [0, 1]");
                }
            }
        }
        Ok(())
    }

    /// Continuation probability for one step's per-channel costs.
    pub fn alpha(&self, cost_vec: &[f64]) -> Result<f64> {
        check_costs(cost_vec)?;
        match *self {
            ContinuationModel::Exponential { lambda, aggregation } => match aggregation {
                Aggregation::Sum => alpha_exponential(cost_vec, lambda),
                Aggregation::Min => {
                    let worst = cost_vec.iter().cloned().fold(0.0, f64::max);
                    alpha_exponential(&[worst], lambda)
                }
            },
            ContinuationModel::CatNormalized { p_max, c_max, eps, limit_b, aggregation, .. } => {
                Ok(match aggregation {
                    Aggregation::Sum => {
                        let v: f64 = cost_vec.iter().map(|&c| violation(c, limit_b)).sum();
                        alpha_cat(v, p_max, c_max, eps)
                    }
                    Aggregation::Min => cost_vec
                        .iter()
                        .map(|&c| alpha_cat(violation(c, limit_b), p_max, c_max, eps))
                        .fold(1.0, f64::min),
                })
            }
            ContinuationModel::HardIndicator => {
                Ok(if cost_vec.iter().all(|&c| c <= 0.0) { 1.0 } else { 0.0 })
            }
            ContinuationModel::Constant { alpha } => Ok(alpha),
        }
    }

    pub fn set_lambda(&mut self, value: f64) {
        if let ContinuationModel::Exponential { lambda, .. } = self {
            *lambda = value;
        }
    }

    pub fn set_p_max(&mut self, value: f64) {
        if let ContinuationModel::CatNormalized { p_max, .. } = self {
            *p_max = value;
        }
    }

    /// Current violation scale, if the model carries one.
    pub fn c_max(&self) -> Option<f64> {
        match self {
            ContinuationModel::CatNormalized { c_max, .. } => Some(*c_max),
            _ => None,
        }
    }

    /// Update the CaT scale from a batch of raw costs. No-op for other models.
    pub fn update_scale(&mut self, batch_costs: &[f64]) {
        if let ContinuationModel::CatNormalized { c_max, limit_b, rho, ema_mode, .. } = self {
            *c_max = match ema_mode {
                EmaMode::BatchMax => ema_update(*c_max, batch_costs, *limit_b, *rho),
                EmaMode::PerSample => ema_update_per_sample(*c_max, batch_costs, *limit_b, *rho),
            };
        }
    }
}

/// Piecewise-affine schedule over environment steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        value: f64,
    },
    Linear {
        start_value: f64,
        end_value: f64,
        start_step: u64,
        end_step: u64,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if let Schedule::Linear { start_step, end_step, .. } = self {
            if end_step < start_step {
                return usage("schedule end_step precedes start_step");
            }
        }
        Ok(())
    }

    pub fn value(&self, t: u64) -> f64 {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::Linear { start_value, end_value, start_step, end_step } => {
                if t <= start_step {
                    start_value
                } else if t >= end_step {
                    end_value
                } else {
                    let frac = (t - start_step) as f64 / (end_step - start_step) as f64;
                    start_value + frac * (end_value - start_value)
                }
            }
        }
    }
}

/// Free-function form of [`Schedule::value`].
pub fn schedule_value(schedule: &Schedule, t: u64) -> f64 {
    schedule.value(t)
}

/// Parameter a schedule drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleTarget {
    Lambda,
    PMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledParam {
    pub target: ScheduleTarget,
    pub schedule: Schedule,
}

impl ScheduledParam {
    pub fn apply(&self, model: &mut ContinuationModel, t: u64) {
        let v = self.schedule.value(t);
        match self.target {
            ScheduleTarget::Lambda => model.set_lambda(v),
            ScheduleTarget::PMax => model.set_p_max(v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exponential_examples() {
        assert_eq!(alpha_exponential(&[0.0, 0.0], 3.0).unwrap(), 1.0);
        assert_eq!(alpha_exponential(&[0.5, 0.5], 0.0).unwrap(), 1.0);
        assert!((alpha_exponential(&[0.6931], 1.0).unwrap() - 0.5).abs() < 1e-4);
        assert!((alpha_exponential(&[std::f64::consts::LN_2], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(alpha_exponential(&[-0.1], 1.0).is_err());
    }

    #[test]
    fn cat_examples() {
        assert_eq!(alpha_cat(0.0, 0.75, 2.0, 1e-8), 1.0);
        assert_eq!(alpha_cat(4.0, 0.75, 2.0, 1e-8), 0.25);
        assert_eq!(alpha_cat(1.0, 0.75, 2.0, 1e-8), 0.625);
        // c_max below eps falls back to eps
        assert_eq!(alpha_cat(1e-9, 1.0, 0.0, 1e-8), 0.9);
    }

    #[test]
    fn aggregate_min_examples() {
        assert_eq!(aggregate_min(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(aggregate_min(&[0.3]).unwrap(), 0.3);
        assert_eq!(aggregate_min(&[0.9, 0.4, 0.7]).unwrap(), 0.4);
        assert!(aggregate_min(&[]).is_err());
        assert!(aggregate_min(&[1.2]).is_err());
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_update(1.3, &[5.0], 0.0, 1.0), 1.3);
        assert!((ema_update(1.0, &[0.2, 0.4], 0.5, 0.9) - 0.9).abs() < 1e-15);
        assert!((ema_update(1.0, &[0.5, 3.0], 0.0, 0.9) - 1.2).abs() < 1e-15);
        assert_eq!(ema_update(1.0, &[], 0.0, 0.5), 1.0);
        // per-sample form folds each element
        let per = ema_update_per_sample(1.0, &[0.5, 3.0], 0.0, 0.9);
        assert!((per - (0.9 * (0.9 + 0.05) + 0.1 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn hazard_examples() {
        assert_eq!(hazard(1.0).unwrap(), Hazard::Finite(0.0));
        assert!((hazard((-1.0f64).exp()).unwrap().value() - 1.0).abs() < 1e-15);
        assert!((hazard(0.5).unwrap().value() - 0.6931).abs() < 1e-4);
        let h = hazard(0.0).unwrap();
        assert!(h.is_infinite() && h.value().is_infinite());
        assert!(hazard(1.5).is_err());
    }

    #[test]
    fn linear_lambda_schedule() {
        let s = Schedule::Linear {
            start_value: 0.0,
            end_value: 0.9,
            start_step: 50_000,
            end_step: 500_000,
        };
        assert_eq!(s.value(0), 0.0);
        assert_eq!(s.value(50_000), 0.0);
        assert_eq!(s.value(500_000), 0.9);
        assert_eq!(s.value(2_000_000), 0.9);
        assert!((s.value(275_000) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn p_max_ramp_matches_min_form() {
        // p_max(t) = p_end * min(t / t_end, 1)
        let s = Schedule::Linear {
            start_value: 0.0,
            end_value: 0.8,
            start_step: 0,
            end_step: 1000,
        };
        for t in [0u64, 1, 250, 999, 1000, 5000] {
            let expected = 0.8 * (t as f64 / 1000.0).min(1.0);
            assert!((s.value(t) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn scheduled_param_drives_model() {
        let mut m = ContinuationModel::exponential(0.0);
        let p = ScheduledParam {
            target: ScheduleTarget::Lambda,
            schedule: Schedule::Constant { value: 0.7 },
        };
        p.apply(&mut m, 10);
        assert_eq!(m, ContinuationModel::exponential(0.7));
    }

    #[test]
    fn cat_scale_update_through_model() {
        let mut m = ContinuationModel::CatNormalized {
            p_max: 0.5,
            c_max: 1.0,
            eps: 1e-8,
            limit_b: 0.0,
            rho: 0.9,
            aggregation: Aggregation::Min,
            ema_mode: EmaMode::BatchMax,
        };
        m.update_scale(&[0.5, 3.0]);
        assert!((m.c_max().unwrap() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn exponential_min_aggregation_uses_worst_channel() {
        let m = ContinuationModel::Exponential {
            lambda: 1.0,
            aggregation: Aggregation::Min,
        };
        assert!((m.alpha(&[0.2, 0.7]).unwrap() - (-0.7f64).exp()).abs() < 1e-15);
    }

    fn models() -> Vec<ContinuationModel> {
        vec![
            ContinuationModel::exponential(0.8),
            ContinuationModel::Exponential { lambda: 1.3, aggregation: Aggregation::Min },
            ContinuationModel::cat(0.75, 2.0),
            ContinuationModel::CatNormalized {
                p_max: 0.6,
                c_max: 1.0,
                eps: 1e-6,
                limit_b: 0.3,
                rho: 0.9,
                aggregation: Aggregation::Sum,
                ema_mode: EmaMode::BatchMax,
            },
            ContinuationModel::HardIndicator,
            ContinuationModel::Constant { alpha: 0.4 },
        ]
    }

    proptest! {
        #[test]
        fn alpha_is_monotone_in_every_channel(
            costs in prop::collection::vec(0.0f64..5.0, 1..4),
            idx in 0usize..4,
            bump in 0.0f64..3.0,
        ) {
            let i = idx % costs.len();
            let mut worse = costs.clone();
            worse[i] += bump;
            for m in models() {
                let a = m.alpha(&costs).unwrap();
                let b = m.alpha(&worse).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!(b <= a + 1e-15, "{m:?}: {b} > {a}");
            }
        }

        #[test]
        fn exponent_additivity(costs in prop::collection::vec(0.0f64..3.0, 1..4), l1 in 0.0f64..2.0, l2 in 0.0f64..2.0) {
            let joint = alpha_exponential(&costs, l1 + l2).unwrap();
            let split = alpha_exponential(&costs, l1).unwrap() * alpha_exponential(&costs, l2).unwrap();
            prop_assert!((joint - split).abs() <= 1e-12 * joint.max(1e-300).max(1.0));
        }

        #[test]
        fn hazard_of_exponential_is_scaled_cost(costs in prop::collection::vec(0.0f64..3.0, 1..4), lambda in 0.0f64..3.0) {
            let h = hazard(alpha_exponential(&costs, lambda).unwrap()).unwrap().value();
            let total: f64 = costs.iter().sum();
            prop_assert!((h - lambda * total).abs() <= 1e-12 * (1.0 + lambda * total));
        }

        #[test]
        fn hard_indicator_is_binary(costs in prop::collection::vec(prop_oneof![Just(0.0f64), 0.0f64..2.0], 1..4)) {
            let a = ContinuationModel::HardIndicator.alpha(&costs).unwrap();
            let feasible = costs.iter().all(|&c| c <= 0.0);
            prop_assert_eq!(a, if feasible { 1.0 } else { 0.0 });
        }

        #[test]
        fn cat_never_drops_below_one_minus_p_max(v in 0.0f64..100.0, p_max in 0.01f64..1.0, c_max in 0.0f64..5.0) {
            let a = alpha_cat(v, p_max, c_max, 1e-8);
            prop_assert!(a >= 1.0 - p_max - 1e-15 && a <= 1.0);
        }
    }
}

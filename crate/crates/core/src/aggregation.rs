//! Combining the outcome reward with the intermediate rewards.
//!
//! All three policies add `r_format` outside the gate:
//!
//! * weighted sum: `alpha_w * r_answer + beta * intermediate + r_format`
//! * residual: `r_answer + beta * intermediate * (1 - r_answer) + r_format`
//! * adaptive residual: the residual form with `beta_t` in place of `beta`
//!
//! `beta_t` comes from an exponential moving average of the batch failure
//! rate `1 - mean(r_answer)`, mapped affinely onto `[beta_min, beta_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::RewardBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    WeightedSum,
    Residual,
    AdaptiveResidual,
}

impl AggregationKind {
    pub const ALL: [AggregationKind; 3] =
        [AggregationKind::WeightedSum, AggregationKind::Residual, AggregationKind::AdaptiveResidual];

    pub fn name(self) -> &'static str {
        match self {
            AggregationKind::WeightedSum => "weighted_sum",
            AggregationKind::Residual => "residual",
            AggregationKind::AdaptiveResidual => "adaptive_residual",
        }
    }
}

impl std::str::FromStr for AggregationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveBetaState {
    /// EMA of the batch failure rate.
    pub ema: f64,
    pub gamma: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub step: u64,
}

impl AdaptiveBetaState {
    pub fn beta_t(&self) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * self.ema
    }

    /// Folds one batch into the EMA. The input must lie in `[0, 1]`.
    pub fn advance(&self, batch_mean_answer_reward: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&batch_mean_answer_reward) {
            return Err(Error::Contract(format!("batch mean answer reward {batch_mean_answer_reward} outside [0, 1]")));
        }
        let failure = 1.0 - batch_mean_answer_reward;
        Ok(Self { ema: self.gamma * self.ema + (1.0 - self.gamma) * failure, step: self.step + 1, ..*self })
    }
}

pub fn advance_beta(state: &AdaptiveBetaState, batch_mean_answer_reward: f64) -> Result<AdaptiveBetaState> {
    state.advance(batch_mean_answer_reward)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    pub kind: AggregationKind,
    pub alpha_w: f64,
    pub beta: f64,
    pub adaptive: AdaptiveBetaState,
}

impl AggregationPolicy {
    pub fn with_kind(self, kind: AggregationKind) -> Self {
        Self { kind, ..self }
    }

    /// The weight actually applied to the intermediate term.
    pub fn effective_beta(&self) -> f64 {
        match self.kind {
            AggregationKind::WeightedSum | AggregationKind::Residual => self.beta,
            AggregationKind::AdaptiveResidual => self.adaptive.beta_t(),
        }
    }
}

/// `[aggregation]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub policy: AggregationKind,
    pub alpha_w: f64,
    /// Fixed weight, and the starting `beta_t` of the adaptive policy.
    pub beta: f64,
    pub gamma: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            policy: AggregationKind::AdaptiveResidual,
            alpha_w: 0.5,
            beta: 0.5,
            gamma: 0.9,
            beta_min: 0.0,
            beta_max: 1.0,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("aggregation.{name} must be in [0, 1], got {v}")))
            }
        };
        unit("alpha_w", self.alpha_w)?;
        unit("beta", self.beta)?;
        unit("gamma", self.gamma)?;
        unit("beta_min", self.beta_min)?;
        unit("beta_max", self.beta_max)?;
        if self.beta_min > self.beta_max {
            return Err(Error::Config("aggregation.beta_min must not exceed beta_max".into()));
        }
        Ok(())
    }

    /// Initial schedule state: the EMA starts where `beta_t == beta`
    /// (clamped into the schedule's range).
    pub fn initial_state(&self) -> AdaptiveBetaState {
        let span = self.beta_max - self.beta_min;
        let ema = if span > 0.0 { ((self.beta - self.beta_min) / span).clamp(0.0, 1.0) } else { 0.0 };
        AdaptiveBetaState { ema, gamma: self.gamma, beta_min: self.beta_min, beta_max: self.beta_max, step: 0 }
    }

    pub fn policy(&self) -> AggregationPolicy {
        AggregationPolicy { kind: self.policy, alpha_w: self.alpha_w, beta: self.beta, adaptive: self.initial_state() }
    }
}

/// `0.5 * (avg_answerability + avg_decomposition)`.
pub fn intermediate_scalar(b: &RewardBreakdown) -> f64 {
    b.intermediate()
}

pub fn aggregate_parts(policy: &AggregationPolicy, r_answer: f64, intermediate: f64, r_format: f64) -> f64 {
    match policy.kind {
        AggregationKind::WeightedSum => policy.alpha_w * r_answer + policy.beta * intermediate + r_format,
        AggregationKind::Residual | AggregationKind::AdaptiveResidual => {
            r_answer + policy.effective_beta() * intermediate * (1.0 - r_answer) + r_format
        }
    }
}

/// Aggregated scalar reward. The adaptive state is read, never advanced.
pub fn aggregate(policy: &AggregationPolicy, b: &RewardBreakdown) -> f64 {
    aggregate_parts(policy, b.r_answer, b.intermediate(), b.r_format)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(kind: AggregationKind) -> AggregationPolicy {
        AggregationConfig { policy: kind, ..AggregationConfig::default() }.policy()
    }

    #[test]
    fn intermediate_examples() {
        let p = policy(AggregationKind::Residual);
        // intermediate = 0.5 * (0.6 + 0.4)
        assert!((aggregate_parts(&p, 0.0, 0.5 * (0.6 + 0.4), 0.2) - 0.45).abs() < 1e-12);
    }

    #[test]
    fn residual_annihilates_for_correct_answers() {
        let p = policy(AggregationKind::Residual);
        assert_eq!(aggregate_parts(&p, 1.0, 0.7, 0.2), 1.2);
    }

    #[test]
    fn weighted_sum_example() {
        let p = policy(AggregationKind::WeightedSum);
        assert!((aggregate_parts(&p, 1.0, 0.5, 0.0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn initial_beta_matches_fixed_beta() {
        let p = policy(AggregationKind::AdaptiveResidual);
        assert_eq!(p.adaptive.ema, 0.5);
        assert_eq!(p.effective_beta(), 0.5);
    }

    #[test]
    fn one_step_all_correct() {
        let s = AggregationConfig::default().initial_state();
        let next = advance_beta(&s, 1.0).unwrap();
        assert!((next.ema - 0.45).abs() < 1e-12);
        assert!((next.beta_t() - 0.45).abs() < 1e-12);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn out_of_range_batch_mean() {
        let s = AggregationConfig::default().initial_state();
        assert!(matches!(s.advance(1.5), Err(Error::Contract(_))));
        assert!(matches!(s.advance(-0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn policy_names_round_trip() {
        for k in AggregationKind::ALL {
            assert_eq!(k.name().parse::<AggregationKind>().unwrap(), k);
        }
        assert!("greedy".parse::<AggregationKind>().is_err());
    }

    #[test]
    fn invalid_config() {
        let c = AggregationConfig { beta_min: 0.8, beta_max: 0.2, ..AggregationConfig::default() };
        assert!(c.validate().is_err());
        let c = AggregationConfig { alpha_w: 1.5, ..AggregationConfig::default() };
        assert!(c.validate().is_err());
    }
}

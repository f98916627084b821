//! Group-relative advantages over the rollouts of one question.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::RewardBreakdown;

pub const DEFAULT_GROUP_SIZE: usize = 5;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// `[grpo]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub epsilon: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { group_size: DEFAULT_GROUP_SIZE, epsilon: DEFAULT_EPSILON }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("grpo.group_size must be at least 2, got {}", self.group_size)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("grpo.epsilon must be finite and non-negative, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub raw: String,
    pub breakdown: RewardBreakdown,
    pub aggregated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question: String,
    pub golden: Vec<String>,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }
}

/// `(r_i - mean) / (population std + epsilon)` for each reward.
pub fn group_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::contract(format!("a group needs at least 2 rewards, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + epsilon;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

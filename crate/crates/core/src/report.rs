//! Versioned batch report and the aggregation-policy comparison.

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_parts, AdaptiveBetaState, AggregationKind, AggregationPolicy};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{BatchOutcome, PolicyKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub question: String,
    pub rollout: usize,
    pub r_answer: f64,
    pub avg_answerability: f64,
    pub avg_decomposition: f64,
    pub r_format: f64,
    pub aggregated: f64,
    pub advantage: f64,
}

impl EpisodeRecord {
    pub fn intermediate(&self) -> f64 {
        0.5 * (self.avg_answerability + self.avg_decomposition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchRecord {
    pub policy: PolicyKind,
    pub aggregation: AggregationKind,
    pub group_size: usize,
    pub questions: usize,
    pub mean_r_answer: f64,
    pub mean_aggregated: f64,
    /// `beta_t` used to aggregate this batch.
    pub beta_t: f64,
    /// EMA after this batch.
    pub ema: f64,
    /// `beta_t` the next batch will use.
    pub beta_t_next: f64,
    pub step: u64,
    pub provider: String,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub batch: BatchRecord,
    pub episodes: Vec<EpisodeRecord>,
}

impl Report {
    pub fn from_outcome(
        outcome: &BatchOutcome,
        policy: PolicyKind,
        aggregation: &AggregationPolicy,
        cfg: &RunConfig,
        provider: &str,
    ) -> Self {
        let mut episodes = Vec::with_capacity(outcome.episodes.len());
        for group in &outcome.groups {
            for (i, (rollout, advantage)) in group.rollouts.iter().zip(&group.advantages).enumerate() {
                let b = &rollout.breakdown;
                episodes.push(EpisodeRecord {
                    question: group.question.clone(),
                    rollout: i,
                    r_answer: b.r_answer,
                    avg_answerability: b.avg_answerability,
                    avg_decomposition: b.avg_decomposition,
                    r_format: b.r_format,
                    aggregated: rollout.aggregated,
                    advantage: *advantage,
                });
            }
        }
        let mean_aggregated = if episodes.is_empty() {
            0.0
        } else {
            episodes.iter().map(|e| e.aggregated).sum::<f64>() / episodes.len() as f64
        };
        Report {
            schema_version: SCHEMA_VERSION,
            batch: BatchRecord {
                policy,
                aggregation: aggregation.kind,
                group_size: outcome.groups.first().map(|g| g.rollouts.len()).unwrap_or(cfg.grpo.group_size),
                questions: outcome.groups.len(),
                mean_r_answer: outcome.mean_r_answer,
                mean_aggregated,
                beta_t: aggregation.effective_beta(),
                ema: outcome.next_beta_state.ema,
                beta_t_next: outcome.next_beta_state.beta_t(),
                step: outcome.next_beta_state.step,
                provider: provider.to_owned(),
                config_fingerprint: cfg.fingerprint(),
            },
            episodes,
        }
    }

    /// Parses a report, rejecting unknown fields and other schema versions.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: Report = serde_json::from_str(text).map_err(|e| Error::Contract(format!("invalid report: {e}")))?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Contract(format!(
                "report schema version {} is not supported (expected {SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One column of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyColumn {
    pub name: String,
    pub mean_reward: f64,
    /// Correct traces whose reward is below `1 + r_format`.
    pub punished_correct: usize,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub traces: usize,
    pub correct: usize,
    pub columns: Vec<PolicyColumn>,
}

fn column(name: &str, rewards: Vec<f64>, records: &[&EpisodeRecord]) -> PolicyColumn {
    let punished_correct =
        records.iter().zip(&rewards).filter(|(e, r)| e.r_answer == 1.0 && **r < 1.0 + e.r_format).count();
    let mean_reward = if rewards.is_empty() { 0.0 } else { rewards.iter().sum::<f64>() / rewards.len() as f64 };
    PolicyColumn { name: name.to_owned(), mean_reward, punished_correct, rewards }
}

/// Re-aggregates stored breakdowns under each policy with identical inputs.
///
/// The adaptive column uses the frozen state in `policy`. When
/// `replay_adaptive` is set, an extra column advances the state once per
/// report, in order, the way consecutive batches would.
pub fn compare_aggregation(
    reports: &[Report],
    policy: &AggregationPolicy,
    replay_adaptive: bool,
) -> Result<Comparison> {
    let records: Vec<&EpisodeRecord> = reports.iter().flat_map(|r| &r.episodes).collect();
    let reaggregate = |kind: AggregationKind| -> Vec<f64> {
        let p = policy.with_kind(kind);
        records.iter().map(|e| aggregate_parts(&p, e.r_answer, e.intermediate(), e.r_format)).collect()
    };
    let mut columns: Vec<PolicyColumn> =
        AggregationKind::ALL.iter().map(|&k| column(k.name(), reaggregate(k), &records)).collect();

    if replay_adaptive {
        let mut state: AdaptiveBetaState = policy.adaptive;
        let mut rewards = Vec::with_capacity(records.len());
        for report in reports {
            let p = AggregationPolicy { adaptive: state, ..policy.with_kind(AggregationKind::AdaptiveResidual) };
            rewards
                .extend(report.episodes.iter().map(|e| aggregate_parts(&p, e.r_answer, e.intermediate(), e.r_format)));
            if !report.episodes.is_empty() {
                let mean = report.episodes.iter().map(|e| e.r_answer).sum::<f64>() / report.episodes.len() as f64;
                state = state.advance(mean)?;
            }
        }
        columns.push(column("adaptive_residual_replayed", rewards, &records));
    }

    Ok(Comparison { traces: records.len(), correct: records.iter().filter(|e| e.r_answer == 1.0).count(), columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregationConfig;

    fn record(r_answer: f64, ans: f64, dec: f64, r_format: f64) -> EpisodeRecord {
        EpisodeRecord {
            question: "q".into(),
            rollout: 0,
            r_answer,
            avg_answerability: ans,
            avg_decomposition: dec,
            r_format,
            aggregated: 0.0,
            advantage: 0.0,
        }
    }

    fn report(episodes: Vec<EpisodeRecord>) -> Report {
        Report {
            schema_version: SCHEMA_VERSION,
            batch: BatchRecord {
                policy: PolicyKind::TemplateDecompose,
                aggregation: AggregationKind::Residual,
                group_size: 5,
                questions: 1,
                mean_r_answer: 0.0,
                mean_aggregated: 0.0,
                beta_t: 0.5,
                ema: 0.5,
                beta_t_next: 0.5,
                step: 1,
                provider: "p".into(),
                config_fingerprint: "f".into(),
            },
            episodes,
        }
    }

    #[test]
    fn weighted_sum_punishes_correct_answers() {
        let policy = AggregationConfig::default().policy();
        let r = report(vec![record(1.0, 0.5, 0.5, 0.0), record(0.0, 0.6, 0.4, 0.2)]);
        let c = compare_aggregation(&[r], &policy, false).unwrap();
        let ws = &c.columns[0];
        let res = &c.columns[1];
        let ada = &c.columns[2];
        assert_eq!(ws.rewards[0], 0.75);
        assert_eq!(res.rewards[0], 1.0);
        assert_eq!(ws.punished_correct, 1);
        assert_eq!(res.punished_correct, 0);
        assert_eq!(ada.rewards, res.rewards);
        assert_eq!(c.correct, 1);
    }

    #[test]
    fn replayed_column_advances() {
        let policy = AggregationConfig::default().policy();
        let a = report(vec![record(1.0, 0.5, 0.5, 0.0)]);
        let b = report(vec![record(0.0, 0.5, 0.5, 0.0)]);
        let c = compare_aggregation(&[a, b], &policy, true).unwrap();
        let replayed = &c.columns[3];
        // second batch sees beta_t = 0.45 after one all-correct batch
        assert!((replayed.rewards[1] - 0.45 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn schema_is_strict() {
        let r = report(vec![record(1.0, 0.5, 0.5, 0.0)]);
        let json = r.to_json();
        assert_eq!(Report::from_json(&json).unwrap(), r);
        let extra = json.replacen("\"schema_version\"", "\"surprise\": 1, \"schema_version\"", 1);
        assert!(Report::from_json(&extra).is_err());
        let old = json.replacen("\"schema_version\": 1", "\"schema_version\": 0", 1);
        assert!(Report::from_json(&old).is_err());
    }
}

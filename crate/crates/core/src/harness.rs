//! Episode runner and scripted policies.
//!
//! A policy is a fixed plan of [`Action`]s. The runner walks the plan,
//! retrieves documents for each Search, renders the trace to wire format
//! and scores what it rendered. Rollouts after the first are perturbed
//! from a seeded stream so a group carries some reward spread.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{aggregate, AdaptiveBetaState, AggregationPolicy};
use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::grpo::{group_advantages, GrpoConfig, Rollout, RolloutGroup};
use crate::parser::parse_trace;
use crate::render::{render, sanitize_doc};
use crate::rewards::{normalize_answer, score_report, RewardBreakdown, RewardConfig};
use crate::search::{Corpus, QaRecord};
use crate::trace::{ReasoningTrace, RetrievedDoc, Turn, SUBQUERY_SOFT_CAP};

pub const DEFAULT_MAX_TURNS: usize = 4;
pub const DEFAULT_DOC_CHAR_BUDGET: usize = 1200;
pub const DEFAULT_SEED: u64 = 0;

const DISTRACTOR_PROBABILITY: f64 = 0.4;
const DROP_SUBQUERY_PROBABILITY: f64 = 0.3;
const FALLBACK_DISTRACTOR: &str = "unknown";

/// One step of a scripted policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Think(String),
    Search {
        queries: Vec<String>,
        /// Documents to show instead of retrieving, one list per query.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        docs: Option<Vec<Vec<RetrievedDoc>>>,
    },
    Answer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Replay,
    TemplateDecompose,
    TemplateMonolithic,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] =
        [PolicyKind::Replay, PolicyKind::TemplateDecompose, PolicyKind::TemplateMonolithic];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Replay => "replay",
            PolicyKind::TemplateDecompose => "template-decompose",
            PolicyKind::TemplateMonolithic => "template-monolithic",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown policy {s:?}; valid policies: {}", PolicyKind::valid_names()))
        })
    }
}

/// `[harness]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Search rounds allowed before the answer is forced.
    pub max_turns: usize,
    pub seed: u64,
    /// Characters of document body kept per retrieved group.
    pub doc_char_budget: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self { max_turns: DEFAULT_MAX_TURNS, seed: DEFAULT_SEED, doc_char_budget: DEFAULT_DOC_CHAR_BUDGET }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_turns == 0 {
            return Err(Error::Config("harness.max_turns must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub kind: PolicyKind,
    pub script: Option<Vec<Action>>,
    pub max_turns: usize,
}

impl ScriptedPolicy {
    pub fn replay(script: Vec<Action>, max_turns: usize) -> Result<Self> {
        validate_script(&script)?;
        Ok(Self { kind: PolicyKind::Replay, script: Some(script), max_turns })
    }

    pub fn template(kind: PolicyKind, max_turns: usize) -> Result<Self> {
        if kind == PolicyKind::Replay {
            return Err(Error::Script("the replay policy needs a script".into()));
        }
        Ok(Self { kind, script: None, max_turns })
    }

    /// The policy for one dataset record. Replay takes the record's script.
    pub fn for_record(kind: PolicyKind, record: &QaRecord, max_turns: usize) -> Result<Self> {
        match kind {
            PolicyKind::Replay => {
                let script = record
                    .script
                    .clone()
                    .ok_or_else(|| Error::Script(format!("no script for question {:?}", record.question)))?;
                Self::replay(script, max_turns)
            }
            _ => Self::template(kind, max_turns),
        }
    }

    /// The action sequence this policy plays for `question`. Template
    /// policies answer with `answer_slot`.
    pub fn plan(&self, question: &str, answer_slot: &str) -> Vec<Action> {
        match self.kind {
            PolicyKind::Replay => self.script.clone().unwrap_or_default(),
            PolicyKind::TemplateDecompose => vec![
                Action::Think("I will split the question into simpler subqueries and search for each.".into()),
                Action::Search { queries: decompose_question(question), docs: None },
                Action::Think("The retrieved documents cover each subquery, so I can answer.".into()),
                Action::Answer(answer_slot.into()),
            ],
            PolicyKind::TemplateMonolithic => vec![
                Action::Think("I will search for the whole question at once.".into()),
                Action::Search { queries: vec![question.trim().to_owned()], docs: None },
                Action::Think("The retrieved documents answer the question.".into()),
                Action::Answer(answer_slot.into()),
            ],
        }
    }
}

fn validate_script(script: &[Action]) -> Result<()> {
    let answers = script.iter().filter(|a| matches!(a, Action::Answer(_))).count();
    if answers != 1 {
        return Err(Error::Script(format!("expected exactly one answer action, found {answers}")));
    }
    if !matches!(script.last(), Some(Action::Answer(_))) {
        return Err(Error::Script("the answer action must come last".into()));
    }
    Ok(())
}

/// Heuristic decomposition used by the decomposing template.
///
/// `"<stem>, A or B?"` becomes `"<stem> A"` and `"<stem> B"`. Otherwise the
/// question is split on `" and "`. At most three subqueries come out; a
/// question with no split point stays whole.
pub fn decompose_question(question: &str) -> Vec<String> {
    let q = question.trim().trim_end_matches('?').trim();
    if let Some((stem, options)) = q.rsplit_once(',') {
        if let Some((a, b)) = options.split_once(" or ") {
            let (stem, a, b) = (stem.trim(), a.trim(), b.trim());
            if !stem.is_empty() && !a.is_empty() && !b.is_empty() {
                return vec![format!("{stem} {a}"), format!("{stem} {b}")];
            }
        }
    }
    let mut parts: Vec<String> = q.split(" and ").map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect();
    if parts.len() > SUBQUERY_SOFT_CAP {
        let tail = parts.split_off(SUBQUERY_SOFT_CAP - 1).join(" and ");
        parts.push(tail);
    }
    if parts.is_empty() {
        vec![q.to_owned()]
    } else {
        parts
    }
}

/// Keeps at most `budget` characters of `body`, on a char boundary.
fn truncate_chars(body: &str, budget: usize) -> String {
    match body.char_indices().nth(budget) {
        Some((i, _)) => body[..i].trim_end().to_owned(),
        None => body.to_owned(),
    }
}

/// Random choices for one rollout. Rollout 0 is never perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Perturbation {
    drop_last_subquery: bool,
    distractor: Option<u64>,
}

impl Perturbation {
    fn draw(seed: u64, question_index: usize, rollout: usize) -> Self {
        if rollout == 0 {
            return Self::default();
        }
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update((question_index as u64).to_le_bytes());
        h.update((rollout as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let drop_last_subquery = rng.random_bool(DROP_SUBQUERY_PROBABILITY);
        let distract = rng.random_bool(DISTRACTOR_PROBABILITY);
        let pick: u64 = rng.random();
        Self { drop_last_subquery, distractor: distract.then_some(pick) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub question: String,
    pub rollout: usize,
    pub trace: ReasoningTrace,
    pub raw: String,
    pub breakdown: RewardBreakdown,
    pub aggregated: f64,
    /// The search budget ran out and an empty answer was forced.
    pub truncated: bool,
    /// Problems with the actions the policy emitted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Everything an episode needs apart from the question and policy.
#[derive(Clone, Copy)]
pub struct EpisodeEnv<'a> {
    pub corpus: &'a Corpus,
    pub provider: &'a dyn EmbeddingProvider,
    pub reward: &'a RewardConfig,
    pub aggregation: &'a AggregationPolicy,
    pub harness: &'a HarnessConfig,
}

pub fn run_episode(
    question: &str,
    golden: &[String],
    policy: &ScriptedPolicy,
    env: &EpisodeEnv<'_>,
) -> Result<Episode> {
    run_rollout(question, golden, policy, env, Perturbation::default(), 0)
}

fn run_rollout(
    question: &str,
    golden: &[String],
    policy: &ScriptedPolicy,
    env: &EpisodeEnv<'_>,
    perturbation: Perturbation,
    rollout: usize,
) -> Result<Episode> {
    let answer_slot = golden.first().map(String::as_str).unwrap_or("");
    let mut trace = ReasoningTrace::new(question);
    let mut notes = Vec::new();
    let mut searches = 0;
    let mut seen_titles: Vec<String> = Vec::new();
    let mut dropped = false;
    let mut answered = false;
    let mut truncated = false;

    for action in policy.plan(question, answer_slot) {
        match action {
            Action::Think(t) => trace.push(Turn::Think(t)),
            Action::Search { mut queries, mut docs } => {
                if searches == policy.max_turns {
                    truncated = true;
                    break;
                }
                searches += 1;
                if perturbation.drop_last_subquery && !dropped && queries.len() >= 2 {
                    queries.pop();
                    if let Some(d) = docs.as_mut() {
                        d.truncate(queries.len());
                    }
                    dropped = true;
                }
                trace.push(Turn::Search(queries.clone()));
                if queries.is_empty() {
                    notes.push(format!("search {searches} has no queries"));
                    continue;
                }
                let groups = match docs {
                    Some(groups) => {
                        if groups.len() != queries.len() {
                            notes.push(format!(
                                "search {searches}: {} scripted doc groups for {} queries",
                                groups.len(),
                                queries.len()
                            ));
                        }
                        groups.iter().map(|g| g.iter().map(sanitize_doc).collect()).collect()
                    }
                    None => retrieve_groups(&queries, env)?,
                };
                for g in &groups {
                    seen_titles.extend(g.iter().map(|d: &RetrievedDoc| d.title.clone()));
                }
                trace.push(Turn::Information(groups));
            }
            Action::Answer(a) => {
                let a = match perturbation.distractor {
                    Some(pick) => distractor(&seen_titles, golden, pick),
                    None => a,
                };
                trace.push(Turn::Answer(a));
                answered = true;
                break;
            }
        }
    }
    if !answered {
        if !matches!(trace.turns.last(), Some(Turn::Think(_))) {
            trace.push(Turn::Think(String::new()));
        }
        trace.push(Turn::Answer(String::new()));
    }

    let raw = render(&trace);
    let report = parse_trace(&raw, question);
    let breakdown = score_report(&report, golden, env.provider, env.reward)?;
    let aggregated = aggregate(env.aggregation, &breakdown);
    Ok(Episode {
        question: question.to_owned(),
        rollout,
        trace: report.trace,
        raw,
        breakdown,
        aggregated,
        truncated,
        notes,
    })
}

fn retrieve_groups(queries: &[String], env: &EpisodeEnv<'_>) -> Result<Vec<Vec<RetrievedDoc>>> {
    queries
        .iter()
        .map(|q| {
            let docs = env.corpus.retrieve(env.provider, q, env.reward.k)?;
            let per_doc = env.harness.doc_char_budget / docs.len().max(1);
            Ok(docs
                .into_iter()
                .map(|d| sanitize_doc(&RetrievedDoc { body: truncate_chars(&d.body, per_doc), ..d }))
                .collect())
        })
        .collect()
}

/// A wrong answer: a retrieved title that does not match any golden answer,
/// or a fixed fallback.
fn distractor(titles: &[String], golden: &[String], pick: u64) -> String {
    let gold: Vec<String> = golden.iter().map(|g| normalize_answer(g)).collect();
    let mut candidates: Vec<&String> =
        titles.iter().filter(|t| !t.trim().is_empty() && !gold.contains(&normalize_answer(t))).collect();
    candidates.sort();
    candidates.dedup();
    if candidates.is_empty() {
        FALLBACK_DISTRACTOR.to_owned()
    } else {
        candidates[(pick % candidates.len() as u64) as usize].clone()
    }
}

/// Result of one batch of rollout groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub groups: Vec<RolloutGroup>,
    pub episodes: Vec<Episode>,
    /// Mean `r_answer` over every episode in the batch.
    pub mean_r_answer: f64,
    /// State used to aggregate this batch.
    pub beta_state: AdaptiveBetaState,
    /// State after folding this batch in.
    pub next_beta_state: AdaptiveBetaState,
}

/// Runs `grpo.group_size` rollouts per record, computes advantages per
/// group, then advances the adaptive state once.
pub fn run_batch(
    records: &[QaRecord],
    kind: PolicyKind,
    env: &EpisodeEnv<'_>,
    grpo: &GrpoConfig,
) -> Result<BatchOutcome> {
    grpo.validate()?;
    env.harness.validate()?;
    let policies: Vec<ScriptedPolicy> =
        records.iter().map(|r| ScriptedPolicy::for_record(kind, r, env.harness.max_turns)).collect::<Result<_>>()?;
    let g = grpo.group_size;
    let jobs: Vec<(usize, usize)> = (0..records.len()).flat_map(|q| (0..g).map(move |r| (q, r))).collect();
    let episodes: Vec<Episode> = jobs
        .par_iter()
        .map(|&(qi, ri)| {
            let rec = &records[qi];
            let p = Perturbation::draw(env.harness.seed, qi, ri);
            run_rollout(&rec.question, &rec.golden_answers, &policies[qi], env, p, ri)
        })
        .collect::<Result<_>>()?;

    let mut groups = Vec::with_capacity(records.len());
    for (rec, chunk) in records.iter().zip(episodes.chunks(g)) {
        let rewards: Vec<f64> = chunk.iter().map(|e| e.aggregated).collect();
        let advantages = group_advantages(&rewards, grpo.epsilon)?;
        groups.push(RolloutGroup {
            question: rec.question.clone(),
            golden: rec.golden_answers.clone(),
            rollouts: chunk
                .iter()
                .map(|e| Rollout { raw: e.raw.clone(), breakdown: e.breakdown.clone(), aggregated: e.aggregated })
                .collect(),
            advantages,
        });
    }

    let mean_r_answer = if episodes.is_empty() {
        0.0
    } else {
        episodes.iter().map(|e| e.breakdown.r_answer).sum::<f64>() / episodes.len() as f64
    };
    let beta_state = env.aggregation.adaptive;
    let next_beta_state = if episodes.is_empty() { beta_state } else { beta_state.advance(mean_r_answer)? };
    Ok(BatchOutcome { groups, episodes, mean_r_answer, beta_state, next_beta_state })
}

//! Episode and batch behaviour against the fixture corpus.

use std::path::PathBuf;

use tracereward_core::aggregation::AggregationConfig;
use tracereward_core::embed::ReferenceHashed;
use tracereward_core::grpo::GrpoConfig;
use tracereward_core::harness::{
    run_batch, run_episode, Action, EpisodeEnv, HarnessConfig, PolicyKind, ScriptedPolicy,
};
use tracereward_core::parser::parse_trace;
use tracereward_core::rewards::{score_trace, RewardConfig};
use tracereward_core::search::{ingest_corpus, parse_dataset_jsonl, Corpus};
use tracereward_core::trace::Turn;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

struct World {
    corpus: Corpus,
    provider: ReferenceHashed,
    reward: RewardConfig,
    aggregation: tracereward_core::aggregation::AggregationPolicy,
    harness: HarnessConfig,
}

impl World {
    fn new(harness: HarnessConfig) -> Self {
        let provider = ReferenceHashed::default();
        let corpus = ingest_corpus(&fixture("corpus.jsonl"), &provider).unwrap();
        Self {
            corpus,
            provider,
            reward: RewardConfig::default(),
            aggregation: AggregationConfig::default().policy(),
            harness,
        }
    }

    fn env(&self) -> EpisodeEnv<'_> {
        EpisodeEnv {
            corpus: &self.corpus,
            provider: &self.provider,
            reward: &self.reward,
            aggregation: &self.aggregation,
            harness: &self.harness,
        }
    }
}

fn dataset() -> Vec<tracereward_core::search::QaRecord> {
    parse_dataset_jsonl(&std::fs::read_to_string(fixture("dataset.jsonl")).unwrap()).unwrap()
}

#[test]
fn batch_has_zero_sum_groups_and_well_formed_traces() {
    let world = World::new(HarnessConfig::default());
    let records = dataset();
    let out = run_batch(&records, PolicyKind::TemplateDecompose, &world.env(), &GrpoConfig::default()).unwrap();
    assert_eq!(out.episodes.len(), records.len() * 5);
    assert_eq!(out.groups.len(), records.len());
    for g in &out.groups {
        assert_eq!(g.rollouts.len(), 5);
        let sum: f64 = g.advantages.iter().sum();
        assert!(sum.abs() <= 5e-9, "{sum}");
    }
    for e in &out.episodes {
        let parsed = parse_trace(&e.raw, &e.question);
        assert!(parsed.f_format && parsed.f_retrieval, "{:?}", parsed.issues);
        assert_eq!(e.breakdown.r_format, 0.2);
    }
    assert_eq!(out.beta_state.step + 1, out.next_beta_state.step);
}

#[test]
fn batch_is_deterministic_for_a_seed() {
    let world = World::new(HarnessConfig { seed: 11, ..HarnessConfig::default() });
    let records = dataset();
    let a = run_batch(&records, PolicyKind::TemplateDecompose, &world.env(), &GrpoConfig::default()).unwrap();
    let b = run_batch(&records, PolicyKind::TemplateDecompose, &world.env(), &GrpoConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exhausted_search_budget_forces_an_empty_answer() {
    let world = World::new(HarnessConfig { max_turns: 1, ..HarnessConfig::default() });
    let script = vec![
        Action::Think("look up both".into()),
        Action::Search { queries: vec!["Danube length".into()], docs: None },
        Action::Think("and the other".into()),
        Action::Search { queries: vec!["Rhine length".into()], docs: None },
        Action::Answer("Danube".into()),
    ];
    let policy = ScriptedPolicy::replay(script, 1).unwrap();
    let golden = vec!["Danube".to_owned()];
    let ep = run_episode("Which river is longer, Danube or Rhine?", &golden, &policy, &world.env()).unwrap();
    assert!(ep.truncated);
    assert_eq!(ep.trace.answer.as_deref(), Some(""));
    assert_eq!(ep.breakdown.r_answer, 0.0);
    assert_eq!(ep.trace.search_count(), 1);
}

#[test]
fn replaying_a_transcript_scores_like_the_transcript() {
    let world = World::new(HarnessConfig { doc_char_budget: 1_000_000, ..HarnessConfig::default() });
    let question = "Which bank has more branches, China CITIC Bank or UniCredit?";
    let raw = std::fs::read_to_string(fixture("bank_branches.txt")).unwrap();
    let parsed = parse_trace(&raw, question);
    let mut script = Vec::new();
    for turn in &parsed.trace.turns {
        match turn {
            Turn::Think(t) => script.push(Action::Think(t.clone())),
            Turn::Search(q) => script.push(Action::Search { queries: q.clone(), docs: None }),
            Turn::Information(groups) => {
                if let Some(Action::Search { docs, .. }) = script.last_mut() {
                    *docs = Some(groups.clone());
                }
            }
            Turn::Answer(a) => script.push(Action::Answer(a.clone())),
        }
    }
    let policy = ScriptedPolicy::replay(script, 4).unwrap();
    let golden = vec!["UniCredit".to_owned()];
    let ep = run_episode(question, &golden, &policy, &world.env()).unwrap();
    assert_eq!(ep.breakdown.r_answer, 1.0);
    assert!(!ep.truncated);

    let live = score_trace(&raw, question, &golden, &world.provider, &world.reward).unwrap();
    assert_eq!(ep.breakdown, live);
    let replayed = score_trace(&ep.raw, question, &golden, &world.provider, &world.reward).unwrap();
    assert_eq!(ep.breakdown, replayed);
}

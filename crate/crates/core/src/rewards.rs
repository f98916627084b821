//! Outcome, answerability, decomposition and format rewards.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::parser::{parse_trace, ParseReport};
use crate::search::DEFAULT_TOP_K;
use crate::trace::{build_decomposition_tree, DecompNode, DecompositionTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Documents per subquery that enter the answerability mean.
    pub k: usize,
    /// Coverage weight. `alpha + beta_split` must stay within `[0, 1]`.
    pub alpha: f64,
    /// Split weight.
    pub beta_split: f64,
    pub lambda_structure: f64,
    pub lambda_retrieval: f64,
    /// Clamp every cosine into `[0, 1]` before it is used.
    #[serde(rename = "clamp")]
    pub clamp_negative_sims: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_TOP_K,
            alpha: 0.5,
            beta_split: 0.5,
            lambda_structure: 0.1,
            lambda_retrieval: 0.1,
            clamp_negative_sims: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("reward.k must be >= 1".into()));
        }
        if self.lambda_structure < 0.0 || self.lambda_retrieval < 0.0 {
            return Err(Error::Config("reward lambdas must be >= 0".into()));
        }
        if self.alpha < 0.0 || self.beta_split < 0.0 || self.alpha + self.beta_split > 1.0 + 1e-12 {
            return Err(Error::Config("reward.alpha and reward.beta_split must be >= 0 with sum <= 1".into()));
        }
        Ok(())
    }

    fn sim(&self, cos: f64) -> f64 {
        if self.clamp_negative_sims {
            cos.clamp(0.0, 1.0)
        } else {
            cos
        }
    }
}

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !(c.is_ascii_punctuation() || matches!(c, '‘' | '’' | '“' | '”' | '–' | '—' | '…')))
        .collect();
    no_punct.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

/// Exact match after normalization against any gold answer. A missing
/// answer scores 0.
pub fn answer_reward(generated: Option<&str>, golden: &[String]) -> f64 {
    let Some(generated) = generated else { return 0.0 };
    let g = normalize_answer(generated);
    if golden.iter().any(|gold| normalize_answer(gold) == g) {
        1.0
    } else {
        0.0
    }
}

/// Mean similarity between a query and its first `min(k, n)` documents
/// (documents arrive in rank order).
pub fn answerability_from_embeddings(query: &Embedding, docs: &[Embedding], cfg: &RewardConfig) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::contract("answerability needs at least one document"));
    }
    let top = &docs[..docs.len().min(cfg.k)];
    let mut sum = 0.0;
    for d in top {
        sum += cfg.sim(cosine(query, d)?);
    }
    Ok(sum / top.len() as f64)
}

pub fn answerability_reward(node: &DecompNode, provider: &dyn EmbeddingProvider, cfg: &RewardConfig) -> Result<f64> {
    let docs = node
        .docs
        .as_ref()
        .filter(|d| !d.is_empty())
        .ok_or_else(|| Error::contract(format!("node {} has no documents", node.label())))?;
    let top = &docs[..docs.len().min(cfg.k)];
    let texts: Vec<String> = top.iter().map(|d| d.embed_text()).collect();
    let mut refs: Vec<&str> = vec![node.query_text.as_str()];
    refs.extend(texts.iter().map(String::as_str));
    let mut embs = provider.embed(&refs)?;
    let doc_embs = embs.split_off(1);
    answerability_from_embeddings(&embs[0], &doc_embs, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionScore {
    pub r_coverage: f64,
    pub r_split: f64,
    pub r_decomp: f64,
}

/// Coverage and split of one decomposition step.
///
/// * coverage: similarity of the parent to the normalized mean of its children
/// * split: mean over children of
///   `sim(parent, child_i) * (1 - mean_{j != i} sim(child_i, child_j))`,
///   each term clamped to `[0, 1]`
pub fn decomposition_from_embeddings(
    parent: &Embedding,
    children: &[Embedding],
    cfg: &RewardConfig,
) -> Result<DecompositionScore> {
    let n = children.len();
    if n < 2 {
        return Err(Error::contract(format!("decomposition needs >= 2 children, got {n}")));
    }
    let mean = Embedding::mean_of(&children.iter().collect::<Vec<_>>())?;
    let r_coverage = cfg.sim(cosine(parent, &mean)?);

    let mut split = 0.0;
    for (i, ci) in children.iter().enumerate() {
        let relevance = cfg.sim(cosine(parent, ci)?);
        let mut overlap = 0.0;
        for (j, cj) in children.iter().enumerate() {
            if i != j {
                overlap += cfg.sim(cosine(ci, cj)?);
            }
        }
        let uniqueness = 1.0 - overlap / (n - 1) as f64;
        split += (relevance * uniqueness).clamp(0.0, 1.0);
    }
    let r_split = split / n as f64;
    let r_decomp = cfg.alpha * r_coverage + cfg.beta_split * r_split;
    Ok(DecompositionScore { r_coverage, r_split, r_decomp })
}

pub fn decomposition_reward(
    parent: &DecompNode,
    children: &[&DecompNode],
    provider: &dyn EmbeddingProvider,
    cfg: &RewardConfig,
) -> Result<DecompositionScore> {
    if children.len() < 2 {
        return Err(Error::contract(format!("decomposition needs >= 2 children, got {}", children.len())));
    }
    let mut refs = vec![parent.query_text.as_str()];
    refs.extend(children.iter().map(|c| c.query_text.as_str()));
    let mut embs = provider.embed(&refs)?;
    let kids = embs.split_off(1);
    decomposition_from_embeddings(&embs[0], &kids, cfg)
}

pub fn format_reward(f_format: bool, f_retrieval: bool, cfg: &RewardConfig) -> f64 {
    match (f_format, f_retrieval) {
        (false, _) => 0.0,
        (true, false) => cfg.lambda_structure,
        (true, true) => cfg.lambda_structure + cfg.lambda_retrieval,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafScore {
    pub level: usize,
    pub index: usize,
    pub query: String,
    pub answerability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub level: usize,
    pub index: usize,
    pub query: String,
    pub children: usize,
    pub r_coverage: f64,
    pub r_split: f64,
    pub r_decomp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_answer: f64,
    /// No Answer turn was found.
    pub missing_answer: bool,
    pub answerability_per_leaf: Vec<LeafScore>,
    pub decomposition_per_event: Vec<EventScore>,
    pub r_format: f64,
    pub f_format: bool,
    pub f_retrieval: bool,
    /// Mean answerability, 0 with no searched leaves.
    pub avg_answerability: f64,
    /// Mean r_decomp, 0 with no decomposition events.
    pub avg_decomposition: f64,
}

impl RewardBreakdown {
    /// The intermediate term of the aggregators: mean of the two averages.
    pub fn intermediate(&self) -> f64 {
        0.5 * (self.avg_answerability + self.avg_decomposition)
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

/// Embeds each distinct text once.
struct EmbeddingTable {
    index: HashMap<String, usize>,
    vectors: Vec<Embedding>,
}

impl EmbeddingTable {
    fn build(texts: Vec<String>, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let mut index = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        for t in texts {
            if !index.contains_key(&t) {
                index.insert(t.clone(), order.len());
                order.push(t);
            }
        }
        let refs: Vec<&str> = order.iter().map(String::as_str).collect();
        let vectors = if refs.is_empty() { Vec::new() } else { provider.embed(&refs)? };
        Ok(Self { index, vectors })
    }

    fn get(&self, text: &str) -> &Embedding {
        &self.vectors[self.index[text]]
    }
}

/// Scores an already parsed and tree-built trace. Documents come from the
/// trace itself.
pub fn score_tree(
    report: &ParseReport,
    tree: &DecompositionTree,
    golden: &[String],
    provider: &dyn EmbeddingProvider,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    cfg.validate()?;
    let answer = report.trace.answer.as_deref();
    let r_answer = answer_reward(answer, golden);

    let leaves = tree.searched_leaves();
    let events = tree.decomposition_events();

    let mut texts = Vec::new();
    for leaf in &leaves {
        texts.push(leaf.query_text.clone());
        let docs = leaf.docs.as_deref().unwrap_or_default();
        texts.extend(docs.iter().take(cfg.k).map(|d| d.embed_text()));
    }
    for (parent, children) in &events {
        texts.push(parent.query_text.clone());
        texts.extend(children.iter().map(|c| c.query_text.clone()));
    }
    let table = EmbeddingTable::build(texts, provider)?;

    let mut answerability_per_leaf = Vec::with_capacity(leaves.len());
    for leaf in &leaves {
        let docs = leaf.docs.as_deref().unwrap_or_default();
        // a search that came back empty answers nothing
        let value = if docs.is_empty() {
            0.0
        } else {
            let doc_embs: Vec<Embedding> =
                docs.iter().take(cfg.k).map(|d| table.get(&d.embed_text()).clone()).collect();
            answerability_from_embeddings(table.get(&leaf.query_text), &doc_embs, cfg)?
        };
        answerability_per_leaf.push(LeafScore {
            level: leaf.level,
            index: leaf.index,
            query: leaf.query_text.clone(),
            answerability: value,
        });
    }

    let mut decomposition_per_event = Vec::with_capacity(events.len());
    for (parent, children) in &events {
        let kids: Vec<Embedding> = children.iter().map(|c| table.get(&c.query_text).clone()).collect();
        let s = decomposition_from_embeddings(table.get(&parent.query_text), &kids, cfg)?;
        decomposition_per_event.push(EventScore {
            level: parent.level,
            index: parent.index,
            query: parent.query_text.clone(),
            children: children.len(),
            r_coverage: s.r_coverage,
            r_split: s.r_split,
            r_decomp: s.r_decomp,
        });
    }

    let avg_answerability = mean(answerability_per_leaf.iter().map(|l| l.answerability));
    let avg_decomposition = mean(decomposition_per_event.iter().map(|e| e.r_decomp));

    Ok(RewardBreakdown {
        r_answer,
        missing_answer: answer.is_none(),
        answerability_per_leaf,
        decomposition_per_event,
        r_format: format_reward(report.f_format, report.f_retrieval, cfg),
        f_format: report.f_format,
        f_retrieval: report.f_retrieval,
        avg_answerability,
        avg_decomposition,
    })
}

pub fn score_report(
    report: &ParseReport,
    golden: &[String],
    provider: &dyn EmbeddingProvider,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    let tree = build_decomposition_tree(&report.trace, provider)?;
    score_tree(report, &tree, golden, provider, cfg)
}

/// Parse, build the tree, and compute every reward signal.
pub fn score_trace(
    raw: &str,
    question: &str,
    golden: &[String],
    provider: &dyn EmbeddingProvider,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    score_report(&parse_trace(raw, question), golden, provider, cfg)
}

//! In-memory reasoning traces and their decomposition trees.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, EmbedError, Embedding, EmbeddingProvider};

/// Subquery count above which a Search turn is flagged (never rejected).
pub const SUBQUERY_SOFT_CAP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    pub title: String,
    pub body: String,
    /// Retrieval similarity. Absent for documents read back out of a trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl RetrievedDoc {
    pub fn new(title: impl Into<String>, body: impl Into<String>) -> Self {
        Self { doc_id: None, title: title.into(), body: body.into(), score: None }
    }

    /// The text that gets embedded: title, a space, then body.
    pub fn embed_text(&self) -> String {
        format!("{} {}", self.title, self.body)
    }

    /// Drops retrieval metadata, leaving what a rendered trace carries.
    pub fn without_metadata(&self) -> Self {
        Self::new(self.title.clone(), self.body.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "content", rename_all = "snake_case")]
pub enum Turn {
    Think(String),
    Search(Vec<String>),
    /// One document list per subquery of the preceding Search.
    Information(Vec<Vec<RetrievedDoc>>),
    Answer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    Think,
    Search,
    Information,
    Answer,
}

impl Turn {
    pub fn kind(&self) -> TurnKind {
        match self {
            Turn::Think(_) => TurnKind::Think,
            Turn::Search(_) => TurnKind::Search,
            Turn::Information(_) => TurnKind::Information,
            Turn::Answer(_) => TurnKind::Answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub question: String,
    pub turns: Vec<Turn>,
    pub answer: Option<String>,
}

impl ReasoningTrace {
    pub fn new(question: impl Into<String>) -> Self {
        Self { question: question.into(), turns: Vec::new(), answer: None }
    }

    pub fn push(&mut self, turn: Turn) {
        if let Turn::Answer(a) = &turn {
            if self.answer.is_none() {
                self.answer = Some(a.clone());
            }
        }
        self.turns.push(turn);
    }

    pub fn search_count(&self) -> usize {
        self.turns.iter().filter(|t| t.kind() == TurnKind::Search).count()
    }

    pub fn subquery_count(&self) -> usize {
        self.turns
            .iter()
            .map(|t| match t {
                Turn::Search(q) => q.len(),
                _ => 0,
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompNode {
    pub id: NodeId,
    /// Decomposition level; the question sits at 0.
    pub level: usize,
    /// 1-based position within its level, in creation order.
    pub index: usize,
    pub query_text: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Documents retrieved for this node, if its text was issued as a search
    /// and the trace carried a matching information group.
    pub docs: Option<Vec<RetrievedDoc>>,
    /// Position (0-based) of the Search turn among all Search turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_turn: Option<usize>,
}

impl DecompNode {
    pub fn is_root(&self) -> bool {
        self.parent.is_none()
    }

    /// `l.i` label.
    pub fn label(&self) -> String {
        format!("{}.{}", self.level, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreeNoteKind {
    /// Two or more prior nodes tied on similarity; the most recent one won.
    AmbiguousAttachment,
    TooManySubqueries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNote {
    pub kind: TreeNoteKind,
    pub search_turn: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTree {
    nodes: Vec<DecompNode>,
    pub notes: Vec<TreeNote>,
}

/// Similarity differences below this count as ties when attaching nodes.
const TIE_EPS: f64 = 1e-12;

impl DecompositionTree {
    pub fn root(&self) -> &DecompNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &DecompNode {
        &self.nodes[id.0]
    }

    /// All nodes, root first, then in issue order.
    pub fn nodes(&self) -> &[DecompNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &DecompNode> {
        self.nodes[id.0].children.iter().map(|c| &self.nodes[c.0])
    }

    /// Nodes split into two or more children, each with its ordered children.
    pub fn decomposition_events(&self) -> Vec<(&DecompNode, Vec<&DecompNode>)> {
        self.nodes.iter().filter(|n| n.children.len() >= 2).map(|n| (n, self.children(n.id).collect())).collect()
    }

    /// Nodes carrying a document list, in issue order.
    pub fn searched_leaves(&self) -> Vec<&DecompNode> {
        self.nodes.iter().filter(|n| n.docs.is_some()).collect()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    fn add_child(&mut self, parent: NodeId, text: String, search_turn: usize) -> NodeId {
        let level = self.nodes[parent.0].level + 1;
        let index = self.nodes.iter().filter(|n| n.level == level).count() + 1;
        let id = NodeId(self.nodes.len());
        self.nodes.push(DecompNode {
            id,
            level,
            index,
            query_text: text,
            parent: Some(parent),
            children: Vec::new(),
            docs: None,
            search_turn: Some(search_turn),
        });
        self.nodes[parent.0].children.push(id);
        id
    }
}

/// Builds the decomposition tree of a parsed trace.
///
/// Subqueries of the first Search hang off the question. Each later Search
/// hangs off the earlier searched node whose embedding is closest to the
/// normalized mean of the new subqueries; ties go to the most recent node.
/// Documents from the Information turn right after a Search attach to its
/// subqueries by position.
pub fn build_decomposition_tree(
    trace: &ReasoningTrace,
    provider: &dyn EmbeddingProvider,
) -> Result<DecompositionTree, EmbedError> {
    let mut tree = DecompositionTree {
        nodes: vec![DecompNode {
            id: NodeId(0),
            level: 0,
            index: 1,
            query_text: trace.question.clone(),
            parent: None,
            children: Vec::new(),
            docs: None,
            search_turn: None,
        }],
        notes: Vec::new(),
    };

    let mut prior: Vec<NodeId> = Vec::new();
    let mut prior_embeddings: Vec<Embedding> = Vec::new();
    let mut search_no = 0usize;

    for (pos, turn) in trace.turns.iter().enumerate() {
        let Turn::Search(queries) = turn else { continue };
        let k = search_no;
        search_no += 1;
        if queries.is_empty() {
            continue;
        }
        if queries.len() > SUBQUERY_SOFT_CAP {
            tree.notes.push(TreeNote {
                kind: TreeNoteKind::TooManySubqueries,
                search_turn: k,
                message: format!("{} subqueries in one search", queries.len()),
            });
        }

        let parent = match prior.len() {
            0 => NodeId(0),
            1 => prior[0],
            _ => {
                let refs: Vec<&str> = queries.iter().map(String::as_str).collect();
                let new = provider.embed(&refs)?;
                let mean = Embedding::mean_of(&new.iter().collect::<Vec<_>>())?;
                let mut best = 0usize;
                let mut best_sim = f64::NEG_INFINITY;
                let mut tied = false;
                for (j, e) in prior_embeddings.iter().enumerate() {
                    let sim = cosine(&mean, e)?;
                    if sim > best_sim + TIE_EPS {
                        best = j;
                        best_sim = sim;
                        tied = false;
                    } else if (sim - best_sim).abs() <= TIE_EPS {
                        best = j;
                        tied = true;
                    }
                }
                if tied {
                    tree.notes.push(TreeNote {
                        kind: TreeNoteKind::AmbiguousAttachment,
                        search_turn: k,
                        message: format!("tie resolved toward node {}", tree.node(prior[best]).label()),
                    });
                }
                prior[best]
            }
        };

        let groups = match trace.turns.get(pos + 1) {
            Some(Turn::Information(groups)) => Some(groups),
            _ => None,
        };
        let mut created = Vec::with_capacity(queries.len());
        for (j, q) in queries.iter().enumerate() {
            let id = tree.add_child(parent, q.clone(), k);
            if let Some(group) = groups.and_then(|g| g.get(j)) {
                tree.nodes[id.0].docs = Some(group.clone());
            }
            created.push(id);
        }

        // embeddings of prior nodes are only needed once there is a choice
        let needs_embeddings = prior.len() + created.len() >= 2;
        if needs_embeddings {
            let missing: Vec<&str> = prior[prior_embeddings.len()..]
                .iter()
                .chain(created.iter())
                .map(|id| tree.nodes[id.0].query_text.as_str())
                .collect();
            prior_embeddings.extend(provider.embed(&missing)?);
        }
        prior.extend(created);
    }

    Ok(tree)
}

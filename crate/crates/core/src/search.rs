//! In-memory dense retriever standing in for the search engine.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{cosine, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::trace::RetrievedDoc;

/// Default number of documents per subquery.
pub const DEFAULT_TOP_K: usize = 3;

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// One line of a QA dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub golden_answers: Vec<String>,
    /// Replay script for the replay policy, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Vec<crate::harness::Action>>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<CorpusRecord>,
    embeddings: Vec<Embedding>,
    provider_fingerprint: String,
}

impl Corpus {
    /// Embeds `title + " " + text` for each record.
    pub fn from_records(records: Vec<CorpusRecord>, provider: &dyn EmbeddingProvider) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateDocId(r.id.clone()));
            }
        }
        let texts: Vec<String> = records.iter().map(|r| format!("{} {}", r.title, r.text)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let embeddings = provider.embed(&refs)?;
        Ok(Self { docs: records, embeddings, provider_fingerprint: provider.fingerprint() })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[CorpusRecord] {
        &self.docs
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn provider_fingerprint(&self) -> &str {
        &self.provider_fingerprint
    }

    /// SHA-256 over the little-endian bytes of the embedding matrix.
    pub fn matrix_digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.embeddings {
            for v in e.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Top-`k` documents by cosine to the query, scores non-increasing,
    /// ties broken by ascending doc id.
    pub fn retrieve(&self, provider: &dyn EmbeddingProvider, subquery: &str, k: usize) -> Result<Vec<RetrievedDoc>> {
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        if self.docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let q = provider.embed_one(subquery)?;
        self.retrieve_embedded(&q, k)
    }

    pub fn retrieve_embedded(&self, query: &Embedding, k: usize) -> Result<Vec<RetrievedDoc>> {
        let mut scored: Vec<(f64, usize)> = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| cosine(query, e).map(|s| (s, i)))
            .collect::<std::result::Result<_, _>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| self.docs[a.1].id.cmp(&self.docs[b.1].id)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, i)| {
                let d = &self.docs[i];
                RetrievedDoc {
                    doc_id: Some(d.id.clone()),
                    title: d.title.clone(),
                    body: d.text.clone(),
                    score: Some(score),
                }
            })
            .collect())
    }
}

/// Parses corpus JSON lines. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus_jsonl(contents: &str) -> Result<Vec<CorpusRecord>> {
    contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::CorpusLine { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn ingest_corpus_str(contents: &str, provider: &dyn EmbeddingProvider) -> Result<Corpus> {
    Corpus::from_records(parse_corpus_jsonl(contents)?, provider)
}

pub fn ingest_corpus(path: &Path, provider: &dyn EmbeddingProvider) -> Result<Corpus> {
    let contents = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    ingest_corpus_str(&contents, provider)
}

pub fn parse_dataset_jsonl(contents: &str) -> Result<Vec<QaRecord>> {
    contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::DatasetLine { line: i + 1, message: e.to_string() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{ReferenceHashed, StaticEmbedder};

    const THREE: &str = r#"{"id":"d1","title":"CITIC Bank","text":"773 branch offices"}
{"id":"d2","title":"UniCredit","text":"more than 8,500 branches"}

{"id":"d3","title":"Joe Buck","text":"son of sportscaster Jack Buck"}
"#;

    #[test]
    fn ingest_three() {
        let c = ingest_corpus_str(THREE, &ReferenceHashed::default()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.embeddings().len(), 3);
    }

    #[test]
    fn duplicate_id_named() {
        let dup = "{\"id\":\"d1\",\"title\":\"a\",\"text\":\"b\"}\n{\"id\":\"d1\",\"title\":\"c\",\"text\":\"d\"}";
        match ingest_corpus_str(dup, &ReferenceHashed::default()) {
            Err(Error::DuplicateDocId(id)) => assert_eq!(id, "d1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_named() {
        let bad = "{\"id\":\"d1\",\"title\":\"a\",\"text\":\"b\"}\n{oops}";
        match ingest_corpus_str(bad, &ReferenceHashed::default()) {
            Err(Error::CorpusLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fewer_docs_than_k() {
        let one = "{\"id\":\"only\",\"title\":\"a\",\"text\":\"b\"}";
        let p = ReferenceHashed::default();
        let c = ingest_corpus_str(one, &p).unwrap();
        let got = c.retrieve(&p, "anything", 3).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].doc_id.as_deref(), Some("only"));
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let p = StaticEmbedder::new().with("t b", vec![1.0, 0.0]).with("q", vec![0.6, 0.8]);
        let recs = vec![
            CorpusRecord { id: "zeta".into(), title: "t".into(), text: "b".into() },
            CorpusRecord { id: "alpha".into(), title: "t".into(), text: "b".into() },
        ];
        let c = Corpus::from_records(recs, &p).unwrap();
        let got = c.retrieve(&p, "q", 1).unwrap();
        assert_eq!(got[0].doc_id.as_deref(), Some("alpha"));
    }

    #[test]
    fn exact_text_ranks_first_with_unit_score() {
        let p = ReferenceHashed::default();
        let recs: Vec<CorpusRecord> = [
            ("d1", "Mercury", "smallest planet closest to the sun"),
            ("d2", "Venus", "hottest planet thick atmosphere"),
            ("d3", "Earth", "third planet liquid water oceans"),
            ("d4", "Mars", "red planet iron oxide dust"),
            ("d5", "Jupiter", "largest gas giant great red spot"),
        ]
        .iter()
        .map(|(i, t, b)| CorpusRecord { id: (*i).into(), title: (*t).into(), text: (*b).into() })
        .collect();
        let c = Corpus::from_records(recs, &p).unwrap();
        let got = c.retrieve(&p, "Earth third planet liquid water oceans", 3).unwrap();
        assert_eq!(got[0].doc_id.as_deref(), Some("d3"));
        assert!((got[0].score.unwrap() - 1.0).abs() < 1e-12);
        // brute force over every doc
        let q = p.embed_one("Earth third planet liquid water oceans").unwrap();
        let mut all: Vec<f64> = c.embeddings().iter().map(|e| cosine(&q, e).unwrap()).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        for (doc, want) in got.iter().zip(&all) {
            assert!((doc.score.unwrap() - want).abs() < 1e-9);
        }
        assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn zero_k_is_contract_violation() {
        let p = ReferenceHashed::default();
        let c = ingest_corpus_str(THREE, &p).unwrap();
        assert!(matches!(c.retrieve(&p, "x", 0), Err(Error::Contract(_))));
    }

    #[test]
    fn dataset_lines() {
        let ds = "{\"question\":\"q\",\"golden_answers\":[\"a\"]}\nnot json";
        match parse_dataset_jsonl(ds) {
            Err(Error::DatasetLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}

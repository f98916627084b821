//! Embedding providers.
//!
//! Every reward that compares texts goes through an [`EmbeddingProvider`].
//! Providers always hand back unit-norm vectors; anything that arrives
//! unnormalized from the outside is re-normalized on receipt.
//!
//! The [`ReferenceHashed`] provider is a bag-of-words feature hasher:
//!
//! 1. lowercase the text and split it on every non-alphanumeric character,
//! 2. hash each token's UTF-8 bytes with 64-bit FNV-1a
//!    (offset basis `0xcbf29ce484222325`, prime `0x100000001b3`),
//! 3. add one to bucket `hash % dim`,
//! 4. divide the count vector by its L2 norm.
//!
//! A text with no tokens maps to the uniform vector `1/sqrt(dim)`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// FNV-1a 64-bit offset basis, used as the reference embedder's seed.
pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub const DEFAULT_REFERENCE_DIM: usize = 256;
pub const MIN_DIM: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The external service could not be reached after all retries.
    #[error("embedding service unavailable after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    #[error("embedding service returned a bad response: {0}")]
    BadResponse(String),

    #[error("no embedding registered for text {0:?}")]
    UnknownText(String),

    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

/// A unit-norm vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Scales `values` onto the unit sphere. A zero (or empty-norm) vector
    /// becomes the uniform vector, same as the empty-text case.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::BadResponse("zero-length vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::BadResponse("non-finite vector component".into()));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Ok(Self::uniform(values.len()));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Embedding(values))
    }

    pub fn uniform(dim: usize) -> Self {
        let v = 1.0 / (dim as f64).sqrt();
        Embedding(vec![v; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Normalized mean of several embeddings.
    pub fn mean_of(items: &[&Embedding]) -> Result<Self, EmbedError> {
        let first = items.first().ok_or_else(|| EmbedError::BadResponse("mean of zero embeddings".into()))?;
        let dim = first.dim();
        let mut acc = vec![0.0; dim];
        for e in items {
            if e.dim() != dim {
                return Err(EmbedError::DimensionMismatch { expected: dim, got: e.dim() });
            }
            for (a, v) in acc.iter_mut().zip(e.values()) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Self::normalized(acc)
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine of two unit vectors, i.e. their dot product.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

pub trait EmbeddingProvider: Send + Sync {
    /// One unit vector per input text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError>;

    /// Stable description of the provider, included in reports.
    fn fingerprint(&self) -> String;

    fn embed_one(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut out = self.embed(&[text])?;
        out.pop().ok_or_else(|| EmbedError::BadResponse("provider returned no vectors".into()))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

/// Deterministic hashed bag-of-words embedder.
#[derive(Debug, Clone)]
pub struct ReferenceHashed {
    dim: usize,
}

impl ReferenceHashed {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < MIN_DIM {
            return Err(EmbedError::InvalidConfig(format!("dim must be >= {MIN_DIM}, got {dim}")));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut counts = vec![0.0; self.dim];
        for tok in tokenize(text) {
            counts[(fnv1a64(tok.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        counts
    }

    pub fn embed_text(&self, text: &str) -> Embedding {
        let counts = self.counts(text);
        // counts are finite and the vector has dim >= 8 entries
        Embedding::normalized(counts).expect("hashed counts are finite")
    }
}

impl Default for ReferenceHashed {
    fn default() -> Self {
        Self { dim: DEFAULT_REFERENCE_DIM }
    }
}

impl EmbeddingProvider for ReferenceHashed {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }

    fn fingerprint(&self) -> String {
        format!("reference-hashed/fnv1a64/dim={}", self.dim)
    }
}

/// Fixed text-to-vector table. Useful for hand-built geometry in tests and
/// for replaying embeddings captured elsewhere.
#[derive(Debug, Clone, Default)]
pub struct StaticEmbedder {
    table: HashMap<String, Embedding>,
    dim: Option<usize>,
}

impl StaticEmbedder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, text: impl Into<String>, values: Vec<f64>) -> Result<(), EmbedError> {
        let e = Embedding::normalized(values)?;
        match self.dim {
            Some(d) if d != e.dim() => return Err(EmbedError::DimensionMismatch { expected: d, got: e.dim() }),
            _ => self.dim = Some(e.dim()),
        }
        self.table.insert(text.into(), e);
        Ok(())
    }

    pub fn with(mut self, text: impl Into<String>, values: Vec<f64>) -> Self {
        self.insert(text, values).expect("static embedding is valid");
        self
    }
}

impl EmbeddingProvider for StaticEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts.iter().map(|t| self.table.get(*t).cloned().ok_or_else(|| EmbedError::UnknownText((*t).into()))).collect()
    }

    fn fingerprint(&self) -> String {
        format!("static/entries={}/dim={}", self.table.len(), self.dim.unwrap_or(0))
    }
}

/// Request body for the external embedding service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub texts: Vec<String>,
}

/// Response body for the external embedding service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ExternalConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub max_attempts: u32,
}

/// HTTP client for an external embedding service.
///
/// Results are cached by exact text for the lifetime of the instance, so a
/// scoring run sees one vector per distinct string no matter how often it
/// asks.
pub struct ExternalService {
    cfg: ExternalConfig,
    http: reqwest::blocking::Client,
    cache: Mutex<HashMap<String, Embedding>>,
    dim: OnceLock<usize>,
}

impl ExternalService {
    pub fn new(cfg: ExternalConfig) -> Result<Self, EmbedError> {
        if cfg.endpoint.trim().is_empty() {
            return Err(EmbedError::InvalidConfig("empty endpoint".into()));
        }
        if cfg.batch_size == 0 || cfg.max_in_flight == 0 || cfg.max_attempts == 0 {
            return Err(EmbedError::InvalidConfig(
                "batch_size, max_in_flight and max_attempts must be positive".into(),
            ));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| EmbedError::InvalidConfig(e.to_string()))?;
        Ok(Self { cfg, http, cache: Mutex::new(HashMap::new()), dim: OnceLock::new() })
    }

    fn request_batch(&self, batch: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let body = EmbedRequest { model: self.cfg.model.clone(), texts: batch.to_vec() };
        let mut last = String::new();
        for attempt in 1..=self.cfg.max_attempts {
            match self.http.post(&self.cfg.endpoint).json(&body).send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: EmbedResponse = resp.json().map_err(|e| EmbedError::BadResponse(e.to_string()))?;
                    return self.accept(batch.len(), parsed);
                }
                Ok(resp) if resp.status().is_server_error() => {
                    last = format!("HTTP {}", resp.status());
                }
                Ok(resp) => {
                    return Err(EmbedError::BadResponse(format!("HTTP {}", resp.status())));
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < self.cfg.max_attempts {
                std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
            }
        }
        Err(EmbedError::Transport { attempts: self.cfg.max_attempts, message: last })
    }

    fn accept(&self, expected: usize, resp: EmbedResponse) -> Result<Vec<Embedding>, EmbedError> {
        if resp.embeddings.len() != expected {
            return Err(EmbedError::BadResponse(format!(
                "asked for {expected} vectors, got {}",
                resp.embeddings.len()
            )));
        }
        let mut out = Vec::with_capacity(expected);
        for raw in resp.embeddings {
            let e = Embedding::normalized(raw)?;
            let dim = *self.dim.get_or_init(|| e.dim());
            if dim != e.dim() {
                return Err(EmbedError::DimensionMismatch { expected: dim, got: e.dim() });
            }
            out.push(e);
        }
        Ok(out)
    }
}

impl EmbeddingProvider for ExternalService {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().expect("embedding cache poisoned");
            let mut seen = std::collections::HashSet::new();
            texts.iter().filter(|t| !cache.contains_key(**t) && seen.insert(**t)).map(|t| (*t).to_owned()).collect()
        };

        let batches: Vec<&[String]> = missing.chunks(self.cfg.batch_size).collect();
        for wave in batches.chunks(self.cfg.max_in_flight) {
            let results: Vec<Result<Vec<Embedding>, EmbedError>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|b| s.spawn(move || self.request_batch(b))).collect();
                handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
            });
            let mut cache = self.cache.lock().expect("embedding cache poisoned");
            for (batch, res) in wave.iter().zip(results) {
                for (text, e) in batch.iter().zip(res?) {
                    // first writer wins so concurrent callers agree
                    cache.entry(text.clone()).or_insert(e);
                }
            }
        }

        let cache = self.cache.lock().expect("embedding cache poisoned");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }

    fn fingerprint(&self) -> String {
        format!("external/{}@{}", self.cfg.model, self.cfg.endpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fnv_known_vectors() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn reference_dim8_counts_are_normalized() {
        let emb = ReferenceHashed::new(8).unwrap();
        let counts = emb.counts("a a b");
        assert_eq!(counts.iter().sum::<f64>(), 3.0);
        let e = emb.embed_text("a a b");
        assert!(close(l2_norm(e.values()), 1.0, 1e-12));
    }

    #[test]
    fn identical_texts_have_unit_cosine() {
        let emb = ReferenceHashed::default();
        let a = emb.embed_text("how many branches does UniCredit have");
        let b = emb.embed_text("how many branches does UniCredit have");
        assert_eq!(a, b);
        assert!(close(cosine(&a, &b).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn empty_text_is_uniform() {
        let emb = ReferenceHashed::new(16).unwrap();
        let e = emb.embed_text("  ,;  ");
        assert_eq!(e, Embedding::uniform(16));
    }

    #[test]
    fn small_dim_rejected() {
        assert!(matches!(ReferenceHashed::new(7), Err(EmbedError::InvalidConfig(_))));
    }

    #[test]
    fn cosine_of_basis_and_diagonal() {
        let e1 = Embedding::normalized(vec![1.0, 0.0]).unwrap();
        let e2 = Embedding::normalized(vec![0.0, 1.0]).unwrap();
        let d = Embedding::normalized(vec![1.0, 1.0]).unwrap();
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert!(close(cosine(&e1, &d).unwrap(), std::f64::consts::FRAC_1_SQRT_2, 1e-12));
    }

    #[test]
    fn cosine_dimension_mismatch() {
        let a = Embedding::uniform(2);
        let b = Embedding::uniform(3);
        assert!(matches!(cosine(&a, &b), Err(EmbedError::DimensionMismatch { .. })));
    }

    #[test]
    fn static_embedder_rejects_unknown() {
        let s = StaticEmbedder::new().with("q", vec![1.0, 0.0]);
        assert!(s.embed(&["q"]).is_ok());
        assert!(matches!(s.embed(&["nope"]), Err(EmbedError::UnknownText(_))));
    }

    #[test]
    fn positive_scaling_is_erased() {
        let a = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        let b = Embedding::normalized(vec![0.3, 0.4]).unwrap();
        assert!(close(a.values()[0], b.values()[0], 1e-15));
        assert!(close(a.values()[1], b.values()[1], 1e-15));
    }

    #[test]
    fn external_unreachable_is_transport_error() {
        let svc = ExternalService::new(ExternalConfig {
            endpoint: "http://127.0.0.1:9/embed".into(),
            model: "m".into(),
            timeout: Duration::from_millis(200),
            batch_size: 4,
            max_in_flight: 2,
            max_attempts: 2,
        })
        .unwrap();
        match svc.embed(&["x"]) {
            Err(EmbedError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}

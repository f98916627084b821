//! Async client for the trace reward service.

use serde::de::DeserializeOwned;
use serde::Serialize;
use tracereward_core::api::*;
use tracereward_core::parser::ParseReport;
use tracereward_core::report::{Comparison, Report};
use tracereward_core::trace::RetrievedDoc;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service rejected the request.
    #[error("{message}")]
    Rejected { status: u16, kind: ErrorKind, message: String },

    #[error("service unreachable at {url}: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },

    #[error("unexpected response from {url}: {message}")]
    Protocol { url: String, message: String },
}

impl ClientError {
    /// True when the request itself was at fault.
    pub fn is_input_error(&self) -> bool {
        matches!(self, ClientError::Rejected { kind: ErrorKind::Input, .. })
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, for example `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_owned(), http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder, url: String) -> Result<T> {
        let resp = req.send().await.map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| ClientError::Protocol { url, message: e.to_string() });
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(b) => Err(ClientError::Rejected { status: status.as_u16(), kind: b.kind, message: b.error }),
            Err(_) => Err(ClientError::Rejected {
                status: status.as_u16(),
                kind: if status.is_client_error() { ErrorKind::Input } else { ErrorKind::Internal },
                message: format!("{status}: {}", String::from_utf8_lossy(&bytes)),
            }),
        }
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.get(&url), url).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.post(&url).json(body), url).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn parse(&self, req: &TraceRequest) -> Result<ParseReport> {
        self.post("/v1/parse", req).await
    }

    pub async fn tree(&self, req: &TraceRequest) -> Result<TreeResponse> {
        self.post("/v1/tree", req).await
    }

    pub async fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        self.post("/v1/score", req).await
    }

    pub async fn render(&self, req: &RenderRequest) -> Result<RenderResponse> {
        self.post("/v1/render", req).await
    }

    pub async fn ingest_corpus(&self, req: &CorpusRequest) -> Result<CorpusSummary> {
        self.post("/v1/corpora", req).await
    }

    pub async fn retrieve(&self, req: &RetrieveRequest) -> Result<Vec<RetrievedDoc>> {
        self.post("/v1/retrieve", req).await
    }

    pub async fn simulate(&self, req: &SimulateRequest) -> Result<Report> {
        self.post("/v1/simulate", req).await
    }

    pub async fn compare(&self, req: &CompareRequest) -> Result<Comparison> {
        self.post("/v1/compare", req).await
    }

    pub async fn advantages(&self, req: &AdvantagesRequest) -> Result<AdvantagesResponse> {
        self.post("/v1/advantages", req).await
    }

    pub async fn aggregate(&self, req: &AggregateRequest) -> Result<AggregateResponse> {
        self.post("/v1/aggregate", req).await
    }

    pub async fn beta(&self) -> Result<BetaSnapshot> {
        self.get("/v1/beta").await
    }

    pub async fn advance_beta(&self, batch_mean_answer_reward: f64) -> Result<BetaSnapshot> {
        self.post("/v1/beta/advance", &AdvanceRequest { batch_mean_answer_reward }).await
    }

    pub async fn reset_beta(&self) -> Result<BetaSnapshot> {
        self.post("/v1/beta/reset", &serde_json::Value::Null).await
    }
}

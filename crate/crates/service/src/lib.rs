//! HTTP/JSON service over the trace reward engine.
//!
//! The service keeps ingested corpora (addressed by content digest) and one
//! adaptive-beta session. Scoring work runs on the blocking pool.

use std::collections::HashMap;
use std::future::Future;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tracereward_core::aggregation::{aggregate, AdaptiveBetaState, AggregationKind};
use tracereward_core::api::*;
use tracereward_core::config::RunConfig;
use tracereward_core::embed::{EmbedRequest, EmbedResponse, EmbeddingProvider};
use tracereward_core::grpo::{group_advantages, DEFAULT_EPSILON};
use tracereward_core::harness::{run_batch, EpisodeEnv};
use tracereward_core::parser::{parse_trace, ParseReport};
use tracereward_core::render::render;
use tracereward_core::report::{compare_aggregation, Comparison, Report};
use tracereward_core::rewards::score_report;
use tracereward_core::search::{ingest_corpus_str, parse_dataset_jsonl, Corpus};
use tracereward_core::trace::{build_decomposition_tree, RetrievedDoc};
use tracereward_core::Error;

/// Error returned by every handler, rendered as an [`ErrorBody`].
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn input(msg: impl Into<String>) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, body: ErrorBody { kind: ErrorKind::Input, error: msg.into() } }
    }

    fn internal(msg: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody { kind: ErrorKind::Internal, error: msg.into() },
        }
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, body: ErrorBody { kind: ErrorKind::Input, error: msg.into() } }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        if e.is_input_error() {
            Self::input(e.to_string())
        } else {
            Self::internal(e.to_string())
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self { status: StatusCode::BAD_REQUEST, body: ErrorBody { kind: ErrorKind::Input, error: e.body_text() } }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.body.kind == ErrorKind::Internal {
            tracing::error!(error = %self.body.error, "request failed");
        }
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn body<T: DeserializeOwned>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    Ok(payload?.0)
}

struct StoredCorpus {
    corpus: Corpus,
    provider: Arc<dyn EmbeddingProvider>,
}

pub struct AppState {
    config: RunConfig,
    providers: Mutex<HashMap<String, Arc<dyn EmbeddingProvider>>>,
    corpora: RwLock<HashMap<String, Arc<StoredCorpus>>>,
    session: tokio::sync::Mutex<AdaptiveBetaState>,
}

impl AppState {
    pub fn new(config: RunConfig) -> anyhow::Result<Arc<Self>> {
        config.validate()?;
        let state = Arc::new(Self {
            session: tokio::sync::Mutex::new(config.aggregation.initial_state()),
            config,
            providers: Mutex::new(HashMap::new()),
            corpora: RwLock::new(HashMap::new()),
        });
        // fail at startup on a broken embedder section
        state.provider(&state.config)?;
        Ok(state)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn resolve(&self, cfg: Option<RunConfig>) -> Result<RunConfig, ApiError> {
        match cfg {
            Some(c) => {
                c.validate()?;
                Ok(c)
            }
            None => Ok(self.config.clone()),
        }
    }

    /// One provider per distinct embedder section, so external caches are shared.
    fn provider(&self, cfg: &RunConfig) -> Result<Arc<dyn EmbeddingProvider>, Error> {
        let key = serde_json::to_string(&cfg.embedder).expect("embedder config serializes");
        let mut providers = self.providers.lock().expect("provider lock");
        if let Some(p) = providers.get(&key) {
            return Ok(p.clone());
        }
        let p = cfg.embedder.build()?;
        providers.insert(key, p.clone());
        Ok(p)
    }

    fn corpus(&self, id: &str) -> Result<Arc<StoredCorpus>, ApiError> {
        self.corpora
            .read()
            .expect("corpus lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown corpus {id:?}")))
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/embed", post(embed))
        .route("/v1/parse", post(parse))
        .route("/v1/tree", post(tree))
        .route("/v1/score", post(score))
        .route("/v1/render", post(render_trace))
        .route("/v1/corpora", post(ingest))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/simulate", post(simulate))
        .route("/v1/compare", post(compare))
        .route("/v1/advantages", post(advantages))
        .route("/v1/aggregate", post(aggregate_one))
        .route("/v1/beta", get(beta))
        .route("/v1/beta/advance", post(beta_advance))
        .route("/v1/beta/reset", post(beta_reset))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn health(State(st): State<Arc<AppState>>) -> ApiResult<Health> {
    let provider = st.provider(&st.config)?;
    Ok(Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        provider: provider.fingerprint(),
    }))
}

async fn embed(
    State(st): State<Arc<AppState>>,
    req: Result<Json<EmbedRequest>, JsonRejection>,
) -> ApiResult<EmbedResponse> {
    let req = body(req)?;
    let provider = st.provider(&st.config)?;
    blocking(move || {
        let texts: Vec<&str> = req.texts.iter().map(String::as_str).collect();
        let out = provider.embed(&texts).map_err(Error::from)?;
        Ok(EmbedResponse { embeddings: out.into_iter().map(|e| e.values().to_vec()).collect() })
    })
    .await
    .map(Json)
}

async fn parse(req: Result<Json<TraceRequest>, JsonRejection>) -> ApiResult<ParseReport> {
    let req = body(req)?;
    Ok(Json(parse_trace(&req.raw, &req.question)))
}

async fn tree(
    State(st): State<Arc<AppState>>,
    req: Result<Json<TraceRequest>, JsonRejection>,
) -> ApiResult<TreeResponse> {
    let req = body(req)?;
    let cfg = st.resolve(req.config)?;
    let provider = st.provider(&cfg)?;
    blocking(move || {
        let report = parse_trace(&req.raw, &req.question);
        let tree = build_decomposition_tree(&report.trace, provider.as_ref()).map_err(Error::from)?;
        Ok(TreeResponse { tree, provider: provider.fingerprint() })
    })
    .await
    .map(Json)
}

async fn score(
    State(st): State<Arc<AppState>>,
    req: Result<Json<ScoreRequest>, JsonRejection>,
) -> ApiResult<ScoreResponse> {
    let req = body(req)?;
    let cfg = st.resolve(req.config)?;
    let provider = st.provider(&cfg)?;
    blocking(move || {
        let report = parse_trace(&req.raw, &req.question);
        let breakdown = score_report(&report, &req.golden, provider.as_ref(), &cfg.reward)?;
        let policy = cfg.aggregation.policy();
        Ok(ScoreResponse {
            intermediate: breakdown.intermediate(),
            aggregated: aggregate(&policy, &breakdown),
            aggregation: policy.kind,
            beta: policy.effective_beta(),
            breakdown,
            provider: provider.fingerprint(),
            config_fingerprint: cfg.fingerprint(),
        })
    })
    .await
    .map(Json)
}

async fn render_trace(req: Result<Json<RenderRequest>, JsonRejection>) -> ApiResult<RenderResponse> {
    let req = body(req)?;
    Ok(Json(RenderResponse { raw: render(&req.trace) }))
}

async fn ingest(
    State(st): State<Arc<AppState>>,
    req: Result<Json<CorpusRequest>, JsonRejection>,
) -> ApiResult<CorpusSummary> {
    let req = body(req)?;
    let cfg = st.resolve(req.config)?;
    let provider = st.provider(&cfg)?;
    let fingerprint = provider.fingerprint();
    let mut h = Sha256::new();
    h.update(fingerprint.as_bytes());
    h.update(b"\n");
    h.update(req.jsonl.as_bytes());
    let id = hex::encode(&h.finalize()[..8]);

    let existing = st.corpora.read().expect("corpus lock").get(&id).cloned();
    let stored = match existing {
        Some(s) => s,
        None => {
            let p = provider.clone();
            let corpus = blocking(move || Ok(ingest_corpus_str(&req.jsonl, p.as_ref())?)).await?;
            let stored = Arc::new(StoredCorpus { corpus, provider });
            st.corpora.write().expect("corpus lock").insert(id.clone(), stored.clone());
            tracing::info!(%id, docs = stored.corpus.len(), "corpus ingested");
            stored
        }
    };
    Ok(Json(CorpusSummary {
        id,
        docs: stored.corpus.len(),
        provider: stored.corpus.provider_fingerprint().to_owned(),
        matrix_digest: stored.corpus.matrix_digest(),
    }))
}

async fn retrieve(
    State(st): State<Arc<AppState>>,
    req: Result<Json<RetrieveRequest>, JsonRejection>,
) -> ApiResult<Vec<RetrievedDoc>> {
    let req = body(req)?;
    let stored = st.corpus(&req.corpus_id)?;
    let k = req.k.unwrap_or(st.config.reward.k);
    blocking(move || Ok(stored.corpus.retrieve(stored.provider.as_ref(), &req.query, k)?)).await.map(Json)
}

async fn simulate(
    State(st): State<Arc<AppState>>,
    req: Result<Json<SimulateRequest>, JsonRejection>,
) -> ApiResult<Report> {
    let req = body(req)?;
    let mut cfg = st.resolve(req.config)?;
    if let Some(g) = req.group_size {
        cfg.grpo.group_size = g;
        cfg.validate()?;
    }
    let stored = st.corpus(&req.corpus_id)?;
    let provider = st.provider(&cfg)?;
    if provider.fingerprint() != stored.corpus.provider_fingerprint() {
        return Err(ApiError::input(format!(
            "corpus was embedded with {} but the config selects {}",
            stored.corpus.provider_fingerprint(),
            provider.fingerprint()
        )));
    }
    let records = parse_dataset_jsonl(&req.dataset)?;

    // the session lock is held for the whole batch: one writer at a time
    let mut session = if req.session { Some(st.session.lock().await) } else { None };
    let mut policy = cfg.aggregation.policy();
    if let Some(s) = &session {
        policy.adaptive = **s;
    }
    let kind = req.policy;
    let (report, next) = blocking(move || {
        let env = EpisodeEnv {
            corpus: &stored.corpus,
            provider: provider.as_ref(),
            reward: &cfg.reward,
            aggregation: &policy,
            harness: &cfg.harness,
        };
        let outcome = run_batch(&records, kind, &env, &cfg.grpo)?;
        let report = Report::from_outcome(&outcome, kind, &policy, &cfg, &provider.fingerprint());
        Ok((report, outcome.next_beta_state))
    })
    .await?;
    if let Some(s) = session.as_mut() {
        **s = next;
    }
    Ok(Json(report))
}

async fn compare(
    State(st): State<Arc<AppState>>,
    req: Result<Json<CompareRequest>, JsonRejection>,
) -> ApiResult<Comparison> {
    let req = body(req)?;
    let cfg = st.resolve(req.config)?;
    let policy = cfg.aggregation.policy();
    Ok(Json(compare_aggregation(&req.reports, &policy, req.replay_adaptive)?))
}

async fn advantages(req: Result<Json<AdvantagesRequest>, JsonRejection>) -> ApiResult<AdvantagesResponse> {
    let req = body(req)?;
    let advantages = group_advantages(&req.rewards, req.epsilon.unwrap_or(DEFAULT_EPSILON))?;
    Ok(Json(AdvantagesResponse { advantages }))
}

async fn aggregate_one(
    State(st): State<Arc<AppState>>,
    req: Result<Json<AggregateRequest>, JsonRejection>,
) -> ApiResult<AggregateResponse> {
    let req = body(req)?;
    let cfg = st.resolve(req.config)?;
    let policy = cfg.aggregation.policy();
    let b = &req.breakdown;
    Ok(Json(AggregateResponse {
        weighted_sum: aggregate(&policy.with_kind(AggregationKind::WeightedSum), b),
        residual: aggregate(&policy.with_kind(AggregationKind::Residual), b),
        adaptive_residual: aggregate(&policy.with_kind(AggregationKind::AdaptiveResidual), b),
        beta_t: policy.adaptive.beta_t(),
    }))
}

async fn beta(State(st): State<Arc<AppState>>) -> ApiResult<BetaSnapshot> {
    Ok(Json((*st.session.lock().await).into()))
}

async fn beta_advance(
    State(st): State<Arc<AppState>>,
    req: Result<Json<AdvanceRequest>, JsonRejection>,
) -> ApiResult<BetaSnapshot> {
    let req = body(req)?;
    let mut s = st.session.lock().await;
    *s = s.advance(req.batch_mean_answer_reward)?;
    Ok(Json((*s).into()))
}

async fn beta_reset(State(st): State<Arc<AppState>>) -> ApiResult<BetaSnapshot> {
    let mut s = st.session.lock().await;
    *s = st.config.aggregation.initial_state();
    Ok(Json((*s).into()))
}

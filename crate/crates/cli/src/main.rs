//! `tracereward` command-line client.
//!
//! Each command talks to a service. Without `--server` an in-process
//! service is started on a loopback port for the duration of the command.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or input error.

use std::fmt::Display;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tracereward_client::{Client, ClientError};
use tracereward_core::api::*;
use tracereward_core::config::RunConfig;
use tracereward_core::harness::PolicyKind;
use tracereward_core::report::{Comparison, Report};
use tracereward_core::trace::ReasoningTrace;
use tracereward_service::AppState;

#[derive(Debug, Parser)]
#[command(name = "tracereward", version, about = "Score and simulate decomposition-based search-agent traces")]
struct Cli {
    /// Service to use. An in-process service is started when omitted.
    #[arg(long, global = true)]
    server: Option<String>,
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest a corpus and print its summary.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Score one raw trace. Documents are taken from the trace itself.
    Score {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "")]
        question: String,
        /// Accepted answers.
        #[arg(long, num_args = 1..)]
        golden: Vec<String>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run rollout groups over a dataset and write a report.
    Simulate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "template-decompose")]
        policy: String,
        /// Rollouts per question. Overrides grpo.group_size.
        #[arg(long)]
        group_size: Option<usize>,
        /// Report path. The report goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use and advance the service's adaptive-beta session.
        #[arg(long)]
        session: bool,
    },
    /// Re-aggregate stored rewards under every aggregation policy.
    CompareAgg {
        /// Reports from earlier simulate runs, in batch order.
        #[arg(long = "report", num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long, requires = "corpus")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "template-decompose")]
        policy: String,
        /// Add a column that advances the adaptive state once per report.
        #[arg(long)]
        replay_adaptive: bool,
        #[arg(long)]
        json: bool,
    },
    /// Render an episode, a trace (JSON) or raw trace text in canonical form.
    Render {
        #[arg(long)]
        episode: PathBuf,
    },
    /// Run the service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

/// A failed command and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(e: impl Display) -> Self {
        Self { code: 2, message: e.to_string() }
    }

    fn internal(e: impl Display) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        if e.is_input_error() {
            Self::input(e)
        } else {
            Self::internal(e)
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).map_err(Failure::input)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_env_overrides())
}

fn parse_policy(name: &str) -> Result<PolicyKind, Failure> {
    name.parse()
        .map_err(|_| Failure::input(format!("unknown policy {name:?}; valid policies: {}", PolicyKind::valid_names())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

async fn run(cli: Cli) -> CmdResult {
    let cfg = load_config(cli.config.as_deref())?;
    if let Command::Serve { bind } = cli.command {
        return serve(bind, cfg).await;
    }
    match cli.server {
        Some(url) => dispatch(&Client::new(url), cli.command, cfg).await,
        None => {
            let state = AppState::new(cfg.clone()).map_err(Failure::input)?;
            let listener = TcpListener::bind("127.0.0.1:0").await.map_err(Failure::internal)?;
            let addr = listener.local_addr().map_err(Failure::internal)?;
            let (stop, stopped) = oneshot::channel::<()>();
            let server = tokio::spawn(tracereward_service::serve(listener, state, async {
                let _ = stopped.await;
            }));
            let result = dispatch(&Client::new(format!("http://{addr}")), cli.command, cfg).await;
            let _ = stop.send(());
            let _ = server.await;
            result
        }
    }
}

async fn serve(bind: SocketAddr, cfg: RunConfig) -> CmdResult {
    let state = AppState::new(cfg).map_err(Failure::input)?;
    let listener = TcpListener::bind(bind).await.map_err(|e| Failure::input(format!("binding {bind}: {e}")))?;
    eprintln!("listening on http://{}", listener.local_addr().map_err(Failure::internal)?);
    tracereward_service::serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
    .map_err(Failure::internal)
}

async fn dispatch(client: &Client, command: Command, cfg: RunConfig) -> CmdResult {
    match command {
        Command::BuildIndex { corpus } => build_index(client, &corpus, cfg).await,
        Command::Score { trace, question, golden, json } => score(client, &trace, question, golden, json, cfg).await,
        Command::Simulate { dataset, corpus, policy, group_size, out, session } => {
            let policy = parse_policy(&policy)?;
            let report = simulate(client, &dataset, &corpus, policy, group_size, session, &cfg).await?;
            let b = &report.batch;
            let summary = format!(
                "episodes: {}  mean r_answer: {:.4}  mean aggregated: {:.4}  beta_t: {:.4} -> {:.4}",
                report.episodes.len(),
                b.mean_r_answer,
                b.mean_aggregated,
                b.beta_t,
                b.beta_t_next
            );
            let text = report.to_json() + "\n";
            match out {
                Some(p) => {
                    std::fs::write(&p, text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
                    println!("{summary}");
                }
                None => {
                    // keep stdout parseable as JSON
                    eprintln!("{summary}");
                    print!("{text}");
                }
            }
            Ok(())
        }
        Command::CompareAgg { reports, dataset, corpus, policy, replay_adaptive, json } => {
            let mut loaded = Vec::new();
            for p in &reports {
                loaded.push(Report::from_json(&read(p)?).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?);
            }
            if let (Some(d), Some(c)) = (dataset, corpus) {
                let policy = parse_policy(&policy)?;
                loaded.push(simulate(client, &d, &c, policy, None, false, &cfg).await?);
            }
            if loaded.is_empty() {
                return Err(Failure::input("give --report files or --dataset with --corpus"));
            }
            let cmp = client.compare(&CompareRequest { reports: loaded, config: Some(cfg), replay_adaptive }).await?;
            if json {
                println!("{}", serde_json::to_string_pretty(&cmp).map_err(Failure::internal)?);
            } else {
                print_comparison(&cmp);
            }
            Ok(())
        }
        Command::Render { episode } => render(client, &episode).await,
        Command::Serve { .. } => unreachable!("handled before dispatch"),
    }
}

async fn build_index(client: &Client, corpus: &Path, cfg: RunConfig) -> CmdResult {
    let summary = client.ingest_corpus(&CorpusRequest { jsonl: read(corpus)?, config: Some(cfg) }).await?;
    println!("docs: {}", summary.docs);
    println!("provider: {}", summary.provider);
    println!("matrix: {}", summary.matrix_digest);
    println!("id: {}", summary.id);
    Ok(())
}

async fn score(
    client: &Client,
    trace: &Path,
    question: String,
    golden: Vec<String>,
    json: bool,
    cfg: RunConfig,
) -> CmdResult {
    let resp = client.score(&ScoreRequest { raw: read(trace)?, question, golden, config: Some(cfg) }).await?;
    if json {
        println!("{}", serde_json::to_string_pretty(&resp).map_err(Failure::internal)?);
        return Ok(());
    }
    let b = &resp.breakdown;
    println!("r_answer           {:.6}", b.r_answer);
    println!("avg_answerability  {:.6}", b.avg_answerability);
    println!("avg_decomposition  {:.6}", b.avg_decomposition);
    println!("r_format           {:.6}  (f_format={}, f_retrieval={})", b.r_format, b.f_format, b.f_retrieval);
    println!("intermediate       {:.6}", resp.intermediate);
    println!("aggregated         {:.6}  ({}, beta={:.4})", resp.aggregated, resp.aggregation.name(), resp.beta);
    for leaf in &b.answerability_per_leaf {
        println!("  leaf {}.{}  answerability {:.6}  {}", leaf.level, leaf.index, leaf.answerability, leaf.query);
    }
    for ev in &b.decomposition_per_event {
        println!(
            "  split {}.{} -> {}  coverage {:.6}  split {:.6}  decomp {:.6}",
            ev.level, ev.index, ev.children, ev.r_coverage, ev.r_split, ev.r_decomp
        );
    }
    Ok(())
}

async fn simulate(
    client: &Client,
    dataset: &Path,
    corpus: &Path,
    policy: PolicyKind,
    group_size: Option<usize>,
    session: bool,
    cfg: &RunConfig,
) -> Result<Report, Failure> {
    let dataset = read(dataset)?;
    let summary = client.ingest_corpus(&CorpusRequest { jsonl: read(corpus)?, config: Some(cfg.clone()) }).await?;
    Ok(client
        .simulate(&SimulateRequest {
            corpus_id: summary.id,
            dataset,
            policy,
            group_size,
            config: Some(cfg.clone()),
            session,
        })
        .await?)
}

fn print_comparison(cmp: &Comparison) {
    println!("traces: {}  correct: {}", cmp.traces, cmp.correct);
    println!("{:<28} {:>12} {:>18}", "policy", "mean reward", "punished correct");
    for c in &cmp.columns {
        println!("{:<28} {:>12.6} {:>18}", c.name, c.mean_reward, c.punished_correct);
    }
}

async fn render(client: &Client, path: &Path) -> CmdResult {
    let text = read(path)?;
    let trace = match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(mut v) => {
            let inner = v.get_mut("trace").map(serde_json::Value::take).unwrap_or(v);
            serde_json::from_value::<ReasoningTrace>(inner)
                .map_err(|e| Failure::input(format!("{}: not an episode or trace: {e}", path.display())))?
        }
        Err(_) => client.parse(&TraceRequest { raw: text, question: String::new(), config: None }).await?.trace,
    };
    let out = client.render(&RenderRequest { trace }).await?;
    println!("{}", out.raw);
    Ok(())
}

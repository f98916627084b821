//! End-to-end runs of the `tracereward` binary.

use std::path::PathBuf;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tracereward"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn fx(name: &str) -> String {
    fixture(name).display().to_string()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn score_json_for_fixture_traces() {
    let v = json(&run(&["score", "--trace", &fx("two_leaf.txt"), "--golden", "UniCredit", "--json"]));
    assert_eq!(v["breakdown"]["r_answer"], 1.0);
    assert_eq!(v["breakdown"]["r_format"], 0.2);

    let v = json(&run(&["score", "--trace", &fx("big_fish.txt"), "--golden", "Ars Nova Theater", "--json"]));
    assert_eq!(v["breakdown"]["r_answer"], 0.0);
    assert_eq!(v["breakdown"]["f_retrieval"], true);
}

#[test]
fn empty_trace_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let v = json(&run(&["score", "--trace", empty.to_str().unwrap(), "--golden", "x", "--json"]));
    let b = &v["breakdown"];
    assert_eq!(b["f_format"], false);
    for key in ["r_answer", "r_format", "avg_answerability", "avg_decomposition"] {
        assert_eq!(b[key], 0.0, "{key}");
    }
}

#[test]
fn render_is_a_fixpoint() {
    let first = run(&["render", "--episode", &fx("bank_branches.txt")]);
    assert!(first.status.success());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rendered.txt");
    std::fs::write(&path, &first.stdout).unwrap();
    let second = run(&["render", "--episode", path.to_str().unwrap()]);
    assert_eq!(first.stdout, second.stdout);

    let bare = dir.path().join("bare.txt");
    std::fs::write(&bare, "<think> known </think>\n<answer> Paris </answer>").unwrap();
    let out = run(&["render", "--episode", bare.to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("<answer> Paris </answer>"), "{text}");
    assert!(!text.contains("<information>"));
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[reward]\nk = 0\n").unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["build-index".into(), "--corpus".into(), fx("corpus_dup.jsonl")],
        vec!["build-index".into(), "--corpus".into(), "/no/such/file.jsonl".into()],
        vec![
            "simulate".into(),
            "--dataset".into(),
            fx("dataset.jsonl"),
            "--corpus".into(),
            fx("corpus.jsonl"),
            "--policy".into(),
            "nonsense".into(),
        ],
        vec![
            "--config".into(),
            bad_cfg.display().to_string(),
            "build-index".into(),
            "--corpus".into(),
            fx("corpus.jsonl"),
        ],
        vec!["score".into()],
    ];
    for args in cases {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = run(&["simulate", "--dataset", &fx("dataset.jsonl"), "--corpus", &fx("corpus.jsonl"), "--policy", "x"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("template-decompose"));
}

#[test]
fn simulate_defaults_to_five_rollouts() {
    let v = json(&run(&["simulate", "--dataset", &fx("dataset.jsonl"), "--corpus", &fx("corpus.jsonl")]));
    assert_eq!(v["batch"]["group_size"], 5);
    assert_eq!(v["episodes"].as_array().unwrap().len(), 50);
}

#[test]
fn compare_agg_from_a_fresh_run() {
    let v = json(&run(&["compare-agg", "--dataset", &fx("dataset.jsonl"), "--corpus", &fx("corpus.jsonl"), "--json"]));
    let cols = v["columns"].as_array().unwrap();
    let by_name = |n: &str| cols.iter().find(|c| c["name"] == n).unwrap().clone();
    assert_eq!(by_name("residual")["punished_correct"], 0);
    assert_eq!(by_name("adaptive_residual")["punished_correct"], 0);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn commands_work_against_a_running_server() {
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let _server = Server(
        bin().args(["serve", "--bind", &addr.to_string()]).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap(),
    );
    let url = format!("http://{addr}");
    let deadline = Instant::now() + Duration::from_secs(20);
    let first = loop {
        let out = run(&["--server", &url, "build-index", "--corpus", &fx("corpus.jsonl")]);
        if out.status.success() || Instant::now() > deadline {
            break out;
        }
        std::thread::sleep(Duration::from_millis(100));
    };
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = run(&["--server", &url, "build-index", "--corpus", &fx("corpus.jsonl")]);
    assert_eq!(first.stdout, second.stdout, "same corpus, same id and digest");
    assert!(String::from_utf8_lossy(&first.stdout).contains("docs: 25"));

    let v = json(&run(&["--server", &url, "score", "--trace", &fx("two_leaf.txt"), "--golden", "UniCredit", "--json"]));
    assert_eq!(v["breakdown"]["r_answer"], 1.0);
}

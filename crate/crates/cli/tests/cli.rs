use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_scenparse");

const SMALL_CONFIG: &str = "\
hidden = 16
out_dim = 16
heads = 2
ffn = 32
epochs = 2
batch_size = 16
warmup_steps = 5
seed = 5
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn scenparse")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: TempDir,
    data: PathBuf,
    bank: PathBuf,
    run: PathBuf,
}

impl Workspace {
    fn model(&self) -> PathBuf {
        self.run.join("model.json")
    }

    fn index(&self) -> PathBuf {
        self.run.join("index.json")
    }

    fn artifacts(&self) -> Vec<String> {
        vec![
            "--model".into(),
            s(&self.model()).into(),
            "--bank".into(),
            s(&self.bank).into(),
            "--index".into(),
            s(&self.index()).into(),
        ]
    }

    fn test_utterances(&self) -> Vec<String> {
        std::fs::read_to_string(self.data.join("test.tsv"))
            .unwrap()
            .lines()
            .map(|l| l.split('\t').next().unwrap().to_string())
            .collect()
    }
}

fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let bank = dir.path().join("bank.json");
        let run_dir = dir.path().join("run");
        let config = dir.path().join("config.toml");
        std::fs::write(&config, SMALL_CONFIG).unwrap();

        let summary: Value = serde_json::from_str(&ok(&[
            "gen-data", "--out", s(&data), "--train", "200", "--test", "30", "--seed", "3",
        ]))
        .unwrap();
        assert_eq!(summary["train"], 200);
        assert_eq!(summary["test"], 30);
        for f in ["train.tsv", "eval.tsv", "test.tsv", "registry.tsv", "held_out.txt"] {
            assert!(data.join(f).exists(), "{f} missing");
        }

        ok(&[
            "build-bank",
            "--train",
            s(&data.join("train.tsv")),
            "--test",
            s(&data.join("test.tsv")),
            "--out",
            s(&bank),
        ]);
        let trained: Value = serde_json::from_str(&ok(&[
            "train",
            "--train",
            s(&data.join("train.tsv")),
            "--bank",
            s(&bank),
            "--registry",
            s(&data.join("registry.tsv")),
            "--config",
            s(&config),
            "--out",
            s(&run_dir),
        ]))
        .unwrap();
        assert_eq!(trained["sha256"].as_str().unwrap().len(), 64);
        Workspace {
            _dir: dir,
            data,
            bank,
            run: run_dir,
        }
    })
}

#[test]
fn training_writes_checkpoint_index_and_config() {
    let ws = workspace();
    for f in ["model.json", "index.json", "config.toml"] {
        assert!(ws.run.join(f).exists(), "{f} missing");
    }
    let config = std::fs::read_to_string(ws.run.join("config.toml")).unwrap();
    assert!(config.contains("hidden = 16"));
}

#[test]
fn eval_prints_report_and_writes_it() {
    let ws = workspace();
    let out = ws.run.join("report.json");
    let mut args = vec!["eval".to_string()];
    args.extend(ws.artifacts());
    args.extend(["--data".into(), s(&ws.data.join("test.tsv")).into()]);
    args.extend(["--mode".into(), "oracle_retrieval".into(), "--out".into(), s(&out).into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let printed: Value = serde_json::from_str(&ok(&argv)).unwrap();
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(printed["samples"], 30);
    let em = printed["em"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&em));
}

fn parse_json(ws: &Workspace, utterance: &str) -> Value {
    let mut args = vec!["parse".to_string()];
    args.extend(ws.artifacts());
    args.extend(["--utterance".into(), utterance.into(), "--json".into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    serde_json::from_str(&ok(&argv)).unwrap()
}

#[test]
fn parse_prints_the_filled_frame() {
    let ws = workspace();
    let utterance = &ws.test_utterances()[0];
    let mut args = vec!["parse".to_string()];
    args.extend(ws.artifacts());
    args.extend(["--utterance".into(), utterance.clone()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let frame = ok(&argv);
    assert!(frame.starts_with("[IN:"), "{frame}");
    assert_eq!(frame.trim_end(), parse_json(ws, utterance)["frame"].as_str().unwrap());
}

fn serve(ws: &Workspace, input: &str) -> Vec<Value> {
    let mut child = Command::new(BIN)
        .arg("serve")
        .args(ws.artifacts())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn serve_answers_match_parse() {
    let ws = workspace();
    let utterances: Vec<String> = ws.test_utterances().into_iter().take(3).collect();
    let input: String = utterances
        .iter()
        .map(|u| format!("{}\n", serde_json::json!({"utterance": u, "n": 3})))
        .collect();
    let answers = serve(ws, &input);
    assert_eq!(answers.len(), utterances.len());
    for (u, a) in utterances.iter().zip(&answers) {
        assert_eq!(a, &parse_json(ws, u));
    }
}

#[test]
fn serve_reports_bad_lines_and_keeps_going() {
    let ws = workspace();
    let u = &ws.test_utterances()[1];
    let input = format!(
        "not json\n{{\"utterance\": \"\"}}\n\n{}\n",
        serde_json::json!({"utterance": u})
    );
    let answers = serve(ws, &input);
    assert_eq!(answers.len(), 3);
    assert_eq!(answers[0]["error"]["kind"], "json");
    assert_eq!(answers[1]["error"]["kind"], "empty_utterance");
    assert!(answers[2]["frame"].is_string());
}

#[test]
fn index_mining_and_export_commands_run() {
    let ws = workspace();
    let index = ws.run.join("rebuilt.json");
    let printed: Value = serde_json::from_str(&ok(&[
        "build-index",
        "--model",
        s(&ws.model()),
        "--bank",
        s(&ws.bank),
        "--out",
        s(&index),
    ]))
    .unwrap();
    assert!(printed["scenarios"].as_u64().unwrap() > 1);
    assert_eq!(
        std::fs::read_to_string(&index).unwrap(),
        std::fs::read_to_string(ws.index()).unwrap()
    );

    let negatives = ws.run.join("negatives.jsonl");
    ok(&[
        "mine-negatives",
        "--model",
        s(&ws.model()),
        "--bank",
        s(&ws.bank),
        "--train",
        s(&ws.data.join("train.tsv")),
        "--index",
        s(&ws.index()),
        "--k",
        "2",
        "--out",
        s(&negatives),
    ]);
    assert_eq!(std::fs::read_to_string(&negatives).unwrap().lines().count(), 200);

    let embeddings = ws.run.join("embeddings.tsv");
    let mut args = vec!["export-embeddings".to_string()];
    args.extend(ws.artifacts());
    args.extend(["--data".into(), s(&ws.data.join("test.tsv")).into()]);
    args.extend(["--out".into(), s(&embeddings).into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&argv);
    assert!(embeddings.exists());
}

#[test]
fn commands_announce_config_and_seed_on_stderr() {
    let ws = workspace();
    let mut args = vec!["parse".to_string()];
    args.extend(ws.artifacts());
    args.extend(["--utterance".into(), ws.test_utterances()[0].clone()]);
    let out = Command::new(BIN).args(&args).output().unwrap();
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line: Value = stderr
        .lines()
        .find_map(|l| serde_json::from_str::<Value>(l).ok().filter(|v| v.get("command").is_some()))
        .expect("announcement line");
    assert_eq!(line["command"], "parse");
    assert_eq!(line["seed"], 5);
    assert!(line["config"].is_object());
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let out = run(&["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_prints_error_json() {
    let dir = TempDir::new().unwrap();
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let out = run(&[
        "parse",
        "--model",
        &p("model.json"),
        "--bank",
        &p("bank.json"),
        "--index",
        &p("index.json"),
        "--utterance",
        "hello",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let err: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["error"]["kind"], "missing_artifact");
    assert!(err["error"]["message"].as_str().unwrap().contains("model.json"));
}

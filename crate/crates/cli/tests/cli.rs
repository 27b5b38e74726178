use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_streameval")
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn streameval(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn run_sample(out: &Path, extra: &[&str]) -> Output {
    let stream = repo("configs/sample_stream.jsonl");
    let queries = repo("configs/sample_queries.jsonl");
    let mock = repo("configs/mock.toml");
    let mut args = vec![
        "run",
        "--stream",
        p(&stream),
        "--queries",
        p(&queries),
        "--mock-config",
        p(&mock),
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    streameval(&args)
}

#[test]
fn budget_worked_example() {
    let profiles = repo("configs/profiles.toml");
    let o = streameval(&[
        "budget",
        "--budget",
        "0.5GB",
        "--profile",
        p(&profiles),
        "--model",
        "example-7b",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("per_token_bytes: 64512"), "{text}");
    assert!(text.contains("token_cap: 7750"), "{text}");
}

#[test]
fn run_is_reproducible_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for path in [&a, &b] {
        let o = run_sample(path, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("\"answered\":5"), "{}", stdout(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let records = dir.path().join("records.jsonl");
    let score = |log: &Path| {
        let o = streameval(&[
            "score",
            "--log",
            p(log),
            "--max-fps",
            "8",
            "--model-id",
            "mock",
            "--mem-gb",
            "0.5",
            "--params",
            "7",
            "--scenario",
            "best-answer",
            "--append",
            p(&records),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let first = score(&a);
    assert!(first.contains("\"weights\":\"0.2,0.4,0.2,0.2\""), "{first}");
    assert!(first.contains("\"ttft_s\":0.4"), "{first}");
    assert_eq!(first, score(&b));
    assert_eq!(
        std::fs::read_to_string(&records).unwrap().lines().count(),
        2
    );
}

#[test]
fn adapter_run_needs_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    let o = run_sample(&out, &["--mode", "adapter"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let profiles = repo("configs/profiles.toml");
    let o = run_sample(
        &out,
        &[
            "--mode",
            "adapter",
            "--profile",
            p(&profiles),
            "--model",
            "example-7b",
            "--budget",
            "0.01GB",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(&out).unwrap();
    assert!(
        log.lines()
            .next()
            .unwrap()
            .contains("\"capacity_tokens\":155"),
        "{log}"
    );
    assert!(log.contains("\"kind\":\"bank_write\""));
}

#[test]
fn default_output_directory_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let stream = repo("configs/sample_stream.jsonl");
    let o = Command::new(bin())
        .args(["run", "--stream", p(&stream), "--session-id", "envtest"])
        .env("STREAMEVAL_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("envtest.events.jsonl").exists());
}

#[test]
fn report_formats_are_deterministic() {
    let table = repo("crates/core/data/table1_ovo.jsonl");
    let md = streameval(&["report", "--records", p(&table), "--stability"]);
    assert!(md.status.success(), "{}", stderr(&md));
    assert_eq!(
        stdout(&md),
        stdout(&streameval(&[
            "report",
            "--records",
            p(&table),
            "--stability"
        ]))
    );
    assert!(stdout(&md).contains("| Flash-VStream | 8.00 | 0.12 | 33.15 |"));
    assert!(stdout(&md).contains("Spearman"));

    let csv = streameval(&[
        "report",
        "--records",
        p(&table),
        "--format",
        "csv",
        "--scenario",
        "equal",
    ]);
    let text = stdout(&csv);
    assert_eq!(
        text.lines().next().unwrap(),
        "model_id,max_fps,ttft_s,acc_pct,mem_gb,params_billions,score_equal,rank_equal"
    );
    assert_eq!(text.lines().count(), 13);

    let custom = streameval(&[
        "report",
        "--records",
        p(&table),
        "--format",
        "jsonl",
        "--weights",
        "fps-only=1,0,0,0",
    ]);
    assert!(custom.status.success(), "{}", stderr(&custom));
    assert!(stdout(&custom).contains("fps-only"));
}

#[test]
fn probe_on_mock() {
    let o = streameval(&["probe-maxfps", "--encode-cost", "0.125"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"max_fps\":8.0"), "{}", stdout(&o));
    let o = streameval(&["probe-maxfps", "--encode-cost", "7.14"]);
    assert!(stdout(&o).contains("\"max_fps\":0.14"), "{}", stdout(&o));
}

#[test]
fn conformance_against_mock_subprocess() {
    let cmd = format!("{} mock-worker --encode-cost 0.02", bin());
    let o = streameval(&["conformance", "--worker-cmd", &cmd]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS worker:wall-adapter"));
    assert!(text.contains("PASS worker:virtual-native"));
}

#[test]
fn corpus_only_conformance() {
    let o = streameval(&["conformance"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("corpus: "));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.jsonl");
    let stream = repo("configs/sample_stream.jsonl");

    // Usage error.
    assert_eq!(streameval(&["run"]).status.code(), Some(1));
    assert_eq!(streameval(&["no-such-command"]).status.code(), Some(1));
    // Missing input file.
    assert_eq!(
        streameval(&["run", "--stream", "/nonexistent.jsonl"])
            .status
            .code(),
        Some(1)
    );

    // A worker that answers the hello with an out-of-phase message.
    let rogue = r#"read l; echo '{"type":"frame_encoded","frame_id":9,"t_done":0.0}'; sleep 1"#;
    let o = streameval(&[
        "run",
        "--stream",
        p(&stream),
        "--worker-cmd",
        rogue,
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&out)
        .unwrap()
        .contains("session_aborted"));

    // A worker that exits at once.
    let o = streameval(&[
        "run",
        "--stream",
        p(&stream),
        "--worker-cmd",
        "exec true",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    // Backlog past the queue bound.
    let o = run_sample(&out, &["--encode-cost", "5", "--max-queue", "2"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn wall_session_over_tcp() {
    let queries = repo("configs/sample_queries.jsonl");
    let mut server = Command::new(bin())
        .args([
            "mock-worker",
            "--listen",
            "127.0.0.1:0",
            "--queries",
            p(&queries),
            "--encode-cost",
            "0.01",
        ])
        .args([
            "--query-encode-cost",
            "0.02",
            "--first-token-delay",
            "0.03",
            "--answer-len",
            "2",
            "--inter-token",
            "0.01",
        ])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut server_log = BufReader::new(server.stderr.take().unwrap());
    let mut banner = String::new();
    server_log.read_line(&mut banner).unwrap();
    let addr = banner.trim().rsplit(' ').next().unwrap().to_string();

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tcp.jsonl");
    let stream_file = dir.path().join("short.jsonl");
    std::fs::write(
        &stream_file,
        "{\"synthetic\":{\"frame_count\":4,\"fps\":10.0,\"seed\":3}}\n",
    )
    .unwrap();
    let short_queries = dir.path().join("q.jsonl");
    std::fs::write(
        &short_queries,
        "{\"query_id\":\"rt-1\",\"t0\":0.1,\"text\":\"?\",\"options\":[{\"label\":\"A\",\"text\":\"x\"},{\"label\":\"B\",\"text\":\"y\"}],\"gold\":\"B\"}\n",
    )
    .unwrap();
    let o = streameval(&[
        "run",
        "--stream",
        p(&stream_file),
        "--queries",
        p(&short_queries),
        "--clock",
        "wall",
        "--connect",
        &addr,
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"answered\":1"), "{}", stdout(&o));
    assert!(server.wait().unwrap().success());
    drop(server_log);
}

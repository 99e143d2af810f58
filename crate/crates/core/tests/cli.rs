use std::path::Path;
use std::process::{Command, Output};

fn car(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_car"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn calibrate_then_route() {
    let dir = tempfile::tempdir().unwrap();
    let o = car(dir.path(), &["--out-dir", "o", "--synthetic-calibration", "500", "calibrate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("o/profile.carprofile.json").exists());

    let o = car(
        dir.path(),
        &[
            "--profile",
            "o/profile.carprofile.json",
            "route",
            "--query-id",
            "calibration-000003",
            "--prompt",
            "Read the label.",
        ],
    );
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let keys: Vec<&str> = text.lines().map(|l| l.split(':').next().unwrap()).collect();
    assert_eq!(
        &keys[..10],
        [
            "query_id",
            "short_answer",
            "short_tokens",
            "ppl",
            "posterior_correct",
            "route",
            "long_answer",
            "long_tokens",
            "final_answer",
            "total_tokens"
        ]
    );
}

#[test]
fn exit_code_families() {
    let dir = tempfile::tempdir().unwrap();
    // Configuration: route needs a profile.
    let o = car(dir.path(), &["route", "--query-id", "a", "--prompt", "b"]);
    assert_eq!(code(&o), 2);
    // Configuration: unknown flag.
    assert_eq!(code(&car(dir.path(), &["--frobnicate", "eval"])), 2);

    // Data: malformed dataset line.
    std::fs::write(dir.path().join("bad.jsonl"), "{\"id\": \"x\"\n").unwrap();
    let o = car(dir.path(), &["--dataset", "bad.jsonl", "--policy", "short-only", "eval"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    // Numeric: non-positive variance floor.
    let o = car(dir.path(), &["--variance-floor", "0", "--synthetic-calibration", "50", "calibrate"]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));

    // Backend: nothing listens on the configured port.
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    std::fs::write(
        dir.path().join("http.toml"),
        format!("[http]\nbase_url = \"http://127.0.0.1:{port}\"\nmodel = \"m\"\nretry_budget = 0\n"),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("d.jsonl"),
        "{\"id\": \"q1\", \"prompt\": \"p\", \"reference\": \"r\"}\n",
    )
    .unwrap();
    let o = car(
        dir.path(),
        &["--backend", "http", "--backend-config", "http.toml", "--dataset", "d.jsonl", "--policy", "short-only", "eval"],
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("car-out/partial_records.jsonl").exists());
}

#[test]
fn resume_reuses_finished_records() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["--synthetic-queries", "200", "--policy", "short-only", "--policy", "long-only"];
    let mut args = base.to_vec();
    args.extend(["--out-dir", "a", "eval"]);
    assert_eq!(code(&car(dir.path(), &args)), 0);

    let records = std::fs::read_to_string(dir.path().join("a/records.jsonl")).unwrap();
    let half: String = records.lines().take(150).map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.path().join("partial.jsonl"), half).unwrap();

    let mut args = base.to_vec();
    args.extend(["--out-dir", "b", "eval", "--resume", "partial.jsonl"]);
    assert_eq!(code(&car(dir.path(), &args)), 0);
    for f in ["records.jsonl", "report.txt", "report.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn print_config_shows_resolved_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = car(
        dir.path(),
        &["--print-config", "--seed", "3", "simulate", "--grid-values", "1.28", "--queries", "200"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("\"balance_seed\""));
    assert!(text.contains("param,value,"));
    assert!(dir.path().join("car-out/simulation.csv").exists());
}

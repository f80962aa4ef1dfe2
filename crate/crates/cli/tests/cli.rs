use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set",
    "sim.stations=10",
    "--set",
    "sim.vehicles=80",
    "--set",
    "sim.days=3",
    "--set",
    "train_days=2",
    "--set",
    "recovery.node_budget=5000",
];

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tollsense"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(["--seed", "3"])
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn error_line(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(err.lines().last().expect("an error line")).expect("error line is JSON")
}

#[test]
fn simulate_through_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["simulate", "ingest", "speedmap", "recover", "train", "predict", "evaluate", "stats"] {
        ok(out, &[cmd]);
    }
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    let stamp = lines.next().unwrap();
    assert!(stamp.starts_with("# config_hash=") && stamp.ends_with(" seed=3"), "{stamp}");
    assert_eq!(lines.next(), Some("metric,value"));
    assert!(report.contains("destination_accuracy,"));
    for f in [
        "graph.csv",
        "transactions.csv",
        "context.csv",
        "traces.csv",
        "truth.jsonl",
        "train.csv",
        "test.csv",
        "rejects.csv",
        "speedmap.csv",
        "recovered.csv",
        "predictions.csv",
        "report_emp.csv",
        "stats_entropy.csv",
        "stats_coverage.csv",
        "bundle/run.txt",
    ] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert_eq!(text.lines().next(), Some(stamp), "{f}");
    }
}

#[test]
fn train_requires_recovered_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["simulate"]);
    ok(out, &["ingest"]);
    let e = error_line(&run(out, &["train"]));
    assert_eq!(e["error"], "missing");
    assert!(e["message"].as_str().unwrap().contains("missing recovered trips"), "{e}");
}

#[test]
fn speedmap_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["simulate"]);
    ok(out, &["ingest"]);
    ok(out, &["speedmap"]);
    let first = std::fs::read(out.join("speedmap.csv")).unwrap();
    ok(out, &["speedmap"]);
    assert_eq!(first, std::fs::read(out.join("speedmap.csv")).unwrap());
}

#[test]
fn single_query_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["simulate", "ingest", "recover", "train"] {
        ok(out, &[cmd]);
    }
    ok(out, &["predict", "--vehicle", "V0001", "--entrance", "S02", "--time", "2024-03-05 08:00:00"]);
    let text = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.starts_with("V0001,")));
    assert!(rows.last().unwrap().ends_with(",1"));

    let e = error_line(&run(out, &["predict", "--vehicle", "V1", "--entrance", "NOPE", "--time", "2024-03-05 08:00:00"]));
    assert_eq!(e["error"], "unknown-id");
    let e = error_line(&run(out, &["predict", "--vehicle", "V1", "--entrance", "S02", "--time", "yesterday"]));
    assert_eq!(e["error"], "domain");
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let e = error_line(&run(out, &["simulate", "--set", "sim.stations=abc"]));
    assert_eq!(e["error"], "domain");
    let e = error_line(&run(out, &["simulate", "--set", "recovery.alpha=2"]));
    assert_eq!(e["error"], "domain");
    let e = error_line(&run(out, &["ingest"]));
    assert_eq!(e["error"], "missing");

    let cfg = out.join("run.cfg");
    std::fs::write(&cfg, "sim.stations = 12\nnot a setting\n").unwrap();
    let e = error_line(&run(out, &["simulate", "--config", cfg.to_str().unwrap()]));
    assert_eq!(e["error"], "parse");
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("run.cfg");
    std::fs::write(&cfg, "# small world\nsim.stations=8\nseed=11\n").unwrap();
    ok(out, &["simulate", "--config", cfg.to_str().unwrap()]);
    let graph = std::fs::read_to_string(out.join("graph.csv")).unwrap();
    // --seed on the command line wins over the file.
    assert!(graph.lines().next().unwrap().ends_with("seed=3"));
    // SMALL's sim.stations=10 is applied after the file.
    assert_eq!(graph.lines().filter(|l| l.starts_with("station,")).count(), 10);
}

use std::path::Path;
use std::process::Command;

use pentarag::model::TrainingTriple;
use pentarag::router::TraceRecord;
use pentarag_cli::commands;
use pentarag_cli::ServiceConfig;

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn default_simulation_report_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    let config = ServiceConfig::default();
    let paths = commands::simulate(&config, None, 2000, &logs).unwrap();
    assert_eq!(paths.len(), 9);
    for p in &paths {
        let records: Vec<TraceRecord> = lines(p).iter().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 1000);
    }

    let out = dir.path().join("report");
    let summary = commands::report(&logs, &out, &config.cost_model, false).unwrap();
    assert_eq!(summary.sessions, 9);
    assert_eq!(summary.queries, 9000);
    assert!(summary.weighted_gpu_s_per_query > 0.0 && summary.weighted_qps > 0.0);

    let warm = lines(&out.join("warmup.csv"));
    assert_eq!(warm[0], "index,mean,q1,q3");
    assert!(warm.len() - 1 <= 100);
    let means: Vec<f64> = warm[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]));

    let usage = lines(&out.join("usage.csv"));
    assert_eq!(usage.len(), 6);
    let total: f64 = usage[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let boxplot = lines(&out.join("boxplot.csv"));
    assert_eq!(boxplot[0], "layer,count,q1,median,q3,p5,p95");
    assert!(boxplot.iter().any(|l| l.starts_with("fixed_kv,")));
    let counted: usize = boxplot[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counted, 9000);

    let summary_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary_json["queries"], 9000);

    let triples_path = dir.path().join("triples.jsonl");
    let n = commands::export_triples(&logs, &triples_path, false).unwrap();
    let triples: Vec<TrainingTriple> =
        lines(&triples_path).iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(triples.len(), n);
    assert!(n > 0);
    assert!(triples.iter().all(|t| !t.context.is_empty()));
}

#[test]
fn ingest_three_lines() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    std::fs::write(
        &corpus,
        "{\"id\":\"1\",\"text\":\"one\",\"source\":\"s\"}\n{\"id\":\"2\",\"text\":\"two\",\"source\":\"s\"}\n{\"id\":\"3\",\"text\":\"three\",\"source\":\"s\"}\n",
    )
    .unwrap();
    let snap = dir.path().join("snap");
    let r = commands::ingest(&ServiceConfig::default(), &corpus, &snap).unwrap();
    assert_eq!((r.added, r.total), (3, 3));
}

#[test]
fn malformed_corpus_line_is_reported_or_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    std::fs::write(&corpus, "{\"id\":\"1\",\"text\":\"one\",\"source\":\"s\"}\n{oops\n").unwrap();
    let snap = dir.path().join("snap");
    let err = commands::ingest(&ServiceConfig::default(), &corpus, &snap).unwrap_err();
    assert!(format!("{err:#}").contains("corpus.jsonl:2:"), "{err:#}");
    let lenient = ServiceConfig {
        lenient: true,
        ..Default::default()
    };
    assert_eq!(commands::ingest(&lenient, &corpus, &snap).unwrap().added, 1);
}

#[test]
fn binary_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_pentarag");
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).current_dir(d).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["gen-dataset", "--size", "300", "--seed", "4", "--out", "data.jsonl"]);
    assert_eq!(lines(&d.join("data.jsonl")).len(), 300);
    let printed = run(&[
        "simulate",
        "--dataset",
        "data.jsonl",
        "--sessions",
        "2",
        "--queries-per-session",
        "120",
        "--seed",
        "4",
        "--out",
        "logs",
    ]);
    assert_eq!(printed.lines().count(), 2);
    assert_eq!(lines(&d.join("logs/session_1.jsonl")).len(), 120);
    let summary: serde_json::Value = serde_json::from_str(&run(&["report", "logs", "--out", "report"])).unwrap();
    assert_eq!(summary["queries"], 240);
    run(&["export-triples", "logs/session_0.jsonl", "--out", "triples.jsonl"]);
    assert!(!lines(&d.join("triples.jsonl")).is_empty());

    std::fs::write(d.join("bad.toml"), "nonsense = 1\n").unwrap();
    let out = Command::new(bin)
        .args(["--config", "bad.toml", "gen-dataset", "--out", "x.jsonl"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!out.status.success());
}

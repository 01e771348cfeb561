use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cyclemarket::data::{bundled_fixture, MarketConfig};
use cyclemarket::realtime::RealTimeMode;
use cyclemarket_cli::plot::{line_chart, Series};
use cyclemarket_cli::run::execute;
use cyclemarket_cli::sweep::{run_grid, Axis, Fixed, Strategy, SweepSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cyclemarket"))
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn run_writes_summary_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "run",
        "--config",
        repo("configs/default.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_csv(&out.join("run_summary.csv"));
    assert_eq!(summary[0], ["metric", "participant", "hour", "value"]);
    assert!(summary.iter().any(|r| r[0] == "social_cost"));
    assert_eq!(
        summary.iter().filter(|r| r[0] == "lambda_dayahead").count(),
        48
    );
    assert_eq!(
        summary.iter().filter(|r| r[0] == "lambda_realtime").count(),
        24
    );
    let trace = read_csv(&out.join("trace.csv"));
    assert_eq!(trace.len(), 25);
    assert_eq!(
        &trace[0][..4],
        ["hour", "timestamp", "forecast_mw", "actual_mw"]
    );
    assert!(trace[0].iter().any(|h| h == "soc0_end"));
}

#[test]
fn unaware_flag_switches_the_mechanism() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("u");
    let o = run(&["run", "--mode", "unaware", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = read_csv(&out.join("trace.csv"));
    let col = trace[0]
        .iter()
        .position(|h| h == "realtime_converged")
        .unwrap();
    assert_eq!(trace.len(), 25);
    assert!(trace[1..]
        .iter()
        .all(|r| r[col] == "true" || r[col] == "false"));
}

#[test]
fn missing_demand_file_fails_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "run",
        "--demand",
        "/no/such/demand.csv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/demand.csv"));
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(run(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["run"]).status.code(), Some(2));
    assert_eq!(
        run(&["run", "--mode", "sideways", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn invalid_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"generators":[{"c":-3}]}"#).unwrap();
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("generators[0].c"));
}

#[test]
fn single_point_sweep_equals_a_run() {
    let base = MarketConfig::case_study(50.0, 150.0);
    let sc = bundled_fixture();
    let spec = SweepSpec {
        axis: Axis::B,
        values: vec![200.0],
        fixed: Fixed {
            e: Some(50.0),
            b: None,
        },
        strategies: Strategy::ALL.to_vec(),
    };
    let rows = run_grid(&spec, &base, &sc, RealTimeMode::Aware, 1).unwrap();
    let direct = execute(
        &MarketConfig::case_study(50.0, 200.0),
        &sc,
        RealTimeMode::Aware,
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].social_cost, direct.record.social_cost);
    assert_eq!(rows[1].social_cost, direct.check.cost_lower);
    assert_eq!(rows[2].storage_profit, direct.check.profit_periodic);
}

#[test]
fn sweep_output_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"axis":"E","values":[10,40,70],"fixed":{"B":150}}"#,
    )
    .unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("w{workers}"));
        let o = run(&[
            "sweep",
            "--spec",
            spec.to_str().unwrap(),
            "--parallel",
            workers,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((
            fs::read(out.join("sweep.csv")).unwrap(),
            fs::read(out.join("social_cost.svg")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let rows = read_csv(&dir.path().join("w1/sweep.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows[1..].iter().all(|r| r[4] == "ok"));
}

#[test]
fn bad_sweep_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for (i, text) in [
        r#"{"axis":"B","values":[]}"#,
        r#"{"axis":"B","values":[-1]}"#,
        r#"{"axis":"C","values":[1]}"#,
    ]
    .iter()
    .enumerate()
    {
        let spec = dir.path().join(format!("s{i}.json"));
        fs::write(&spec, text).unwrap();
        let o = run(&[
            "sweep",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(1), "{text}");
    }
}

#[test]
fn chart_is_well_formed_svg() {
    let s = vec![
        Series {
            name: "a<b".into(),
            points: vec![(1.0, 2.0), (2.0, f64::NAN), (3.0, 5.0)],
        },
        Series {
            name: "flat".into(),
            points: vec![(1.0, 3.0), (3.0, 3.0)],
        },
    ];
    let svg = line_chart("t", "x", "y", &s);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("a&lt;b"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches("<circle").count(), 4);
    assert_eq!(svg, line_chart("t", "x", "y", &s));
}

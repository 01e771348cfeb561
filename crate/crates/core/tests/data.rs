use std::io::Write;

use cyclemarket::data::{
    build_params, bundled_fixture, load_demand_csv, parse_demand_csv, synthetic_fixture,
    write_demand_csv, MarketConfig, BUNDLED_FIXTURE_CSV,
};
use cyclemarket::realtime::RealTimeMode;
use cyclemarket::MarketError;

fn parse(text: &str) -> cyclemarket::Result<cyclemarket::data::DemandScenario> {
    parse_demand_csv(text.as_bytes())
}

#[test]
fn bundled_fixture_shape() {
    let sc = bundled_fixture();
    assert_eq!(sc.horizon(), 48);
    assert_eq!(sc.realized(), 24);
    assert_eq!(sc.residual().len(), 24);
    assert_eq!(sc.timestamps[0].to_string(), "2023-08-25 00:00:00");
    assert_eq!(sc.timestamps[47].to_string(), "2023-08-26 23:00:00");
    for t in 0..24 {
        assert!((sc.actual[t] - (sc.forecast[t] + sc.residual()[t])).abs() < 1e-12);
        assert!((sc.actual[t] / sc.forecast[t] - 1.0).abs() <= 0.05 + 1e-5);
    }
}

#[test]
fn bundled_file_matches_its_generator() {
    assert_eq!(bundled_fixture(), synthetic_fixture());
    let mut out = Vec::new();
    write_demand_csv(&synthetic_fixture(), &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), BUNDLED_FIXTURE_CSV);
}

#[test]
fn round_trip_through_a_file() {
    let sc = synthetic_fixture();
    let mut f = tempfile::NamedTempFile::new().unwrap();
    write_demand_csv(&sc, &mut f).unwrap();
    f.flush().unwrap();
    assert_eq!(load_demand_csv(f.path()).unwrap(), sc);
}

#[test]
fn columns_may_come_in_any_order() {
    let sc = parse(
        "actual_mw,timestamp,extra,forecast_mw\n5,2024-01-01 00:00,x,4\n,2024-01-01 01:00,y,6\n",
    )
    .unwrap();
    assert_eq!(sc.forecast, vec![4.0, 6.0]);
    assert_eq!(sc.actual, vec![5.0]);
}

#[test]
fn out_of_order_rows_name_the_row() {
    let text = "timestamp,forecast_mw,actual_mw\n2024-01-01T00:00:00,1,1\n2024-01-01T02:00:00,1,1\n2024-01-01T01:00:00,1,1\n";
    match parse(text) {
        Err(MarketError::Parse { row, .. }) => assert_eq!(row, 2),
        other => panic!("{other:?}"),
    }
    let shuffled =
        "timestamp,forecast_mw,actual_mw\n2024-01-01T01:00:00,1,1\n2024-01-01T00:00:00,1,1\n";
    let err = parse(shuffled).unwrap_err();
    assert!(matches!(err, MarketError::Parse { row: 2, .. }), "{err}");
    assert!(err.to_string().contains("row 2"));
}

#[test]
fn malformed_input_is_rejected() {
    let cases = [
        ("timestamp,forecast_mw\n2024-01-01T00:00:00,1\n", 0),
        ("timestamp,forecast_mw,actual_mw\nyesterday,1,1\n", 1),
        (
            "timestamp,forecast_mw,actual_mw\n2024-01-01T00:00:00,abc,1\n",
            1,
        ),
        (
            "timestamp,forecast_mw,actual_mw\n2024-01-01T00:00:00,,1\n",
            1,
        ),
        (
            "timestamp,forecast_mw,actual_mw\n2024-01-01T00:00:00,1,\n2024-01-01T01:00:00,1,2\n",
            2,
        ),
        (
            "timestamp,forecast_mw,actual_mw\n2024-01-01T00:00:00,inf,1\n",
            1,
        ),
        ("timestamp,forecast_mw,actual_mw\n", 0),
    ];
    for (text, want) in cases {
        match parse(text) {
            Err(MarketError::Parse { row, .. }) => assert_eq!(row, want, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn negative_demand_is_accepted_as_net_load() {
    let sc = parse(
        "timestamp,forecast_mw,actual_mw\n2024-01-01T00:00:00,-5,-3\n2024-01-01T01:00:00,2,\n",
    )
    .unwrap();
    assert_eq!(sc.forecast, vec![-5.0, 2.0]);
    assert_eq!(sc.actual, vec![-3.0]);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_demand_csv("/definitely/not/here.csv").unwrap_err();
    assert!(matches!(err, MarketError::Io { .. }));
    assert!(err.to_string().contains("/definitely/not/here.csv"));
}

#[test]
fn case_study_parameters() {
    let sc = bundled_fixture();
    let p = build_params(&MarketConfig::case_study(50.0, 150.0), &sc).unwrap();
    let s = &p.storages[0];
    assert!((s.b - 3.93).abs() < 1e-12);
    assert_eq!((s.u_min, s.u_max), (-12.5, 12.5));
    assert_eq!(s.x0, 0.5);
    let peak = sc
        .forecast
        .iter()
        .chain(&sc.actual)
        .cloned()
        .fold(f64::MIN, f64::max);
    assert_eq!(p.generators[0].g_max, peak);
    assert_eq!(p.generators[0].c, 20.0);

    let mut one_hour = MarketConfig::case_study(50.0, 150.0);
    one_hour.storages[0].duration_hours = 1.0;
    let p = build_params(&one_hour, &sc).unwrap();
    assert_eq!((p.storages[0].u_min, p.storages[0].u_max), (-50.0, 50.0));
}

#[test]
fn config_json_defaults_and_strict_keys() {
    let cfg = MarketConfig::from_json(
        r#"{"generators":[{"c":20}],"storages":[{"capacity_E":50,"capital_cost_B":150}]}"#,
    )
    .unwrap();
    assert_eq!(cfg, MarketConfig::case_study(50.0, 150.0));
    assert_eq!(cfg.mode, RealTimeMode::Aware);

    let unknown =
        MarketConfig::from_json(r#"{"generators":[{"c":20,"colour":"red"}]}"#).unwrap_err();
    assert!(unknown.to_string().contains("colour"), "{unknown}");

    let bad = MarketConfig::from_json(
        r#"{"generators":[{"c":-1}],"storages":[{"capacity_E":0,"capital_cost_B":150,"x0":2}],"binding_hours":60}"#,
    )
    .unwrap_err();
    match bad {
        MarketError::Validation(v) => assert_eq!(v.len(), 4, "{v:?}"),
        other => panic!("{other:?}"),
    }

    let unaware = MarketConfig::from_json(r#"{"generators":[{"c":20}],"mode":"unaware"}"#).unwrap();
    assert_eq!(unaware.mode, RealTimeMode::Unaware);
    assert!(unaware.storages.is_empty());
}

#[test]
fn shipped_config_is_the_case_study() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json");
    assert_eq!(
        MarketConfig::load(path).unwrap(),
        MarketConfig::case_study(50.0, 150.0)
    );
}

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cyclemarket::data::{build_params, DemandScenario, MarketConfig, TIMESTAMP_FORMAT};
use cyclemarket::realtime::RealTimeMode;
use cyclemarket::simulation::{
    planner_bounds, sandwich, simulate, SandwichCheck, SimulationConfig, SimulationRecord,
};
use cyclemarket::MarketParams;

use crate::num;

/// Outcome of one full two-stage run plus its planner benchmarks.
pub struct RunOutput {
    pub record: SimulationRecord,
    pub check: SandwichCheck,
    pub params: MarketParams,
}

pub fn execute(
    config: &MarketConfig,
    scenario: &DemandScenario,
    mode: RealTimeMode,
) -> Result<RunOutput> {
    let params = build_params(config, scenario)?;
    let sim = SimulationConfig {
        mode,
        ..SimulationConfig::from_market(config)
    };
    let record = simulate(scenario, &params, &sim).context("two-stage simulation failed")?;
    let bounds = planner_bounds(scenario, &params, &sim).context("planner benchmark failed")?;
    let check = sandwich(&record, &bounds, &params, 1e-6);
    Ok(RunOutput {
        record,
        check,
        params,
    })
}

/// `run`: writes `run_summary.csv` and `trace.csv` into `out`.
pub fn cmd_run(
    config: &MarketConfig,
    scenario: &DemandScenario,
    mode: RealTimeMode,
    out: &Path,
) -> Result<RunOutput> {
    let res = execute(config, scenario, mode)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_summary(&res, &out.join("run_summary.csv"))?;
    write_trace(&res, scenario, &out.join("trace.csv"))?;
    Ok(res)
}

fn write_summary(res: &RunOutput, path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["metric", "participant", "hour", "value"])?;
    let rec = &res.record;
    let st = &rec.settlement;
    let mut row =
        |m: &str, p: String, h: String, v: f64| w.write_record([m.to_string(), p, h, num(v)]);
    row("social_cost", String::new(), String::new(), rec.social_cost)?;
    row(
        "planner_cost_non_periodic",
        String::new(),
        String::new(),
        res.check.cost_lower,
    )?;
    row(
        "planner_cost_periodic",
        String::new(),
        String::new(),
        res.check.cost_upper,
    )?;
    row(
        "planner_storage_profit_non_periodic",
        String::new(),
        String::new(),
        res.check.profit_non_periodic,
    )?;
    row(
        "planner_storage_profit_periodic",
        String::new(),
        String::new(),
        res.check.profit_periodic,
    )?;
    row(
        "cost_within_planner_bounds",
        String::new(),
        String::new(),
        f64::from(u8::from(res.check.cost_holds)),
    )?;
    row(
        "profit_within_planner_bounds",
        String::new(),
        String::new(),
        f64::from(u8::from(res.check.profit_holds)),
    )?;
    row(
        "merchandising_surplus",
        String::new(),
        String::new(),
        st.merchandising_surplus,
    )?;
    for (j, _) in res.params.generators.iter().enumerate() {
        let p = format!("g{j}");
        row(
            "payment_dayahead",
            p.clone(),
            String::new(),
            st.dayahead_generator_payments[j],
        )?;
        row(
            "payment_realtime",
            p.clone(),
            String::new(),
            st.realtime_generator_payments[j],
        )?;
        row("cost", p.clone(), String::new(), st.generator_costs[j])?;
        row("profit", p, String::new(), st.generator_profits[j])?;
    }
    for (s, _) in res.params.storages.iter().enumerate() {
        let p = format!("s{s}");
        row(
            "payment_dayahead",
            p.clone(),
            String::new(),
            st.dayahead_storage_payments[s],
        )?;
        row(
            "payment_realtime",
            p.clone(),
            String::new(),
            st.realtime_storage_payments[s],
        )?;
        row("cost", p.clone(), String::new(), st.storage_costs[s])?;
        row("profit", p, String::new(), st.storage_profits[s])?;
    }
    for (t, l) in rec.da_result.lambda.iter().enumerate() {
        row("lambda_dayahead", String::new(), t.to_string(), *l)?;
    }
    for (h, step) in rec.rt_steps.iter().enumerate() {
        row(
            "lambda_realtime",
            String::new(),
            h.to_string(),
            step.lambda_r[0],
        )?;
    }
    for (h, step) in rec.rt_steps.iter().enumerate() {
        row(
            "realtime_iterations",
            String::new(),
            h.to_string(),
            step.iterations as f64,
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(res: &RunOutput, scenario: &DemandScenario, path: &Path) -> Result<()> {
    let rec = &res.record;
    let ng = res.params.generators.len();
    let ns = res.params.storages.len();
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header: Vec<String> = [
        "hour",
        "timestamp",
        "forecast_mw",
        "actual_mw",
        "lambda_dayahead",
        "lambda_realtime",
    ]
    .map(String::from)
    .to_vec();
    for j in 0..ng {
        header.extend([
            format!("g{j}_dayahead"),
            format!("g{j}_realtime"),
            format!("g{j}_total"),
        ]);
    }
    for s in 0..ns {
        header.extend([
            format!("u{s}_dayahead"),
            format!("u{s}_realtime"),
            format!("u{s}_total"),
            format!("soc{s}_end"),
        ]);
    }
    header.extend([
        "realtime_iterations".to_string(),
        "realtime_converged".to_string(),
    ]);
    w.write_record(&header)?;
    for (h, step) in rec.rt_steps.iter().enumerate() {
        let mut r = vec![
            h.to_string(),
            scenario.timestamps[h].format(TIMESTAMP_FORMAT).to_string(),
            num(scenario.forecast[h]),
            num(scenario.actual[h]),
            num(rec.da_result.lambda[h]),
            num(step.lambda_r[0]),
        ];
        for j in 0..ng {
            r.extend([
                num(rec.da_result.g[j][h]),
                num(step.g_r[j][0]),
                num(rec.total_g[j][h]),
            ]);
        }
        for s in 0..ns {
            r.extend([
                num(rec.da_result.u[s][h]),
                num(step.u_r[s][0]),
                num(rec.total_u[s][h]),
                num(rec.soc[s][h + 1]),
            ]);
        }
        r.extend([step.iterations.to_string(), step.converged.to_string()]);
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    headline, read_rows, require, write_file, DailyRow, EstimateRow, ExperimentConfig, MetricRow,
    SeparabilityRow, SignificanceRow, DAILY_ESTIMATES_FILE, LIFTS_FILE, METHOD_DPM,
    METHOD_PARAMETRIC, METRICS_FILE, SEPARABILITY_FILE, SIGNIFICANCE_FILE,
};
use crate::error::{Error, Result};

pub const DAILY_TREND_FILE: &str = "daily_trend.csv";
pub const REPORT_FILE: &str = "report.md";

fn cell(v: Option<f64>) -> String {
    v.filter(|v| v.is_finite()).map_or(String::new(), |v| v.to_string())
}

fn md(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.prec$}"),
        _ => "n/a".into(),
    }
}

/// Builds `daily_trend.csv` and `report.md` from the evaluation artifacts.
/// Reads only files, so re-running it gives identical output.
pub fn run_report(config: &ExperimentConfig) -> Result<()> {
    let out = &config.output_dir;
    let daily: Vec<DailyRow> = read_rows(&require(out.join(DAILY_ESTIMATES_FILE), "evaluate")?)?;
    let lifts: Vec<EstimateRow> = read_rows(&require(out.join(LIFTS_FILE), "evaluate")?)?;
    let metrics: Vec<MetricRow> = read_rows(&require(out.join(METRICS_FILE), "evaluate")?)?;
    let sep: Vec<SeparabilityRow> = read_rows(&require(out.join(SEPARABILITY_FILE), "evaluate")?)?;
    let sig: Vec<SignificanceRow> = read_rows(&require(out.join(SIGNIFICANCE_FILE), "evaluate")?)?;

    let head = headline(lifts.iter().filter(|r| r.method == METHOD_DPM).map(|r| r.estimator))
        .ok_or_else(|| Error::InvalidInput("evaluation artifacts hold no DPM estimates".into()))?;
    let has_baseline = daily.iter().any(|d| d.method == METHOD_PARAMETRIC);

    // (policy, day) -> (truth, dpm, baseline), in first-seen policy order.
    let mut policies: Vec<String> = Vec::new();
    let mut trend: BTreeMap<(usize, usize), [Option<f64>; 3]> = BTreeMap::new();
    for d in daily.iter().filter(|d| d.estimator == head) {
        let slot = match d.method.as_str() {
            METHOD_DPM => 1,
            METHOD_PARAMETRIC => 2,
            _ => continue,
        };
        let pi = match policies.iter().position(|p| *p == d.policy) {
            Some(i) => i,
            None => {
                policies.push(d.policy.clone());
                policies.len() - 1
            }
        };
        let e = trend.entry((pi, d.day)).or_default();
        e[0] = d.truth_lift;
        e[slot] = d.estimated_lift;
    }
    let trend_path = out.join(DAILY_TREND_FILE);
    let file = std::fs::File::create(&trend_path).map_err(|e| Error::io(&trend_path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["policy", "day", "truth_lift", "dpm_lift"];
    if has_baseline {
        header.push("baseline_lift");
    }
    w.write_record(&header)?;
    for ((pi, day), v) in &trend {
        let mut rec = vec![policies[*pi].clone(), day.to_string(), cell(v[0]), cell(v[1])];
        if has_baseline {
            rec.push(cell(v[2]));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&trend_path, e))?;

    let mut s = String::new();
    let _ = writeln!(s, "# Off-policy evaluation report\n");
    let _ = writeln!(
        s,
        "Headline estimator: `{}`. Market price: `{}`. Cap: {}th percentile, {}. Lift: {}. t-test errors: {}.\n",
        head.name(),
        config.dpm.market_price_mode,
        config.estimators.cap_percentile,
        config.estimators.cap_scope,
        config.metrics.lift_mode,
        config.metrics.ttest_mode,
    );
    let pooled: Vec<&MetricRow> = metrics
        .iter()
        .filter(|m| m.scope == "all" && m.unit == "day")
        .collect();
    if pooled.is_empty() {
        let _ = writeln!(s, "No ground truth was available, so accuracy metrics are not computed.\n");
    } else {
        let _ = writeln!(s, "## Daily accuracy\n");
        let _ = writeln!(s, "| method | estimator | MDA (%) | RMSE (pp) | Pearson | days |");
        let _ = writeln!(s, "|---|---|---:|---:|---:|---:|");
        for m in pooled {
            let _ = writeln!(
                s,
                "| {} | {} | {:.1} | {:.3} | {} | {} |",
                m.method,
                m.estimator.name(),
                m.mda,
                m.rmse,
                md(m.pearson, 3),
                m.n_pairs
            );
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "## Policies\n");
    let mut cols = vec!["policy", "true lift (%)", "DPM-OPE lift (%)"];
    if has_baseline {
        cols.push("Parametric-OPE lift (%)");
    }
    cols.extend(["DPM-OPE ESS", "direction"]);
    let _ = writeln!(s, "| {} |", cols.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(cols.len()));
    for p in &policies {
        let find = |method: &str| lifts.iter().find(|r| r.method == method && r.estimator == head && r.policy == *p);
        let dpm = find(METHOD_DPM);
        let verdict = match sep.iter().find(|x| x.policy == *p) {
            Some(x) if x.separable => {
                if x.overall_lift > 0.0 { "up" } else { "down" }.to_string()
            }
            Some(x) => format!(
                "low separability ({} lift {:.2}%, daily p = {}): no direction claimed",
                x.basis,
                x.overall_lift,
                md(x.daily_p_value, 3)
            ),
            None => "n/a".into(),
        };
        let mut rec = vec![
            p.clone(),
            md(dpm.and_then(|r| r.truth_lift), 2),
            md(dpm.map(|r| r.estimated_lift), 2),
        ];
        if has_baseline {
            rec.push(md(find(METHOD_PARAMETRIC).map(|r| r.estimated_lift), 2));
        }
        rec.push(md(dpm.map(|r| r.ess), 0));
        rec.push(verdict);
        let _ = writeln!(s, "| {} |", rec.join(" | "));
    }
    let _ = writeln!(s);

    if !sig.is_empty() {
        let _ = writeln!(s, "## Paired t-tests on daily errors\n");
        let _ = writeln!(s, "| comparison | n | t | p |");
        let _ = writeln!(s, "|---|---:|---:|---:|");
        for t in &sig {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                t.comparison,
                t.n,
                md(t.t_statistic, 3),
                md(t.p_value, 4)
            );
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "Daily trend data: `{DAILY_TREND_FILE}`.");
    write_file(&out.join(super::report::REPORT_FILE), s)
}

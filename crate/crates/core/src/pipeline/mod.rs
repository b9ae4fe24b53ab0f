//! Experiment orchestration: simulate, evaluate, report and ablate.

mod ablation;
mod config;
mod report;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dpm::{
    fit_dpm_segmented, select_segmentation, ApsTable, DpmSettings, MarketPriceMode, ScoreSource,
    SegmentationChoice,
};
use crate::error::{Error, Result};
use crate::estimators::{
    deterministic_ips, estimate, estimate_by_unit, weights_from_aps, Estimator, PolicyEstimate,
    PropensityModel,
};
use crate::logdata::{ingest_csv, ColumnMapping, Dataset, SegmentAssignment};
use crate::metrics::{mda, one_sample_ttest, paired_ttest, pearson, rmse, unit_errors, LiftPair};
use crate::parametric::{fit_parametric_segmented, ParametricApsTable};
use crate::simulator::{GroundTruth, SimulationWorld};

pub use ablation::{
    ablation_text, run_ablate, run_ablation, AblationResult, AblationRow, AblationSpec, AblationTest,
    ABLATION_CSV, ABLATION_TXT,
};
pub use config::{
    apply_override, BaselineConfig, DataConfig, DpmConfig, EstimatorConfig, ExperimentConfig,
    MetricsConfig,
};
pub use report::{run_report, DAILY_TREND_FILE, REPORT_FILE};

pub const METHOD_DPM: &str = "DPM-OPE";
pub const METHOD_PARAMETRIC: &str = "Parametric-OPE";
pub const METHOD_DETERMINISTIC: &str = "Deterministic";

pub const LOGS_FILE: &str = "logs.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const WORLD_META_FILE: &str = "world_meta.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const BASELINE_ESTIMATES_FILE: &str = "baseline_estimates.csv";
pub const DAILY_ESTIMATES_FILE: &str = "daily_estimates.csv";
pub const LIFTS_FILE: &str = "lifts.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SEPARABILITY_FILE: &str = "separability.csv";
pub const SIGNIFICANCE_FILE: &str = "significance.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const REJECTED_FILE: &str = "rejected_rows.csv";

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, producer })
    }
}

pub(crate) fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Writes the simulated logs, ground truth and world metadata.
pub fn run_simulate(config: &ExperimentConfig) -> Result<()> {
    let sim = config.simulation.as_ref().ok_or_else(|| {
        Error::Config("simulate needs a [simulation] section".into())
    })?;
    let out = &config.output_dir;
    ensure_dir(out)?;
    let world = SimulationWorld::generate(sim)?;
    let data = world.dataset()?;
    data.write_csv(out.join(LOGS_FILE))?;
    world.ground_truth().write_csv(out.join(GROUND_TRUTH_FILE))?;
    write_file(&out.join(WORLD_META_FILE), world.meta_json()? + "\n")?;
    write_file(&out.join(EFFECTIVE_CONFIG_FILE), config.to_toml()?)?;
    log::info!(
        "simulated {} auctions, logged CTR {:.6}",
        data.len(),
        data.logged_ctr()
    );
    Ok(())
}

/// Fitted propensity models for the logging and every evaluation policy.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub segmentation: SegmentationChoice,
    pub assignment: SegmentAssignment,
    pub logging: ApsTable,
    pub eval: Vec<ApsTable>,
    pub baseline: Option<(ParametricApsTable, Vec<ParametricApsTable>)>,
}

/// DPM tables for the logging policy and each evaluation policy. Runner-up
/// prices exist only in the logging score space, so evaluation policies are
/// always fitted on their scores of the shown ads.
pub fn fit_policy_tables(
    data: &Dataset,
    assignment: &SegmentAssignment,
    settings: &DpmSettings,
) -> Result<(ApsTable, Vec<ApsTable>)> {
    let logging = fit_dpm_segmented(data, assignment, &ScoreSource::Logging, settings)?;
    let eval_settings = DpmSettings {
        market_price_mode: MarketPriceMode::WinnerProxy,
        ..*settings
    };
    let eval = data
        .policy_names()
        .iter()
        .map(|p| {
            let mut t = fit_dpm_segmented(data, assignment, &ScoreSource::Eval(p.clone()), &eval_settings)?;
            if settings.market_price_mode == MarketPriceMode::RunnerUp {
                t.assumptions.push(
                    "runner-up prices are logged for the logging policy only; this policy uses winner_proxy"
                        .into(),
                );
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((logging, eval))
}

pub fn fit_models(data: &Dataset, config: &ExperimentConfig) -> Result<FittedModels> {
    let segmentation = select_segmentation(
        data,
        &config.dpm.segmentation_candidates,
        &ScoreSource::Logging,
    )?;
    if segmentation.degenerate {
        log::warn!("logging scores have no variance; segmentation choice is arbitrary");
    }
    let assignment = data.segment_assignment(segmentation.feature);
    let (logging, eval) = fit_policy_tables(data, &assignment, &config.dpm.settings())?;
    for t in std::iter::once(&logging).chain(&eval) {
        t.check_invariants()?;
    }
    let baseline = if config.baseline.enabled {
        let fams = &config.baseline.families;
        let log_p = fit_parametric_segmented(data, &assignment, &logging, fams)?;
        let eval_p = eval
            .iter()
            .map(|t| fit_parametric_segmented(data, &assignment, t, fams))
            .collect::<Result<Vec<_>>>()?;
        Some((log_p, eval_p))
    } else {
        None
    };
    Ok(FittedModels {
        segmentation,
        assignment,
        logging,
        eval,
        baseline,
    })
}

/// Overall estimate of one policy by one method and estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub method: String,
    pub estimator: Estimator,
    pub policy: String,
    pub value: f64,
    pub logging_value: f64,
    pub estimated_lift: f64,
    pub truth_lift: Option<f64>,
    pub n: usize,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyRow {
    pub method: String,
    pub estimator: Estimator,
    pub policy: String,
    pub day: usize,
    pub value: f64,
    pub logging_value: f64,
    pub estimated_lift: Option<f64>,
    pub truth_lift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub estimator: Estimator,
    /// A policy name, or `all` when pooled.
    pub scope: String,
    /// `day` or `policy`.
    pub unit: String,
    pub n_pairs: usize,
    pub mda: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub separable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityRow {
    pub policy: String,
    /// `truth` when ground truth is available, else `estimate`.
    pub basis: String,
    pub overall_lift: f64,
    pub daily_p_value: Option<f64>,
    pub separable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub comparison: String,
    pub scope: String,
    pub error_mode: String,
    pub n: usize,
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
}

/// Everything `evaluate` computes, before it is written out.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub models: FittedModels,
    pub estimates: Vec<PolicyEstimate>,
    pub baseline_estimates: Vec<PolicyEstimate>,
    pub overall: Vec<EstimateRow>,
    pub daily: Vec<DailyRow>,
    pub metrics: Vec<MetricRow>,
    pub separability: Vec<SeparabilityRow>,
    pub significance: Vec<SignificanceRow>,
    pub notes: Vec<String>,
}

impl Evaluation {
    pub fn metric(&self, method: &str, estimator: Estimator, scope: &str, unit: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| {
            m.method == method && m.estimator == estimator && m.scope == scope && m.unit == unit
        })
    }

    pub fn daily_pairs(&self, method: &str, estimator: Estimator, policy: Option<&str>) -> Vec<LiftPair> {
        daily_pairs(&self.daily, method, estimator, policy)
    }
}

fn daily_pairs(
    daily: &[DailyRow],
    method: &str,
    estimator: Estimator,
    policy: Option<&str>,
) -> Vec<LiftPair> {
    daily
        .iter()
        .filter(|d| d.method == method && d.estimator == estimator)
        .filter(|d| policy.is_none_or(|p| d.policy == p))
        .filter_map(|d| {
            Some(LiftPair::new(
                format!("{}/{}", d.policy, d.day),
                d.truth_lift?,
                d.estimated_lift?,
            ))
        })
        .collect()
}

struct DayCtx {
    days: Vec<u32>,
    n_days: usize,
    logging_daily: Vec<f64>,
    logging_overall: f64,
}

impl DayCtx {
    fn new(data: &Dataset) -> Self {
        let days = data.day_indices();
        let n_days = days.iter().max().map_or(0, |d| *d as usize + 1);
        let (mut imps, mut clicks) = (vec![0u64; n_days], vec![0u64; n_days]);
        for (d, r) in days.iter().zip(data.rewards()) {
            imps[*d as usize] += 1;
            clicks[*d as usize] += u64::from(*r);
        }
        DayCtx {
            logging_daily: imps
                .iter()
                .zip(&clicks)
                .map(|(i, c)| if *i == 0 { 0.0 } else { *c as f64 / *i as f64 })
                .collect(),
            days,
            n_days,
            logging_overall: data.logged_ctr(),
        }
    }
}

struct TruthView {
    overall: Vec<f64>,
    daily: Vec<Vec<f64>>,
}

fn truth_view(
    truth: Option<&GroundTruth>,
    data: &Dataset,
    n_days: usize,
    notes: &mut Vec<String>,
) -> Result<Option<TruthView>> {
    let Some(truth) = truth else { return Ok(None) };
    if truth.n_days() != n_days {
        return Err(Error::InvalidInput(format!(
            "ground truth has {} days, logs have {n_days}",
            truth.n_days()
        )));
    }
    let mut overall = Vec::new();
    let mut daily = Vec::new();
    for p in data.policy_names() {
        match truth.lifts(p) {
            Ok((o, d)) => {
                overall.push(o);
                daily.push(d);
            }
            Err(Error::UndefinedLift) => {
                notes.push(format!("true lift of `{p}` is undefined (logging has no clicks)"));
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Some(TruthView { overall, daily }))
}

/// Fits every model and runs every configured estimator on `data`.
pub fn evaluate_dataset(
    data: &Dataset,
    truth: Option<&GroundTruth>,
    config: &ExperimentConfig,
) -> Result<Evaluation> {
    let models = fit_models(data, config)?;
    let estimators = config.estimators.parsed()?;
    let cap = config.estimators.cap();
    let lift_mode = config.metrics.lift_mode;
    let ctx = DayCtx::new(data);
    let mut notes = Vec::new();
    let tv = truth_view(truth, data, ctx.n_days, &mut notes)?;
    let lift = |v: f64, v0: f64| lift_mode.lift(v, v0).ok();
    let segs = Some((models.assignment.of_record.as_slice(), models.assignment.n_segments()));

    let mut estimates = Vec::new();
    let mut baseline_estimates = Vec::new();
    let mut overall = Vec::new();
    let mut daily = Vec::new();

    let mut methods: Vec<(&str, &dyn PropensityModel, Vec<&dyn PropensityModel>)> = vec![(
        METHOD_DPM,
        &models.logging as &dyn PropensityModel,
        models.eval.iter().map(|t| t as &dyn PropensityModel).collect(),
    )];
    if let Some((log_p, eval_p)) = &models.baseline {
        methods.push((
            METHOD_PARAMETRIC,
            log_p as &dyn PropensityModel,
            eval_p.iter().map(|t| t as &dyn PropensityModel).collect(),
        ));
    }

    for (pi, policy) in data.policy_names().iter().enumerate() {
        let truth_overall = tv.as_ref().map(|t| t.overall[pi]);
        let truth_daily = |d: usize| tv.as_ref().map(|t| t.daily[pi][d]);
        for (method, log_model, eval_models) in &methods {
            let samples = weights_from_aps(data, policy, eval_models[pi], *log_model)?;
            for e in estimators.iter().filter(|e| **e != Estimator::DeterministicIps) {
                let est = estimate(policy, &samples, *e, cap, segs)?;
                overall.push(EstimateRow {
                    method: method.to_string(),
                    estimator: *e,
                    policy: policy.clone(),
                    value: est.value,
                    logging_value: ctx.logging_overall,
                    estimated_lift: lift(est.value, ctx.logging_overall).unwrap_or(f64::NAN),
                    truth_lift: truth_overall,
                    n: est.n,
                    ess: est.effective_sample_size,
                });
                if *method == METHOD_DPM {
                    estimates.push(est);
                } else {
                    baseline_estimates.push(est);
                }
                let per_day = estimate_by_unit(policy, &samples, *e, cap, segs, &ctx.days, ctx.n_days)?;
                for (d, de) in per_day.iter().enumerate() {
                    daily.push(DailyRow {
                        method: method.to_string(),
                        estimator: *e,
                        policy: policy.clone(),
                        day: d,
                        value: de.value,
                        logging_value: ctx.logging_daily[d],
                        estimated_lift: lift(de.value, ctx.logging_daily[d]),
                        truth_lift: truth_daily(d),
                    });
                }
            }
        }
        if estimators.contains(&Estimator::DeterministicIps) {
            match deterministic_ips(data, policy) {
                Ok(est) => {
                    let agree = data.agreement(pi).expect("checked by deterministic_ips");
                    overall.push(EstimateRow {
                        method: METHOD_DETERMINISTIC.into(),
                        estimator: Estimator::DeterministicIps,
                        policy: policy.clone(),
                        value: est.value,
                        logging_value: ctx.logging_overall,
                        estimated_lift: lift(est.value, ctx.logging_overall).unwrap_or(f64::NAN),
                        truth_lift: truth_overall,
                        n: est.n,
                        ess: est.effective_sample_size,
                    });
                    estimates.push(est);
                    let mut hits = vec![0u64; ctx.n_days];
                    let mut imps = vec![0u64; ctx.n_days];
                    for ((d, a), r) in ctx.days.iter().zip(agree).zip(data.rewards()) {
                        imps[*d as usize] += 1;
                        hits[*d as usize] += u64::from(*a && *r);
                    }
                    for d in 0..ctx.n_days {
                        let value = hits[d] as f64 / imps[d].max(1) as f64;
                        daily.push(DailyRow {
                            method: METHOD_DETERMINISTIC.into(),
                            estimator: Estimator::DeterministicIps,
                            policy: policy.clone(),
                            day: d,
                            value,
                            logging_value: ctx.logging_daily[d],
                            estimated_lift: lift(value, ctx.logging_daily[d]),
                            truth_lift: truth_daily(d),
                        });
                    }
                }
                Err(Error::Unsupported(msg)) => {
                    if pi == 0 {
                        notes.push(format!("deterministic IPS skipped: {msg}"));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    let separability = separability(data, &tv, &overall, &daily, &config.metrics)?;
    let metrics = metric_rows(data, &overall, &daily, &separability);
    let significance = significance_rows(&daily, &estimators, config);
    if tv.is_none() && truth.is_none() {
        notes.push("no ground truth: metrics are not computed".into());
    }
    Ok(Evaluation {
        models,
        estimates,
        baseline_estimates,
        overall,
        daily,
        metrics,
        separability,
        significance,
        notes,
    })
}

pub(crate) fn headline(estimators: impl IntoIterator<Item = Estimator>) -> Option<Estimator> {
    let all: Vec<Estimator> = estimators.into_iter().collect();
    [Estimator::CappedSnips, Estimator::Snips, Estimator::Ips, Estimator::DeterministicIps]
        .into_iter()
        .find(|e| all.contains(e))
}

/// Whether each policy's lift is large and consistent enough for a
/// directional claim: overall lift of at least `min_separable_lift` percent
/// and daily lifts whose mean differs from zero at `separability_alpha`.
fn separability(
    data: &Dataset,
    tv: &Option<TruthView>,
    overall: &[EstimateRow],
    daily: &[DailyRow],
    cfg: &MetricsConfig,
) -> Result<Vec<SeparabilityRow>> {
    let head = headline(overall.iter().map(|r| r.estimator));
    data.policy_names()
        .iter()
        .enumerate()
        .map(|(pi, policy)| {
            let (basis, o, days): (&str, f64, Vec<f64>) = match tv {
                Some(t) => ("truth", t.overall[pi], t.daily[pi].clone()),
                None => {
                    let o = overall
                        .iter()
                        .find(|r| r.method == METHOD_DPM && Some(r.estimator) == head && r.policy == *policy)
                        .map_or(f64::NAN, |r| r.estimated_lift);
                    let d = daily
                        .iter()
                        .filter(|r| r.method == METHOD_DPM && Some(r.estimator) == head && r.policy == *policy)
                        .filter_map(|r| r.estimated_lift)
                        .collect();
                    ("estimate", o, d)
                }
            };
            let (p, consistent) = match one_sample_ttest(&days) {
                Ok(t) => (Some(t.p_value), t.p_value < cfg.separability_alpha),
                // Identical daily lifts: consistent exactly when nonzero.
                Err(_) => (None, days.len() > 1 && days.iter().all(|d| *d == days[0] && *d != 0.0)),
            };
            Ok(SeparabilityRow {
                policy: policy.clone(),
                basis: basis.into(),
                overall_lift: o,
                daily_p_value: p,
                separable: o.abs() >= cfg.min_separable_lift && consistent,
            })
        })
        .collect()
}

fn metric_rows(
    data: &Dataset,
    overall: &[EstimateRow],
    daily: &[DailyRow],
    sep: &[SeparabilityRow],
) -> Vec<MetricRow> {
    let mut keys: Vec<(String, Estimator)> = Vec::new();
    for r in overall {
        if !keys.iter().any(|(m, e)| *m == r.method && *e == r.estimator) {
            keys.push((r.method.clone(), r.estimator));
        }
    }
    let separable = |p: &str| sep.iter().any(|s| s.policy == p && s.separable);
    let mut rows = Vec::new();
    let mut push = |method: &str, e: Estimator, scope: &str, unit: &str, pairs: &[LiftPair], sep: bool| {
        if let (Ok(m), Ok(r)) = (mda(pairs), rmse(pairs)) {
            rows.push(MetricRow {
                method: method.into(),
                estimator: e,
                scope: scope.into(),
                unit: unit.into(),
                n_pairs: pairs.len(),
                mda: m,
                rmse: r,
                pearson: pearson(pairs).ok(),
                separable: sep,
            });
        }
    };
    for (method, e) in &keys {
        for policy in data.policy_names() {
            let pairs = daily_pairs(daily, method, *e, Some(policy));
            push(method, *e, policy, "day", &pairs, separable(policy));
        }
        let all_sep = data.policy_names().iter().all(|p| separable(p));
        let pooled = daily_pairs(daily, method, *e, None);
        push(method, *e, "all", "day", &pooled, all_sep);
        let per_policy: Vec<LiftPair> = overall
            .iter()
            .filter(|r| r.method == *method && r.estimator == *e)
            .filter_map(|r| Some(LiftPair::new(r.policy.clone(), r.truth_lift?, r.estimated_lift)))
            .collect();
        push(method, *e, "all", "policy", &per_policy, all_sep);
    }
    rows
}

fn significance_rows(
    daily: &[DailyRow],
    estimators: &[Estimator],
    config: &ExperimentConfig,
) -> Vec<SignificanceRow> {
    let mode = config.metrics.ttest_mode;
    type Cell<'a> = (&'a str, Estimator);
    let mut comparisons: Vec<(Cell, Cell)> = Vec::new();
    for e in estimators.iter().filter(|e| **e != Estimator::DeterministicIps) {
        comparisons.push(((METHOD_DPM, *e), (METHOD_PARAMETRIC, *e)));
    }
    let weighted: Vec<Estimator> = Estimator::WEIGHTED
        .into_iter()
        .filter(|e| estimators.contains(e))
        .collect();
    for w in weighted.windows(2) {
        comparisons.push(((METHOD_DPM, w[0]), (METHOD_DPM, w[1])));
    }
    comparisons
        .into_iter()
        .filter_map(|(a, b)| {
            let pa = daily_pairs(daily, a.0, a.1, None);
            let pb = daily_pairs(daily, b.0, b.1, None);
            if pa.is_empty() || pa.len() != pb.len() {
                return None;
            }
            let t = paired_ttest(&unit_errors(&pa, mode), &unit_errors(&pb, mode)).ok();
            Some(SignificanceRow {
                comparison: format!("{} {} vs {} {}", a.0, a.1, b.0, b.1),
                scope: "all days".into(),
                error_mode: mode.to_string(),
                n: pa.len(),
                t_statistic: t.map(|t| t.t_statistic),
                p_value: t.map(|t| t.p_value),
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.prec$}"),
        _ => "n/a".into(),
    }
}

/// Human-readable method-by-metric table plus per-policy estimates.
pub fn summary_text(eval: &Evaluation, config: &ExperimentConfig) -> String {
    let mut s = String::new();
    let seg = &eval.models.segmentation;
    let _ = writeln!(
        s,
        "segmentation: {} (R^2 = {:.4}{})",
        seg.feature,
        seg.r_squared,
        if seg.degenerate { ", degenerate" } else { "" }
    );
    let _ = writeln!(
        s,
        "binning: {}; market price: {}; cap: {}th percentile, {}",
        config.dpm.binning(),
        config.dpm.market_price_mode,
        config.estimators.cap_percentile,
        config.estimators.cap_scope
    );
    let _ = writeln!(
        s,
        "lift: {}; t-test errors: {}",
        config.metrics.lift_mode, config.metrics.ttest_mode
    );
    for a in &eval.models.logging.assumptions {
        let _ = writeln!(s, "assumption: {a}");
    }
    if eval.models.baseline.is_some() {
        let _ = writeln!(s, "assumption: parametric baseline segmented and binned like the DPM");
    }
    for n in &eval.notes {
        let _ = writeln!(s, "note: {n}");
    }
    let _ = writeln!(s);

    let pooled: Vec<&MetricRow> = eval
        .metrics
        .iter()
        .filter(|m| m.scope == "all" && m.unit == "day")
        .collect();
    if !pooled.is_empty() {
        let _ = writeln!(
            s,
            "{:<16} {:<18} {:>8} {:>10} {:>8}",
            "method", "estimator", "MDA(%)", "RMSE(pp)", "Pearson"
        );
        for m in pooled {
            let _ = writeln!(
                s,
                "{:<16} {:<18} {:>8.1} {:>10.3} {:>8}",
                m.method,
                m.estimator.name(),
                m.mda,
                m.rmse,
                fmt_opt(m.pearson, 3)
            );
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(
        s,
        "{:<16} {:<16} {:<18} {:>12} {:>12} {:>12} {:>10}",
        "policy", "method", "estimator", "value", "est_lift(%)", "true_lift(%)", "ess"
    );
    for r in &eval.overall {
        let _ = writeln!(
            s,
            "{:<16} {:<16} {:<18} {:>12.6} {:>12.3} {:>12} {:>10.1}",
            r.policy,
            r.method,
            r.estimator.name(),
            r.value,
            r.estimated_lift,
            fmt_opt(r.truth_lift, 3),
            r.ess
        );
    }
    let _ = writeln!(s);
    for sep in &eval.separability {
        let verdict = if sep.separable {
            "separable".to_string()
        } else {
            "LOW SEPARABILITY: direction not claimed".to_string()
        };
        let _ = writeln!(
            s,
            "{}: {} lift {:.3}%, daily p = {} -> {}",
            sep.policy,
            sep.basis,
            sep.overall_lift,
            fmt_opt(sep.daily_p_value, 4),
            verdict
        );
    }
    if !eval.significance.is_empty() {
        let _ = writeln!(s);
        for t in &eval.significance {
            let _ = writeln!(
                s,
                "paired t-test ({} errors, n = {}): {}: t = {}, p = {}",
                t.error_mode,
                t.n,
                t.comparison,
                fmt_opt(t.t_statistic, 3),
                fmt_opt(t.p_value, 4)
            );
        }
    }
    s
}

fn model_file(prefix: &str, policy: &str) -> String {
    let safe: String = policy
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{prefix}_{safe}.json")
}

/// Loads the dataset and ground truth named by `config`.
pub fn load_inputs(config: &ExperimentConfig) -> Result<(Dataset, Option<GroundTruth>)> {
    let out = &config.output_dir;
    match (&config.simulation, &config.data) {
        (Some(_), _) => {
            let logs = require(out.join(LOGS_FILE), "simulate")?;
            let truth = require(out.join(GROUND_TRUTH_FILE), "simulate")?;
            let ingested = ingest_csv(&logs, &ColumnMapping::default())?;
            if !ingested.rejected.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "{} rows of simulated logs were rejected",
                    ingested.rejected.len()
                )));
            }
            Ok((ingested.dataset, Some(GroundTruth::read_csv(truth)?)))
        }
        (None, Some(d)) => {
            let ingested = ingest_csv(&d.logs, &d.columns)?;
            ensure_dir(out)?;
            if !ingested.rejected.is_empty() {
                log::warn!("{} rows quarantined", ingested.rejected.len());
                ingested.write_rejections(out.join(REJECTED_FILE))?;
            }
            let truth = d.ground_truth.as_ref().map(GroundTruth::read_csv).transpose()?;
            Ok((ingested.dataset, truth))
        }
        (None, None) => Err(Error::Config("exactly one of [simulation] or [data] must be set".into())),
    }
}

/// Writes every artifact of an evaluation into `config.output_dir`.
pub fn write_evaluation(eval: &Evaluation, config: &ExperimentConfig) -> Result<()> {
    let out = &config.output_dir;
    let models = out.join("models");
    ensure_dir(&models)?;
    write_file(&models.join(model_file("dpm", "logging")), eval.models.logging.to_json()?)?;
    for t in &eval.models.eval {
        write_file(&models.join(model_file("dpm", &t.policy_name)), t.to_json()?)?;
    }
    if let Some((log_p, eval_p)) = &eval.models.baseline {
        write_file(&models.join(model_file("parametric", "logging")), log_p.to_json()?)?;
        for t in eval_p {
            write_file(&models.join(model_file("parametric", &t.policy_name)), t.to_json()?)?;
        }
    }
    crate::estimators::write_estimates_file(out.join(ESTIMATES_FILE), &eval.estimates)?;
    let baseline_path = out.join(BASELINE_ESTIMATES_FILE);
    if eval.models.baseline.is_some() {
        crate::estimators::write_estimates_file(&baseline_path, &eval.baseline_estimates)?;
    } else if baseline_path.exists() {
        fs::remove_file(&baseline_path).map_err(|e| Error::io(&baseline_path, e))?;
    }
    write_rows(&out.join(LIFTS_FILE), &eval.overall)?;
    write_rows(&out.join(DAILY_ESTIMATES_FILE), &eval.daily)?;
    write_rows(&out.join(METRICS_FILE), &eval.metrics)?;
    write_rows(&out.join(SEPARABILITY_FILE), &eval.separability)?;
    write_rows(&out.join(SIGNIFICANCE_FILE), &eval.significance)?;
    write_file(&out.join(SUMMARY_FILE), summary_text(eval, config))?;
    write_file(&out.join(EFFECTIVE_CONFIG_FILE), config.to_toml()?)?;
    Ok(())
}

/// Fits, estimates and scores, then writes the evaluation artifacts.
pub fn run_evaluate(config: &ExperimentConfig) -> Result<Evaluation> {
    let (data, truth) = load_inputs(config)?;
    let eval = evaluate_dataset(&data, truth.as_ref(), config)?;
    write_evaluation(&eval, config)?;
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{PolicySpec, SimConfig};

    fn config(policies: Vec<PolicySpec>) -> ExperimentConfig {
        ExperimentConfig {
            output_dir: "unused".into(),
            simulation: Some(SimConfig {
                n_auctions: 20_000,
                base_ctr: 0.05,
                policies,
                ..SimConfig::default()
            }),
            data: None,
            dpm: DpmConfig::default(),
            baseline: BaselineConfig::default(),
            estimators: EstimatorConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }

    #[test]
    fn identical_policy_estimates_no_lift() {
        let cfg = config(vec![PolicySpec::perturbed("twin", 2.5).with_stream("logging")]);
        let (data, truth) = crate::simulator::simulate(cfg.simulation.as_ref().unwrap()).unwrap();
        let eval = evaluate_dataset(&data, Some(&truth), &cfg).unwrap();
        for r in &eval.overall {
            assert!(r.estimated_lift.abs() < 1e-9, "{r:?}");
        }
        assert!(!eval.separability[0].separable);
        assert!(!eval.metric(METHOD_DPM, Estimator::Snips, "twin", "day").unwrap().separable);
        assert!(summary_text(&eval, &cfg).contains("LOW SEPARABILITY"));
    }

    #[test]
    fn every_estimator_and_method_is_reported() {
        let cfg = config(vec![PolicySpec::perturbed("a", 0.3), PolicySpec::perturbed("b", 4.0)]);
        let (data, truth) = crate::simulator::simulate(cfg.simulation.as_ref().unwrap()).unwrap();
        let eval = evaluate_dataset(&data, Some(&truth), &cfg).unwrap();
        // Two policies times (3 weighted estimators x 2 methods + deterministic).
        assert_eq!(eval.overall.len(), 2 * 7);
        assert_eq!(eval.daily.len(), 14 * 2 * 7);
        assert!(eval.metric(METHOD_PARAMETRIC, Estimator::CappedSnips, "all", "day").is_some());
        for r in eval.overall.iter().filter(|r| r.estimator == Estimator::DeterministicIps) {
            assert!(r.value <= data.logged_ctr());
        }
    }
}

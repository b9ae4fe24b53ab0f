use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ensure_dir, fit_policy_tables, write_file, write_rows, ExperimentConfig};
use crate::dpm::{select_segmentation, BinningStrategy, ScoreSource};
use crate::error::{Error, Result};
use crate::estimators::{estimate, weights_from_aps, Estimator, PropensityModel};
use crate::metrics::{mda, paired_ttest, pearson, rmse, unit_errors, LiftPair};
use crate::simulator::SimulationWorld;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TXT: &str = "ablation.txt";

/// The grid of an ablation: every binning crossed with every estimator,
/// each evaluated on `replications` simulated worlds (seed, seed + 1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub bins: Vec<BinningStrategy>,
    pub estimators: Vec<Estimator>,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub binning: String,
    pub estimator: Estimator,
    pub n_units: usize,
    pub mda: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTest {
    pub a: String,
    pub b: String,
    pub n: usize,
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub tests: Vec<AblationTest>,
    /// `replication/policy` for each unit.
    pub units: Vec<String>,
    /// Lift pairs per row, aligned with `units`.
    pub pairs: Vec<Vec<LiftPair>>,
}

impl AblationResult {
    pub fn row(&self, binning: &BinningStrategy, estimator: Estimator) -> Option<&AblationRow> {
        let b = binning.to_string();
        self.rows.iter().find(|r| r.binning == b && r.estimator == estimator)
    }

    pub fn test(&self, a: &str, b: &str) -> Option<&AblationTest> {
        self.tests.iter().find(|t| t.a == a && t.b == b)
    }
}

pub(crate) fn row_label(binning: &str, estimator: Estimator) -> String {
    format!("{binning}/{}", estimator.name())
}

/// Runs the grid in memory. Units are (replication, policy) pairs scored by
/// their overall lift against the realized ground truth.
pub fn run_ablation(config: &ExperimentConfig, spec: &AblationSpec) -> Result<AblationResult> {
    let sim = config
        .simulation
        .as_ref()
        .ok_or_else(|| Error::Config("ablate needs a [simulation] section".into()))?;
    if spec.bins.is_empty() || spec.estimators.is_empty() || spec.replications == 0 {
        return Err(Error::Config(
            "ablation needs at least one binning, one estimator and one replication".into(),
        ));
    }
    if spec.estimators.contains(&Estimator::DeterministicIps) {
        return Err(Error::Config(
            "the ablation grid covers weighted estimators only".into(),
        ));
    }
    let cap = config.estimators.cap();
    let lift_mode = config.metrics.lift_mode;
    let grid: Vec<(BinningStrategy, Estimator)> = spec
        .bins
        .iter()
        .flat_map(|b| spec.estimators.iter().map(move |e| (*b, *e)))
        .collect();
    let mut pairs: Vec<Vec<LiftPair>> = vec![Vec::new(); grid.len()];
    let mut units = Vec::new();

    for r in 0..spec.replications {
        let mut rep = sim.clone();
        rep.seed = sim.seed.wrapping_add(r as u64);
        let world = SimulationWorld::generate(&rep)?;
        let data = world.dataset()?;
        let truth = world.ground_truth();
        drop(world);
        let logged = data.logged_ctr();
        let choice = select_segmentation(&data, &config.dpm.segmentation_candidates, &ScoreSource::Logging)?;
        let assignment = data.segment_assignment(choice.feature);
        let segs = Some((assignment.of_record.as_slice(), assignment.n_segments()));
        let truth_lifts: Vec<f64> = data
            .policy_names()
            .iter()
            .map(|p| truth.lifts(p).map(|(o, _)| o))
            .collect::<Result<_>>()?;
        for p in data.policy_names() {
            units.push(format!("{r}/{p}"));
        }
        for b in &spec.bins {
            let mut settings = config.dpm.settings();
            settings.binning = *b;
            let (logging, eval) = fit_policy_tables(&data, &assignment, &settings)?;
            for (pi, policy) in data.policy_names().iter().enumerate() {
                let samples = weights_from_aps(
                    &data,
                    policy,
                    &eval[pi] as &dyn PropensityModel,
                    &logging as &dyn PropensityModel,
                )?;
                for e in &spec.estimators {
                    let est = estimate(policy, &samples, *e, cap, segs)?;
                    let cell = grid.iter().position(|g| g == &(*b, *e)).expect("grid cell");
                    pairs[cell].push(LiftPair::new(
                        format!("{r}/{policy}"),
                        truth_lifts[pi],
                        lift_mode.lift(est.value, logged)?,
                    ));
                }
            }
        }
        log::info!("ablation replication {} of {} done", r + 1, spec.replications);
    }

    let rows = grid
        .iter()
        .zip(&pairs)
        .map(|((b, e), p)| {
            Ok(AblationRow {
                binning: b.to_string(),
                estimator: *e,
                n_units: p.len(),
                mda: mda(p)?,
                rmse: rmse(p)?,
                pearson: pearson(p).ok(),
                mean_error: p.iter().map(|x| x.estimated_lift - x.truth_lift).sum::<f64>() / p.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // Neighbouring estimators under each binning, then each binning against
    // the first one under each estimator.
    let mode = config.metrics.ttest_mode;
    let mut comparisons = Vec::new();
    for (bi, _) in spec.bins.iter().enumerate() {
        for ei in 1..spec.estimators.len() {
            let base = bi * spec.estimators.len();
            comparisons.push((base + ei - 1, base + ei));
        }
    }
    for ei in 0..spec.estimators.len() {
        for bi in 1..spec.bins.len() {
            comparisons.push((ei, bi * spec.estimators.len() + ei));
        }
    }
    let tests = comparisons
        .into_iter()
        .map(|(i, j)| {
            let t = paired_ttest(&unit_errors(&pairs[i], mode), &unit_errors(&pairs[j], mode)).ok();
            AblationTest {
                a: row_label(&rows[i].binning, rows[i].estimator),
                b: row_label(&rows[j].binning, rows[j].estimator),
                n: pairs[i].len(),
                t_statistic: t.map(|t| t.t_statistic),
                p_value: t.map(|t| t.p_value),
            }
        })
        .collect();
    Ok(AblationResult {
        rows,
        tests,
        units,
        pairs,
    })
}

pub fn ablation_text(result: &AblationResult, config: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} units; lift: {}; t-test errors: {}",
        result.units.len(),
        config.metrics.lift_mode,
        config.metrics.ttest_mode
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<10} {:<14} {:>8} {:>12} {:>10} {:>12}",
        "binning", "estimator", "MDA(%)", "RMSE(pp)", "Pearson", "mean_err"
    );
    for r in &result.rows {
        let _ = writeln!(
            s,
            "{:<10} {:<14} {:>8.1} {:>12.3} {:>10} {:>12.3}",
            r.binning,
            r.estimator.name(),
            r.mda,
            r.rmse,
            r.pearson.map_or("n/a".into(), |p| format!("{p:.3}")),
            r.mean_error
        );
    }
    if !result.tests.is_empty() {
        let _ = writeln!(s);
        for t in &result.tests {
            let _ = writeln!(
                s,
                "paired t-test {} vs {} (n = {}): t = {}, p = {}",
                t.a,
                t.b,
                t.n,
                t.t_statistic.map_or("n/a".into(), |v| format!("{v:.3}")),
                t.p_value.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
    }
    s
}

/// Runs the grid and writes `ablation.csv` and `ablation.txt`.
pub fn run_ablate(config: &ExperimentConfig, spec: &AblationSpec) -> Result<AblationResult> {
    let result = run_ablation(config, spec)?;
    let out = &config.output_dir;
    ensure_dir(out)?;
    write_rows(&out.join(ABLATION_CSV), &result.rows)?;
    write_file(&out.join(ABLATION_TXT), ablation_text(&result, config))?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{BaselineConfig, DpmConfig, EstimatorConfig, MetricsConfig};
    use crate::simulator::{PolicySpec, SimConfig};

    fn config() -> ExperimentConfig {
        ExperimentConfig {
            output_dir: "unused".into(),
            simulation: Some(SimConfig {
                n_auctions: 10_000,
                base_ctr: 0.05,
                policies: vec![PolicySpec::perturbed("a", 0.5), PolicySpec::perturbed("b", 3.0)],
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
    fn grid_shape_and_tests() {
        let spec = AblationSpec {
            bins: vec![BinningStrategy::default(), BinningStrategy::Static { bins: 10 }],
            estimators: vec![Estimator::Ips, Estimator::Snips, Estimator::CappedSnips],
            replications: 2,
        };
        let r = run_ablation(&config(), &spec).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.units.len(), 4);
        assert!(r.rows.iter().all(|row| row.n_units == 4));
        // 2 x 2 estimator neighbours + 3 binning comparisons.
        assert_eq!(r.tests.len(), 7);
        assert!(r.test("adaptive/ips", "adaptive/snips").is_some());
        assert!(r.test("adaptive/capped_snips", "10/capped_snips").is_some());
        assert!(ablation_text(&r, &config()).contains("capped_snips"));
    }

    #[test]
    fn rejects_empty_grids() {
        let spec = AblationSpec {
            bins: vec![],
            estimators: vec![Estimator::Ips],
            replications: 1,
        };
        assert!(run_ablation(&config(), &spec).is_err());
    }
}

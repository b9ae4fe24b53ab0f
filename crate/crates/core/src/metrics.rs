//! Lift metrics and significance tests.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftPair {
    pub unit_key: String,
    pub truth_lift: f64,
    pub estimated_lift: f64,
}

impl LiftPair {
    pub fn new(unit_key: impl Into<String>, truth_lift: f64, estimated_lift: f64) -> Self {
        LiftPair {
            unit_key: unit_key.into(),
            truth_lift,
            estimated_lift,
        }
    }
}

/// How a policy value is compared against the logging value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftMode {
    /// Percent change relative to the logging value.
    #[default]
    Relative,
    /// Difference in percentage points of CTR.
    Absolute,
}

impl LiftMode {
    pub fn lift(self, v_policy: f64, v_logging: f64) -> Result<f64> {
        match self {
            LiftMode::Relative => ctr_lift(v_policy, v_logging),
            LiftMode::Absolute => Ok(ctr_difference(v_policy, v_logging)),
        }
    }
}

impl fmt::Display for LiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            LiftMode::Relative => "relative",
            LiftMode::Absolute => "absolute",
        })
    }
}

/// `(v_policy / v_logging - 1) * 100`.
pub fn ctr_lift(v_policy: f64, v_logging: f64) -> Result<f64> {
    if v_logging == 0.0 {
        return Err(Error::UndefinedLift);
    }
    Ok((v_policy / v_logging - 1.0) * 100.0)
}

/// `(v_policy - v_logging) * 100`, in percentage points.
pub fn ctr_difference(v_policy: f64, v_logging: f64) -> f64 {
    (v_policy - v_logging) * 100.0
}

fn require_nonempty(pairs: &[LiftPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no lift pairs".into()));
    }
    Ok(())
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Percent of pairs whose estimated lift has the sign of the true lift.
/// A zero lift only matches a zero lift.
pub fn mda(pairs: &[LiftPair]) -> Result<f64> {
    require_nonempty(pairs)?;
    let hits = pairs
        .iter()
        .filter(|p| sign(p.truth_lift) == sign(p.estimated_lift))
        .count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

pub fn rmse(pairs: &[LiftPair]) -> Result<f64> {
    require_nonempty(pairs)?;
    let mse = pairs
        .iter()
        .map(|p| (p.truth_lift - p.estimated_lift).powi(2))
        .sum::<f64>()
        / pairs.len() as f64;
    Ok(mse.sqrt())
}

/// Sample Pearson correlation between true and estimated lifts.
pub fn pearson(pairs: &[LiftPair]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two pairs"));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.truth_lift).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.estimated_lift).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for p in pairs {
        let (dx, dy) = (p.truth_lift - mx, p.estimated_lift - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("true lifts have zero variance"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("estimated lifts have zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Per-unit error compared by the paired t-test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    #[default]
    Absolute,
    Squared,
}

impl fmt::Display for ErrorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            ErrorMode::Absolute => "absolute",
            ErrorMode::Squared => "squared",
        })
    }
}

impl FromStr for ErrorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(ErrorMode::Absolute),
            "squared" => Ok(ErrorMode::Squared),
            _ => Err(Error::Config(format!(
                "invalid ttest mode `{s}` (accepted: absolute, squared)"
            ))),
        }
    }
}

pub fn unit_errors(pairs: &[LiftPair], mode: ErrorMode) -> Vec<f64> {
    pairs
        .iter()
        .map(|p| {
            let d = p.estimated_lift - p.truth_lift;
            match mode {
                ErrorMode::Absolute => d.abs(),
                ErrorMode::Squared => d * d,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_statistic: f64,
    pub p_value: f64,
    pub df: f64,
}

/// Two-sided p-value of a Student-t statistic, through the regularized
/// incomplete beta function.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// One-sample two-sided t-test of `mean(x) = 0`.
pub fn one_sample_ttest(x: &[f64]) -> Result<TTest> {
    if x.len() < 2 {
        return Err(Error::DegenerateTest("fewer than two observations"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::DegenerateTest("differences have zero variance"));
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    Ok(TTest {
        t_statistic: t,
        p_value: student_t_two_sided(t, df),
        df,
    })
}

/// Two-sided paired t-test on `errors_a - errors_b`, `n - 1` degrees of freedom.
pub fn paired_ttest(errors_a: &[f64], errors_b: &[f64]) -> Result<TTest> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length ({} vs {})",
            errors_a.len(),
            errors_b.len()
        )));
    }
    let d: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a - b).collect();
    one_sample_ttest(&d)
}

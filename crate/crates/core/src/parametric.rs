//! Parametric market-price baseline.
//!
//! Each segment's training scores are fitted by maximum likelihood with five
//! closed-form families; the best fit's CDF is turned into per-bin hazards on
//! the same grid the DPM uses for that segment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Exp, Gamma, LogNormal, Normal};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::dpm::{ApsTable, BinTable, MODEL_DOCUMENT_VERSION};
use crate::error::{Error, Result};
use crate::logdata::{Dataset, SegmentAssignment, SegmentFeature};

const GRADIENT_TOL: f64 = 1e-8;
const MAX_ITER: usize = 200;
/// Relative padding of the observed range before rescaling to Beta support.
pub const BETA_MARGIN: f64 = 1e-6;
/// Below this survival mass the next bin counts as a certain win.
const TAIL_EPS: f64 = 1e-12;

/// Candidate families, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Normal,
    LogNormal,
    Beta,
    Gamma,
    Exponential,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Normal,
        Family::LogNormal,
        Family::Beta,
        Family::Gamma,
        Family::Exponential,
    ];

    fn name(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::LogNormal => "log_normal",
            Family::Beta => "beta",
            Family::Gamma => "gamma",
            Family::Exponential => "exponential",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s || (s == "lognormal" && *f == Family::LogNormal))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown family `{s}` (accepted: normal, log_normal, beta, gamma, exponential)"
                ))
            })
    }
}

/// Fitted parameters. Beta carries the range it was rescaled from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Params {
    Normal { mean: f64, std_dev: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Beta { alpha: f64, beta: f64, lo: f64, hi: f64 },
    Gamma { shape: f64, rate: f64 },
    Exponential { rate: f64 },
}

impl Params {
    pub fn family(&self) -> Family {
        match self {
            Params::Normal { .. } => Family::Normal,
            Params::LogNormal { .. } => Family::LogNormal,
            Params::Beta { .. } => Family::Beta,
            Params::Gamma { .. } => Family::Gamma,
            Params::Exponential { .. } => Family::Exponential,
        }
    }

    fn n_params(&self) -> usize {
        match self {
            Params::Exponential { .. } => 1,
            // lo and hi are estimated from the sample too.
            Params::Beta { .. } => 4,
            _ => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Params::Normal { mean, std_dev } => mean.is_finite() && std_dev > 0.0,
            Params::LogNormal { mu, sigma } => mu.is_finite() && sigma > 0.0,
            Params::Beta { alpha, beta, lo, hi } => alpha > 0.0 && beta > 0.0 && hi > lo,
            Params::Gamma { shape, rate } => shape > 0.0 && rate > 0.0,
            Params::Exponential { rate } => rate > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!("parameters outside their domain: {self:?}")))
        }
    }

    fn beta_scale(lo: f64, hi: f64) -> (f64, f64) {
        let pad = (hi - lo) * BETA_MARGIN;
        (lo - pad, hi - lo + 2.0 * pad)
    }

    /// Survival function `1 - F(x)`.
    pub fn sf(&self, x: f64) -> f64 {
        // Parameters are validated on construction, so the constructors below cannot fail.
        match *self {
            Params::Normal { mean, std_dev } => Normal::new(mean, std_dev).unwrap().sf(x),
            Params::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    1.0
                } else {
                    LogNormal::new(mu, sigma).unwrap().sf(x)
                }
            }
            Params::Beta { alpha, beta, lo, hi } => {
                let (start, width) = Params::beta_scale(lo, hi);
                let u = ((x - start) / width).clamp(0.0, 1.0);
                Beta::new(alpha, beta).unwrap().sf(u)
            }
            Params::Gamma { shape, rate } => Gamma::new(shape, rate).unwrap().sf(x.max(0.0)),
            Params::Exponential { rate } => Exp::new(rate).unwrap().sf(x.max(0.0)),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        1.0 - self.sf(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricFit {
    #[serde(flatten)]
    pub params: Params,
    pub log_likelihood: f64,
    pub n: usize,
    /// Set when the sample has no spread, so only spread-free families fit.
    #[serde(default)]
    pub degenerate: bool,
}

impl ParametricFit {
    pub fn family(&self) -> Family {
        self.params.family()
    }

    pub fn aic(&self) -> f64 {
        2.0 * self.params.n_params() as f64 - 2.0 * self.log_likelihood
    }
}

struct Moments {
    n: f64,
    mean: f64,
    var: f64,
    min: f64,
    max: f64,
}

fn moments(x: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (min, max) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    Moments { n, mean, var, min, max }
}

fn degenerate(family: Family, reason: impl Into<String>) -> Error {
    Error::FitDegenerate {
        family: family.name(),
        reason: reason.into(),
    }
}

/// `ψ'(x)` by upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Maximum-likelihood fit of one family.
pub fn fit_family(scores: &[f64], family: Family) -> Result<ParametricFit> {
    if scores.is_empty() {
        return Err(Error::EmptySegment("<fit_family>".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let m = moments(scores);
    let (params, log_likelihood) = match family {
        Family::Normal => fit_normal(&m)?,
        Family::LogNormal => fit_log_normal(scores)?,
        Family::Exponential => fit_exponential(scores, &m)?,
        Family::Gamma => fit_gamma(scores, &m)?,
        Family::Beta => fit_beta(scores, &m)?,
    };
    params.validate()?;
    if !log_likelihood.is_finite() {
        return Err(degenerate(family, "log-likelihood is not finite"));
    }
    Ok(ParametricFit {
        params,
        log_likelihood,
        n: scores.len(),
        degenerate: m.max == m.min,
    })
}

fn fit_normal(m: &Moments) -> Result<(Params, f64)> {
    if m.max == m.min || m.var <= 0.0 {
        return Err(degenerate(Family::Normal, "zero variance"));
    }
    let ll = -0.5 * m.n * ((2.0 * std::f64::consts::PI * m.var).ln() + 1.0);
    Ok((
        Params::Normal {
            mean: m.mean,
            std_dev: m.var.sqrt(),
        },
        ll,
    ))
}

fn fit_log_normal(x: &[f64]) -> Result<(Params, f64)> {
    if x.iter().any(|v| *v <= 0.0) {
        return Err(degenerate(Family::LogNormal, "nonpositive scores"));
    }
    let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let lm = moments(&logs);
    if lm.max == lm.min || lm.var <= 0.0 {
        return Err(degenerate(Family::LogNormal, "zero variance"));
    }
    let sum_log = lm.mean * lm.n;
    let ll = -0.5 * lm.n * ((2.0 * std::f64::consts::PI * lm.var).ln() + 1.0) - sum_log;
    Ok((
        Params::LogNormal {
            mu: lm.mean,
            sigma: lm.var.sqrt(),
        },
        ll,
    ))
}

fn fit_exponential(x: &[f64], m: &Moments) -> Result<(Params, f64)> {
    if m.min < 0.0 || m.mean <= 0.0 {
        return Err(degenerate(Family::Exponential, "needs nonnegative scores with positive mean"));
    }
    let rate = 1.0 / m.mean;
    let ll = m.n * rate.ln() - rate * x.iter().sum::<f64>();
    Ok((Params::Exponential { rate }, ll))
}

fn fit_gamma(x: &[f64], m: &Moments) -> Result<(Params, f64)> {
    if m.min <= 0.0 {
        return Err(degenerate(Family::Gamma, "nonpositive scores"));
    }
    if m.max == m.min || m.var <= 0.0 {
        return Err(degenerate(Family::Gamma, "zero variance"));
    }
    let mean_log = x.iter().map(|v| v.ln()).sum::<f64>() / m.n;
    // Profile score in the shape: ln k - ψ(k) = ln(mean) - mean(ln x).
    let s = m.mean.ln() - mean_log;
    if s <= 0.0 {
        return Err(degenerate(Family::Gamma, "no spread on the log scale"));
    }
    let grad = |k: f64| k.ln() - digamma(k) - s;
    let mut k = m.mean * m.mean / m.var;
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let g = grad(k);
        if g.abs() < GRADIENT_TOL {
            converged = true;
            break;
        }
        let step = g / (1.0 / k - trigamma(k));
        let mut next = k - step;
        while next <= 0.0 {
            next = (next + k) / 2.0;
            if (next - k).abs() < f64::MIN_POSITIVE {
                break;
            }
        }
        if next <= 0.0 {
            break;
        }
        k = next;
    }
    if !converged && grad(k).abs() >= GRADIENT_TOL {
        return Err(degenerate(Family::Gamma, "shape iteration did not converge"));
    }
    let rate = k / m.mean;
    let ll = m.n * (k * rate.ln() - ln_gamma(k)) + (k - 1.0) * mean_log * m.n - rate * m.mean * m.n;
    Ok((Params::Gamma { shape: k, rate }, ll))
}

fn fit_beta(x: &[f64], m: &Moments) -> Result<(Params, f64)> {
    if m.max <= m.min {
        return Err(degenerate(Family::Beta, "zero range"));
    }
    let (start, width) = Params::beta_scale(m.min, m.max);
    let u: Vec<f64> = x.iter().map(|v| (v - start) / width).collect();
    let um = moments(&u);
    let s1 = u.iter().map(|v| v.ln()).sum::<f64>() / um.n;
    let s2 = u.iter().map(|v| (1.0 - v).ln()).sum::<f64>() / um.n;
    let mean_ll = |a: f64, b: f64| (a - 1.0) * s1 + (b - 1.0) * s2 - ln_beta(a, b);

    let c = (um.mean * (1.0 - um.mean) / um.var - 1.0).max(1e-3);
    let (mut a, mut b) = (um.mean * c, (1.0 - um.mean) * c);
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let dab = digamma(a + b);
        let (ga, gb) = (dab - digamma(a) + s1, dab - digamma(b) + s2);
        if ga.abs().max(gb.abs()) < GRADIENT_TOL {
            converged = true;
            break;
        }
        let tab = trigamma(a + b);
        let (haa, hbb, hab) = (tab - trigamma(a), tab - trigamma(b), tab);
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det);
        // Newton step with halving to stay in the domain and keep ascending.
        let current = mean_ll(a, b);
        let mut accepted = false;
        for _ in 0..60 {
            let (na, nb) = (a - da, b - db);
            if na > 0.0 && nb > 0.0 && mean_ll(na, nb) >= current - 1e-15 {
                a = na;
                b = nb;
                accepted = true;
                break;
            }
            da /= 2.0;
            db /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        let dab = digamma(a + b);
        let g = (dab - digamma(a) + s1).abs().max((dab - digamma(b) + s2).abs());
        if g >= 1e-6 {
            return Err(degenerate(Family::Beta, "shape iteration did not converge"));
        }
    }
    // Jacobian of the affine map back to the score scale.
    let ll = um.n * (mean_ll(a, b) - width.ln());
    Ok((
        Params::Beta {
            alpha: a,
            beta: b,
            lo: m.min,
            hi: m.max,
        },
        ll,
    ))
}

/// Every family's fit attempt, in family order.
pub fn fit_all(scores: &[f64], families: &[Family]) -> Vec<(Family, Result<ParametricFit>)> {
    families
        .par_iter()
        .map(|f| (*f, fit_family(scores, *f)))
        .collect()
}

/// Highest-likelihood fit among `families`; ties go to the earlier family.
pub fn select_best_fit_among(scores: &[f64], families: &[Family]) -> Result<ParametricFit> {
    let mut ordered: Vec<Family> = families.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut best: Option<ParametricFit> = None;
    for (family, fit) in fit_all(scores, &ordered) {
        match fit {
            Ok(fit) => {
                if best.is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
                    best = Some(fit);
                }
            }
            Err(e) => log::debug!("{family} fit skipped: {e}"),
        }
    }
    best.ok_or(Error::NoFit)
}

pub fn select_best_fit(scores: &[f64]) -> Result<ParametricFit> {
    select_best_fit_among(scores, &Family::ALL)
}

fn hazard_on_grid(params: &Params, edges: &[f64], aps_floor: f64) -> Vec<f64> {
    let sf: Vec<f64> = edges.iter().map(|e| params.sf(*e)).collect();
    sf.windows(2)
        .map(|w| {
            if w[0] < TAIL_EPS {
                1.0
            } else {
                ((w[0] - w[1]) / w[0]).clamp(aps_floor, 1.0)
            }
        })
        .collect()
}

/// `(F(b_l) - F(b_{l-1})) / (1 - F(b_{l-1}))` for the bin holding `score`.
pub fn parametric_aps(fit: &ParametricFit, bins: &BinTable, score: f64, aps_floor: f64) -> f64 {
    let l = bins.bin_index(score);
    hazard_on_grid(&fit.params, &bins.edges[l..l + 2], aps_floor)[0]
}

/// A fitted family plus its hazards on one segment's bin grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricSegment {
    pub segment_key: String,
    pub fit: ParametricFit,
    pub bins: BinTable,
    pub hazard: Vec<f64>,
    pub aps_floor: f64,
    /// Log-likelihood of every family that fitted, for reporting.
    pub candidates: Vec<(Family, f64)>,
}

impl ParametricSegment {
    pub fn new(
        segment_key: String,
        fit: ParametricFit,
        bins: BinTable,
        aps_floor: f64,
    ) -> Result<Self> {
        bins.validate()?;
        let hazard = hazard_on_grid(&fit.params, &bins.edges, aps_floor);
        Ok(ParametricSegment {
            segment_key,
            fit,
            bins,
            hazard,
            aps_floor,
            candidates: Vec::new(),
        })
    }

    pub fn aps(&self, score: f64) -> f64 {
        self.hazard[self.bins.bin_index(score)]
    }
}

/// Parametric counterpart of an [`ApsTable`], sharing its bin grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricApsTable {
    pub policy_name: String,
    pub feature: SegmentFeature,
    pub segments: BTreeMap<String, ParametricSegment>,
    pub assumptions: Vec<String>,
}

impl ParametricApsTable {
    pub fn segment(&self, key: &str) -> Result<&ParametricSegment> {
        self.segments
            .get(key)
            .ok_or_else(|| Error::UnknownSegment(key.to_string()))
    }

    pub fn aligned<'a>(
        &'a self,
        assignment: &SegmentAssignment,
    ) -> Result<Vec<&'a ParametricSegment>> {
        assignment.labels.iter().map(|l| self.segment(l)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ParametricDocument {
            version: MODEL_DOCUMENT_VERSION,
            model_type: "parametric".into(),
            policy: self.policy_name.clone(),
            segment_feature: self.feature,
            assumptions: self.assumptions.clone(),
            segments: self
                .segments
                .values()
                .map(|s| ParametricSegmentDocument {
                    key: s.segment_key.clone(),
                    fit: s.fit,
                    aic: s.fit.aic(),
                    aps_floor: s.aps_floor,
                    edges: s.bins.edges.clone(),
                    counts: s.bins.counts.clone(),
                    h: s.hazard.clone(),
                    candidates: s.candidates.iter().map(|(f, ll)| (f.to_string(), *ll)).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let doc: ParametricDocument = serde_json::from_str(json)?;
        if doc.version != MODEL_DOCUMENT_VERSION || doc.model_type != "parametric" {
            return Err(Error::InvalidInput(format!(
                "expected a version {MODEL_DOCUMENT_VERSION} parametric model document"
            )));
        }
        let mut segments = BTreeMap::new();
        for s in doc.segments {
            s.fit.params.validate()?;
            let bins = BinTable {
                edges: s.edges,
                counts: s.counts,
            };
            let mut seg = ParametricSegment::new(s.key.clone(), s.fit, bins, s.aps_floor)?;
            if seg.hazard.len() != s.h.len()
                || seg.hazard.iter().zip(&s.h).any(|(a, b)| (a - b).abs() > 1e-12)
            {
                return Err(Error::Invariant(format!(
                    "segment {}: stored hazards disagree with the fitted CDF",
                    s.key
                )));
            }
            seg.candidates = s
                .candidates
                .into_iter()
                .map(|(f, ll)| Ok((f.parse()?, ll)))
                .collect::<Result<_>>()?;
            segments.insert(s.key, seg);
        }
        Ok(ParametricApsTable {
            policy_name: doc.policy,
            feature: doc.segment_feature,
            segments,
            assumptions: doc.assumptions,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParametricDocument {
    version: u32,
    model_type: String,
    policy: String,
    segment_feature: SegmentFeature,
    assumptions: Vec<String>,
    segments: Vec<ParametricSegmentDocument>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParametricSegmentDocument {
    key: String,
    fit: ParametricFit,
    aic: f64,
    aps_floor: f64,
    edges: Vec<f64>,
    counts: Vec<u64>,
    h: Vec<f64>,
    candidates: Vec<(String, f64)>,
}

/// Fits the baseline for every segment of `grid`, on the same training
/// samples and bin edges the DPM table was built from.
pub fn fit_parametric_segmented(
    data: &Dataset,
    assignment: &SegmentAssignment,
    grid: &ApsTable,
    families: &[Family],
) -> Result<ParametricApsTable> {
    let samples = crate::dpm::training_samples(data, &grid.source, grid.market_price_mode)?;
    let members = assignment.members();
    let segments = members
        .par_iter()
        .zip(assignment.labels.par_iter())
        .map(|(idx, label)| {
            let model = grid.model(label)?;
            let x: Vec<f64> = idx.iter().map(|i| samples[*i]).collect();
            let fit = select_best_fit_among(&x, families)?;
            if fit.degenerate {
                log::warn!("segment {label}: parametric fit on a sample without spread");
            }
            let mut seg =
                ParametricSegment::new(label.clone(), fit, model.bins.clone(), model.aps_floor)?;
            seg.candidates = fit_all(&x, families)
                .into_iter()
                .filter_map(|(f, r)| r.ok().map(|fit| (f, fit.log_likelihood)))
                .collect();
            Ok((label.clone(), seg))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut assumptions = grid.assumptions.clone();
    assumptions.push("parametric baseline segmented and binned like the DPM".into());
    Ok(ParametricApsTable {
        policy_name: grid.policy_name.clone(),
        feature: grid.feature,
        segments,
        assumptions,
    })
}

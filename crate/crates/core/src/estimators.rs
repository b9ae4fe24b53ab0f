//! Importance-weighted value estimators.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dpm::{ApsTable, DpmModel};
use crate::error::{Error, Result};
use crate::logdata::{Dataset, SegmentFeature};
use crate::parametric::{ParametricApsTable, ParametricSegment};

pub const DEFAULT_CAP_PERCENTILE: f64 = 99.0;

/// Propensity lookup for one segment.
pub trait SegmentAps: Sync {
    fn aps(&self, score: f64) -> f64;
}

impl SegmentAps for DpmModel {
    fn aps(&self, score: f64) -> f64 {
        DpmModel::aps(self, score)
    }
}

impl SegmentAps for ParametricSegment {
    fn aps(&self, score: f64) -> f64 {
        ParametricSegment::aps(self, score)
    }
}

/// A per-segment propensity model that can be resolved once per dataset.
pub trait PropensityModel: Sync {
    fn feature(&self) -> SegmentFeature;
    fn segment_model(&self, key: &str) -> Result<&dyn SegmentAps>;
}

impl PropensityModel for ApsTable {
    fn feature(&self) -> SegmentFeature {
        self.feature
    }

    fn segment_model(&self, key: &str) -> Result<&dyn SegmentAps> {
        Ok(self.model(key)?)
    }
}

impl PropensityModel for ParametricApsTable {
    fn feature(&self) -> SegmentFeature {
        self.feature
    }

    fn segment_model(&self, key: &str) -> Result<&dyn SegmentAps> {
        Ok(self.segment(key)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSample {
    pub reward: bool,
    pub weight: f64,
    /// Index of the record in the source dataset.
    pub record: usize,
}

impl WeightedSample {
    #[inline]
    fn r(&self) -> f64 {
        if self.reward {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ips,
    Snips,
    CappedSnips,
    DeterministicIps,
}

impl Estimator {
    pub const WEIGHTED: [Estimator; 3] = [Estimator::Ips, Estimator::Snips, Estimator::CappedSnips];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ips => "ips",
            Estimator::Snips => "snips",
            Estimator::CappedSnips => "capped_snips",
            Estimator::DeterministicIps => "deterministic_ips",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Ips => "IPS",
            Estimator::Snips => "SNIPS",
            Estimator::CappedSnips => "Capped SNIPS",
            Estimator::DeterministicIps => "Deterministic IPS",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ips" => Ok(Estimator::Ips),
            "snips" => Ok(Estimator::Snips),
            "capped" | "capped_snips" => Ok(Estimator::CappedSnips),
            "deterministic" | "deterministic_ips" => Ok(Estimator::DeterministicIps),
            _ => Err(Error::Config(format!(
                "unknown estimator `{s}` (accepted: ips, snips, capped, deterministic)"
            ))),
        }
    }
}

/// Where the capping percentile is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapScope {
    /// Over every weight of the policy in the batch.
    #[default]
    Global,
    /// Separately within each segment.
    PerSegment,
}

impl fmt::Display for CapScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            CapScope::Global => "global",
            CapScope::PerSegment => "per_segment",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEstimate {
    pub policy_name: String,
    pub estimator: Estimator,
    pub value: f64,
    pub n: usize,
    pub effective_sample_size: f64,
    pub cap_threshold: Option<f64>,
    pub max_weight_precap: f64,
}

/// Pairwise sum of `f(i)` over `0..n`. The split points depend only on `n`,
/// so the result is the same however the halves are scheduled.
pub fn pairwise_sum(n: usize, f: &(impl Fn(usize) -> f64 + Sync)) -> f64 {
    fn go(lo: usize, hi: usize, f: &(impl Fn(usize) -> f64 + Sync)) -> f64 {
        const BLOCK: usize = 1024;
        if hi - lo <= BLOCK {
            return (lo..hi).map(f).sum();
        }
        let mid = lo + (hi - lo) / 2;
        if hi - lo >= 1 << 16 {
            let (a, b) = rayon::join(|| go(lo, mid, f), || go(mid, hi, f));
            a + b
        } else {
            go(lo, mid, f) + go(mid, hi, f)
        }
    }
    go(0, n, f)
}

fn require_nonempty(samples: &[WeightedSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

fn max_weight(samples: &[WeightedSample]) -> f64 {
    samples.iter().map(|s| s.weight).fold(0.0, f64::max)
}

fn ess(sum_w: f64, sum_w2: f64) -> f64 {
    if sum_w2 > 0.0 {
        sum_w * sum_w / sum_w2
    } else {
        0.0
    }
}

/// Importance weights `aps_eval / aps_log` for every record, in input order.
pub fn weights_from_aps(
    data: &Dataset,
    policy: &str,
    aps_eval: &dyn PropensityModel,
    aps_log: &dyn PropensityModel,
) -> Result<Vec<WeightedSample>> {
    if aps_eval.feature() != aps_log.feature() {
        return Err(Error::Config(format!(
            "propensity models are segmented differently ({} vs {})",
            aps_eval.feature(),
            aps_log.feature()
        )));
    }
    let p = data.policy_index(policy)?;
    let assignment = data.segment_assignment(aps_log.feature());
    fn resolve<'a>(m: &'a dyn PropensityModel, labels: &[String]) -> Result<Vec<&'a dyn SegmentAps>> {
        labels.iter().map(|l| m.segment_model(l)).collect()
    }
    let eval_models = resolve(aps_eval, &assignment.labels)?;
    let log_models = resolve(aps_log, &assignment.labels)?;
    let (s_eval, s_log, rewards) = (data.score_eval(p), data.score_logging(), data.rewards());
    Ok(assignment
        .of_record
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let g = *g as usize;
            WeightedSample {
                reward: rewards[i],
                weight: eval_models[g].aps(s_eval[i]) / log_models[g].aps(s_log[i]),
                record: i,
            }
        })
        .collect())
}

/// `(1/n) Σ w r`. Values above one are reported as they are.
pub fn ips(policy: &str, samples: &[WeightedSample]) -> Result<PolicyEstimate> {
    require_nonempty(samples)?;
    let n = samples.len();
    let wr = pairwise_sum(n, &|i| samples[i].weight * samples[i].r());
    let sw = pairwise_sum(n, &|i| samples[i].weight);
    let sw2 = pairwise_sum(n, &|i| samples[i].weight.powi(2));
    let value = wr / n as f64;
    if value > 1.0 {
        log::warn!("{policy}: IPS estimate {value} exceeds 1");
    }
    Ok(PolicyEstimate {
        policy_name: policy.to_string(),
        estimator: Estimator::Ips,
        value,
        n,
        effective_sample_size: ess(sw, sw2),
        cap_threshold: None,
        max_weight_precap: max_weight(samples),
    })
}

/// `Σ r w / Σ w`.
pub fn snips(policy: &str, samples: &[WeightedSample]) -> Result<PolicyEstimate> {
    snips_with(policy, samples, Estimator::Snips, None, |w, _| w)
}

fn snips_with(
    policy: &str,
    samples: &[WeightedSample],
    estimator: Estimator,
    cap_threshold: Option<f64>,
    clip: impl Fn(f64, usize) -> f64 + Sync,
) -> Result<PolicyEstimate> {
    require_nonempty(samples)?;
    let n = samples.len();
    let w = |i: usize| clip(samples[i].weight, i);
    let sw = pairwise_sum(n, &w);
    if !(sw > 0.0) {
        return Err(Error::InvalidInput(format!("{policy}: weights sum to {sw}")));
    }
    let wr = pairwise_sum(n, &|i| w(i) * samples[i].r());
    let sw2 = pairwise_sum(n, &|i| w(i).powi(2));
    Ok(PolicyEstimate {
        policy_name: policy.to_string(),
        estimator,
        value: (wr / sw).clamp(0.0, 1.0),
        n,
        effective_sample_size: ess(sw, sw2),
        cap_threshold,
        max_weight_precap: max_weight(samples),
    })
}

/// Linear-interpolated order statistic at rank `(n - 1) q / 100`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::Config(format!("cap percentile must be in (0, 100], got {q}")));
    }
    let mut v = values.to_vec();
    let rank = (v.len() - 1) as f64 * q / 100.0;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, a, upper) = v.select_nth_unstable_by(lo, f64::total_cmp);
    let a = *a;
    if frac == 0.0 || upper.is_empty() {
        return Ok(a);
    }
    let b = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(a + frac * (b - a))
}

/// SNIPS on weights clipped at their `cap_percentile` percentile.
pub fn capped_snips(
    policy: &str,
    samples: &[WeightedSample],
    cap_percentile: f64,
) -> Result<PolicyEstimate> {
    require_nonempty(samples)?;
    let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let t = percentile(&weights, cap_percentile)?;
    snips_with(policy, samples, Estimator::CappedSnips, Some(t), |w, _| w.min(t))
}

/// Per-segment thresholds, indexed by the segment of each sample.
pub fn segment_thresholds(
    samples: &[WeightedSample],
    groups: &[u32],
    n_groups: usize,
    cap_percentile: f64,
) -> Result<Vec<f64>> {
    let mut by_group = vec![Vec::new(); n_groups];
    for (s, g) in samples.iter().zip(groups) {
        by_group[*g as usize].push(s.weight);
    }
    by_group
        .iter()
        .map(|w| {
            if w.is_empty() {
                Ok(f64::INFINITY)
            } else {
                percentile(w, cap_percentile)
            }
        })
        .collect()
}

/// Capped SNIPS with the threshold computed within each segment.
/// `groups[i]` is the segment of `samples[i]`.
pub fn capped_snips_by_segment(
    policy: &str,
    samples: &[WeightedSample],
    groups: &[u32],
    n_groups: usize,
    cap_percentile: f64,
) -> Result<PolicyEstimate> {
    let t = segment_thresholds(samples, groups, n_groups, cap_percentile)?;
    snips_with(policy, samples, Estimator::CappedSnips, None, |w, i| {
        w.min(t[groups[i] as usize])
    })
}

/// Capping configuration for the weighted estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapSettings {
    pub percentile: f64,
    pub scope: CapScope,
}

impl Default for CapSettings {
    fn default() -> Self {
        CapSettings {
            percentile: DEFAULT_CAP_PERCENTILE,
            scope: CapScope::Global,
        }
    }
}

/// Runs one weighted estimator. `segments` is needed for per-segment capping.
pub fn estimate(
    policy: &str,
    samples: &[WeightedSample],
    estimator: Estimator,
    cap: CapSettings,
    segments: Option<(&[u32], usize)>,
) -> Result<PolicyEstimate> {
    match (estimator, cap.scope, segments) {
        (Estimator::Ips, ..) => ips(policy, samples),
        (Estimator::Snips, ..) => snips(policy, samples),
        (Estimator::CappedSnips, CapScope::Global, _) => capped_snips(policy, samples, cap.percentile),
        (Estimator::CappedSnips, CapScope::PerSegment, Some((g, n))) => {
            let groups: Vec<u32> = samples.iter().map(|s| g[s.record]).collect();
            capped_snips_by_segment(policy, samples, &groups, n, cap.percentile)
        }
        (Estimator::CappedSnips, CapScope::PerSegment, None) => Err(Error::Config(
            "per-segment capping needs a segment assignment".into(),
        )),
        (Estimator::DeterministicIps, ..) => Err(Error::Unsupported(
            "deterministic IPS works on agreement flags, not weights".into(),
        )),
    }
}

/// Estimates within each unit (e.g. day) of `units`. Capping thresholds are
/// taken from the whole batch, then applied inside every unit.
pub fn estimate_by_unit(
    policy: &str,
    samples: &[WeightedSample],
    estimator: Estimator,
    cap: CapSettings,
    segments: Option<(&[u32], usize)>,
    units: &[u32],
    n_units: usize,
) -> Result<Vec<PolicyEstimate>> {
    let capped: Vec<WeightedSample> = match estimator {
        Estimator::CappedSnips => {
            let clip: Box<dyn Fn(&WeightedSample) -> f64> = match (cap.scope, segments) {
                (CapScope::Global, _) => {
                    let w: Vec<f64> = samples.iter().map(|s| s.weight).collect();
                    let t = percentile(&w, cap.percentile)?;
                    Box::new(move |s| s.weight.min(t))
                }
                (CapScope::PerSegment, Some((g, n))) => {
                    let groups: Vec<u32> = samples.iter().map(|s| g[s.record]).collect();
                    let t = segment_thresholds(samples, &groups, n, cap.percentile)?;
                    Box::new(move |s| s.weight.min(t[g[s.record] as usize]))
                }
                (CapScope::PerSegment, None) => {
                    return Err(Error::Config(
                        "per-segment capping needs a segment assignment".into(),
                    ))
                }
            };
            samples
                .iter()
                .map(|s| WeightedSample { weight: clip(s), ..*s })
                .collect()
        }
        _ => samples.to_vec(),
    };
    let mut by_unit = vec![Vec::new(); n_units];
    for (s, orig) in capped.iter().zip(samples) {
        by_unit[units[s.record] as usize].push((*s, orig.weight));
    }
    by_unit
        .into_iter()
        .map(|unit| {
            let clipped: Vec<WeightedSample> = unit.iter().map(|(s, _)| *s).collect();
            let raw_max = unit.iter().map(|(_, w)| *w).fold(0.0, f64::max);
            let mut e = match estimator {
                Estimator::Ips => ips(policy, &clipped)?,
                Estimator::Snips => snips(policy, &clipped)?,
                Estimator::CappedSnips => {
                    let mut e = snips(policy, &clipped)?;
                    e.estimator = Estimator::CappedSnips;
                    e.cap_threshold = clipped.iter().map(|s| s.weight).reduce(f64::max);
                    e
                }
                Estimator::DeterministicIps => {
                    return Err(Error::Unsupported(
                        "deterministic IPS works on agreement flags, not weights".into(),
                    ))
                }
            };
            e.max_weight_precap = raw_max;
            Ok(e)
        })
        .collect()
}

/// IPS with exact 0/1 propensities: only impressions where the policy would
/// have shown the logged ad keep their reward.
pub fn deterministic_ips(data: &Dataset, policy: &str) -> Result<PolicyEstimate> {
    let p = data.policy_index(policy)?;
    let agree = data.agreement(p).ok_or_else(|| {
        Error::Unsupported(
            "deterministic IPS needs agreement flags, which external logs do not carry".into(),
        )
    })?;
    deterministic_ips_on(policy, agree, data.rewards())
}

pub(crate) fn deterministic_ips_on(
    policy: &str,
    agree: &[bool],
    rewards: &[bool],
) -> Result<PolicyEstimate> {
    if rewards.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = rewards.len();
    let hits = agree.iter().zip(rewards).filter(|(a, r)| **a && **r).count();
    let agreed = agree.iter().filter(|a| **a).count();
    Ok(PolicyEstimate {
        policy_name: policy.to_string(),
        estimator: Estimator::DeterministicIps,
        value: hits as f64 / n as f64,
        n,
        effective_sample_size: agreed as f64,
        cap_threshold: None,
        max_weight_precap: if agreed > 0 { 1.0 } else { 0.0 },
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `policy,estimator,value,n,ess,cap_threshold,max_weight_precap` rows.
pub fn write_estimates_csv<W: Write>(writer: W, estimates: &[PolicyEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "policy",
        "estimator",
        "value",
        "n",
        "ess",
        "cap_threshold",
        "max_weight_precap",
    ])?;
    for e in estimates {
        w.write_record([
            e.policy_name.clone(),
            e.estimator.to_string(),
            e.value.to_string(),
            e.n.to_string(),
            e.effective_sample_size.to_string(),
            opt(e.cap_threshold),
            e.max_weight_precap.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn write_estimates_file(path: impl AsRef<Path>, estimates: &[PolicyEstimate]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_estimates_csv(std::io::BufWriter::new(file), estimates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(pairs: &[(bool, f64)]) -> Vec<WeightedSample> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (r, w))| WeightedSample {
                reward: *r,
                weight: *w,
                record: i,
            })
            .collect()
    }

    #[test]
    fn ips_examples() {
        let s = samples(&[(true, 1.0), (true, 1.0), (false, 1.0), (false, 1.0), (false, 1.0)]);
        assert!((ips("p", &s).unwrap().value - 0.4).abs() < 1e-15);
        assert_eq!(ips("p", &samples(&[(true, 3.0)])).unwrap().value, 3.0);
        assert_eq!(ips("p", &samples(&[(false, 2.0); 4])).unwrap().value, 0.0);
        assert!(ips("p", &[]).is_err());
    }

    #[test]
    fn snips_examples() {
        let e = snips("p", &samples(&[(true, 4.0), (false, 1.0)])).unwrap();
        assert_eq!(e.value, 0.8);
        assert!((e.effective_sample_size - 25.0 / 17.0).abs() < 1e-15);
        let e = snips("p", &samples(&[(true, 7.0), (false, 7.0), (false, 7.0), (true, 7.0)])).unwrap();
        assert_eq!(e.value, 0.5);
    }

    #[test]
    fn cap_clips_single_outlier() {
        let mut pairs = vec![(false, 1.0); 100];
        pairs[0].0 = true;
        pairs.push((true, 1e6));
        let s = samples(&pairs);
        let e = capped_snips("p", &s, 99.0).unwrap();
        // Rank 99 of 0..=100 is the last of the unit weights.
        assert_eq!(e.cap_threshold, Some(1.0));
        assert!((e.value - 2.0 / 101.0).abs() < 1e-15);
        assert_eq!(e.max_weight_precap, 1e6);
        let full = capped_snips("p", &s, 100.0).unwrap();
        assert_eq!(full.value, snips("p", &s).unwrap().value);
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 50.0).unwrap(), 2.5);
        assert_eq!(percentile(&v, 100.0).unwrap(), 4.0);
        assert!((percentile(&v, 99.0).unwrap() - 3.97).abs() < 1e-12);
        assert!(percentile(&v, 0.0).is_err());
    }

    #[test]
    fn per_segment_caps_use_each_segment_distribution() {
        let s = samples(&[(true, 1.0), (false, 2.0), (true, 10.0), (false, 20.0)]);
        let e = capped_snips_by_segment("p", &s, &[0, 0, 1, 1], 2, 50.0).unwrap();
        // Thresholds 1.5 and 15.
        assert!((e.value - (1.0 + 10.0) / (1.0 + 1.5 + 10.0 + 15.0)).abs() < 1e-15);
    }

    #[test]
    fn by_unit_uses_batch_threshold() {
        let s = samples(&[(true, 1.0), (false, 1.0), (true, 1.0), (true, 100.0)]);
        let cap = CapSettings { percentile: 50.0, scope: CapScope::Global };
        let per = estimate_by_unit("p", &s, Estimator::CappedSnips, cap, None, &[0, 0, 1, 1], 2)
            .unwrap();
        assert_eq!(per[0].value, 0.5);
        assert_eq!(per[1].value, 1.0);
        assert_eq!(per[1].max_weight_precap, 100.0);
    }

    #[test]
    fn deterministic_fixture() {
        // Ten records, agreement on the first five, clicks only there.
        let agree = [true, true, true, true, true, false, false, false, false, false];
        let rewards = [true, false, true, false, false, false, false, false, false, false];
        let e = deterministic_ips_on("p", &agree, &rewards).unwrap();
        assert_eq!(e.value, 0.2);
        let all = deterministic_ips_on("p", &[true; 10], &rewards).unwrap();
        assert_eq!(all.value, 0.2);
        let none = deterministic_ips_on("p", &[false; 10], &rewards).unwrap();
        assert_eq!(none.value, 0.0);
    }

    #[test]
    fn pairwise_sum_is_split_invariant() {
        let xs: Vec<f64> = (0..200_000).map(|i| (i as f64).sin()).collect();
        let a = pairwise_sum(xs.len(), &|i| xs[i]);
        let b = pairwise_sum(xs.len(), &|i| xs[i]);
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((a - xs.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn estimator_names_parse() {
        for e in [Estimator::Ips, Estimator::Snips, Estimator::CappedSnips, Estimator::DeterministicIps] {
            assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
        }
        assert_eq!("capped".parse::<Estimator>().unwrap(), Estimator::CappedSnips);
        assert!("dr".parse::<Estimator>().is_err());
    }

    #[test]
    fn csv_columns() {
        let mut out = Vec::new();
        let e = snips("p", &samples(&[(true, 4.0), (false, 1.0)])).unwrap();
        write_estimates_csv(&mut out, &[e]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("policy,estimator,value,n,ess,cap_threshold,max_weight_precap\n"));
        assert!(text.contains("p,snips,0.8,2,"));
    }
}

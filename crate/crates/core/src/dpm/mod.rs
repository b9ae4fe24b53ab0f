//! Discrete Price Model.
//!
//! The score axis is cut into right-closed quantile bins
//! `V_l = (b_{l-1}, b_l]`. From the per-bin sample masses `p_l` the model
//! derives the survival function `S(b_l) = P(z > b_l)`, the winning
//! function `W(b_l) = 1 - S(b_l)` and the per-bin conditional winning
//! probability `h_l = p_l / S(b_{l-1})`, which serves as the approximate
//! propensity of any ad whose score lands in `V_l`.

mod segmentation;
mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use segmentation::{anova_r_squared, select_segmentation, SegmentationChoice};
pub use table::{
    aps, fit_dpm_segmented, training_samples, ApsTable, DpmSettings, MarketPriceMode, ScoreSource,
    MODEL_DOCUMENT_VERSION,
};

/// `z²` for a two-sided 95% interval.
pub const DEFAULT_Z_ALPHA_SQ: f64 = 3.8416;
pub const DEFAULT_APS_FLOOR: f64 = 1e-6;

const INVARIANT_TOL: f64 = 1e-9;

/// Largest `L` with `L³ ≤ n / z²`, clamped to at least one bin.
pub fn adaptive_bin_count(n: usize, z_alpha_sq: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::EmptySegment("<adaptive_bin_count>".into()));
    }
    if !(z_alpha_sq.is_finite() && z_alpha_sq > 0.0) {
        return Err(Error::Config(format!(
            "z_alpha_sq must be positive, got {z_alpha_sq}"
        )));
    }
    let target = n as f64 / z_alpha_sq;
    // Integer bracketing around the floating cube root; the relative slack
    // absorbs the rounding of n / z² when L³ z² equals n exactly.
    let fits = |l: u64| (l * l * l) as f64 <= target * (1.0 + 4.0 * f64::EPSILON);
    let mut l = target.cbrt().floor() as u64;
    while fits(l + 1) {
        l += 1;
    }
    while l > 0 && !fits(l) {
        l -= 1;
    }
    Ok(l.max(1) as usize)
}

/// How many bins to use for a segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningStrategy {
    Adaptive { z_alpha_sq: f64 },
    Static { bins: usize },
}

impl Default for BinningStrategy {
    fn default() -> Self {
        BinningStrategy::Adaptive {
            z_alpha_sq: DEFAULT_Z_ALPHA_SQ,
        }
    }
}

impl BinningStrategy {
    pub fn bins_for(&self, n: usize) -> Result<usize> {
        match *self {
            BinningStrategy::Adaptive { z_alpha_sq } => adaptive_bin_count(n, z_alpha_sq),
            BinningStrategy::Static { bins } if bins >= 1 => Ok(bins),
            BinningStrategy::Static { .. } => Err(Error::Config("static bin count must be >= 1".into())),
        }
    }
}

impl FromStr for BinningStrategy {
    type Err = Error;

    /// `adaptive` or a positive bin count such as `1000`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(BinningStrategy::default());
        }
        match s.replace(['_', ','], "").parse::<usize>() {
            Ok(bins) if bins >= 1 => Ok(BinningStrategy::Static { bins }),
            _ => Err(Error::Config(format!(
                "invalid binning `{s}` (accepted: adaptive or a positive integer)"
            ))),
        }
    }
}

impl fmt::Display for BinningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinningStrategy::Adaptive { .. } => f.pad("adaptive"),
            BinningStrategy::Static { bins } => f.pad(&bins.to_string()),
        }
    }
}

/// Bin edges `b_0 < b_1 < … < b_L` with the training count of each bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl BinTable {
    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Zero-based bin holding `score`; out-of-range scores clamp to the
    /// first or last bin.
    #[inline]
    pub fn bin_index(&self, score: f64) -> usize {
        // First upper edge >= score, i.e. score ∈ (b_{l-1}, b_l].
        let upper = &self.edges[1..];
        upper.partition_point(|e| *e < score).min(upper.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.edges.len() != self.counts.len() + 1 {
            return Err(Error::Invariant(format!(
                "bin table needs L >= 1 and L+1 edges, got {} edges for {} bins",
                self.edges.len(),
                self.counts.len()
            )));
        }
        if self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invariant("bin edges must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Fitted market-price landscape for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmModel {
    pub segment_key: String,
    pub bins: BinTable,
    /// `p_l`, one per bin.
    pub p: Vec<f64>,
    /// `S(b_l)` for `l = 0..=L`.
    pub survival: Vec<f64>,
    /// `W(b_l)` for `l = 0..=L`.
    pub winning: Vec<f64>,
    /// `h_l`, one per bin.
    pub hazard: Vec<f64>,
    pub aps_floor: f64,
    /// Bin count asked for before tied edges were merged.
    pub requested_bins: usize,
}

impl DpmModel {
    /// Builds the model tables from a bin table.
    pub fn from_bins(segment_key: String, bins: BinTable, aps_floor: f64) -> Result<Self> {
        bins.validate()?;
        if !(aps_floor > 0.0 && aps_floor <= 1.0) {
            return Err(Error::Config(format!("aps_floor must be in (0, 1], got {aps_floor}")));
        }
        let n = bins.total();
        if n == 0 {
            return Err(Error::EmptySegment(segment_key));
        }
        let nf = n as f64;
        let l = bins.num_bins();
        let mut survival = Vec::with_capacity(l + 1);
        let mut winning = Vec::with_capacity(l + 1);
        let mut hazard = Vec::with_capacity(l);
        let mut below = 0u64;
        survival.push(1.0);
        winning.push(0.0);
        for c in &bins.counts {
            let at_risk = n - below;
            hazard.push(if at_risk > 0 { *c as f64 / at_risk as f64 } else { 0.0 });
            below += c;
            survival.push((n - below) as f64 / nf);
            winning.push(below as f64 / nf);
        }
        let p = bins.counts.iter().map(|c| *c as f64 / nf).collect();
        Ok(DpmModel {
            segment_key,
            requested_bins: l,
            bins,
            p,
            survival,
            winning,
            hazard,
            aps_floor,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.bins.num_bins()
    }

    /// Approximate propensity of an ad with this score: `max(h_l, floor)`.
    #[inline]
    pub fn aps(&self, score: f64) -> f64 {
        self.hazard[self.bins.bin_index(score)].max(self.aps_floor)
    }

    /// Checks every model invariant at 1e-9.
    pub fn check_invariants(&self) -> Result<()> {
        self.bins.validate()?;
        let l = self.num_bins();
        let fail = |what: String| Err(Error::Invariant(format!("segment {}: {what}", self.segment_key)));
        if self.p.len() != l || self.hazard.len() != l || self.survival.len() != l + 1 || self.winning.len() != l + 1 {
            return fail("table lengths disagree with the bin count".into());
        }
        let mass: f64 = self.p.iter().sum();
        if (mass - 1.0).abs() > INVARIANT_TOL {
            return fail(format!("probability masses sum to {mass}"));
        }
        if (self.survival[0] - 1.0).abs() > INVARIANT_TOL || self.winning[0].abs() > INVARIANT_TOL {
            return fail("S(b_0) must be 1 and W(b_0) must be 0".into());
        }
        let mut product = 1.0;
        for i in 0..=l {
            if (self.survival[i] + self.winning[i] - 1.0).abs() > INVARIANT_TOL {
                return fail(format!("W + S != 1 at edge {i}"));
            }
            if i == 0 {
                continue;
            }
            let j = i - 1;
            if self.survival[i] > self.survival[j] + INVARIANT_TOL
                || self.winning[i] + INVARIANT_TOL < self.winning[j]
            {
                return fail(format!("monotonicity broken at edge {i}"));
            }
            if (self.p[j] - (self.survival[j] - self.survival[i])).abs() > INVARIANT_TOL {
                return fail(format!("p_{i} != S(b_{j}) - S(b_{i})"));
            }
            if self.survival[j] > 0.0 {
                let h = self.p[j] / self.survival[j];
                if (self.hazard[j] - h).abs() > INVARIANT_TOL {
                    return fail(format!("h_{i} != p_{i} / S(b_{j})"));
                }
                if !(self.hazard[j] > 0.0 && self.hazard[j] <= 1.0 + INVARIANT_TOL) && self.p[j] > 0.0 {
                    return fail(format!("h_{i} = {} outside (0, 1]", self.hazard[j]));
                }
            }
            product *= 1.0 - self.hazard[j];
            if (self.survival[i] - product).abs() > INVARIANT_TOL {
                return fail(format!("S(b_{i}) != prod (1 - h_j)"));
            }
        }
        Ok(())
    }
}

/// Fits a single-segment model with (up to) `bins` equal-frequency bins.
///
/// Edge `b_l` is the order statistic at rank `ceil(l·n/L)`, `b_L` is the
/// maximum and `b_0` sits one ulp below the minimum. Tied edges are merged,
/// which lowers `L` and logs a warning.
pub fn fit_dpm(scores: &[f64], bins: usize, aps_floor: f64) -> Result<DpmModel> {
    if scores.is_empty() {
        return Err(Error::EmptySegment(String::new()));
    }
    if bins == 0 {
        return Err(Error::Config("bin count must be >= 1".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {bad}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let table = quantile_bins(&sorted, bins);
    let mut model = DpmModel::from_bins(String::new(), table, aps_floor)?;
    model.requested_bins = bins;
    if model.num_bins() < bins {
        log::warn!(
            "requested {bins} bins but only {} distinct quantile edges exist; using {}",
            model.num_bins(),
            model.num_bins()
        );
    }
    Ok(model)
}

/// Equal-frequency bins over already-sorted scores.
pub(crate) fn quantile_bins(sorted: &[f64], bins: usize) -> BinTable {
    let n = sorted.len();
    let mut edges = Vec::with_capacity(bins + 1);
    edges.push(sorted[0].next_down());
    for l in 1..=bins {
        let rank = (l * n).div_ceil(bins);
        let edge = sorted[rank.max(1) - 1];
        if edge > *edges.last().expect("b_0 pushed") {
            edges.push(edge);
        }
    }
    let mut counts = Vec::with_capacity(edges.len() - 1);
    let mut below = 0usize;
    for e in &edges[1..] {
        let upto = sorted.partition_point(|s| s <= e);
        counts.push((upto - below) as u64);
        below = upto;
    }
    BinTable { edges, counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn uniform(n: usize, seed: u64) -> Vec<f64> {
        let mut s = StreamKey::root(seed).stream();
        (0..n).map(|_| 1.0 - s.uniform()).collect()
    }

    #[test]
    fn adaptive_bin_count_examples() {
        assert_eq!(adaptive_bin_count(10_000, DEFAULT_Z_ALPHA_SQ).unwrap(), 13);
        assert_eq!(adaptive_bin_count(3, DEFAULT_Z_ALPHA_SQ).unwrap(), 1);
        assert_eq!(adaptive_bin_count(500_000, DEFAULT_Z_ALPHA_SQ).unwrap(), 50);
        assert_eq!(adaptive_bin_count(2_000, DEFAULT_Z_ALPHA_SQ).unwrap(), 8);
        assert_eq!(adaptive_bin_count(16_000, DEFAULT_Z_ALPHA_SQ).unwrap(), 16);
        // 25³ · 3.8416 = 60025 exactly.
        assert_eq!(adaptive_bin_count(60_025, DEFAULT_Z_ALPHA_SQ).unwrap(), 25);
        assert_eq!(adaptive_bin_count(60_024, DEFAULT_Z_ALPHA_SQ).unwrap(), 24);
        assert!(matches!(adaptive_bin_count(0, DEFAULT_Z_ALPHA_SQ), Err(Error::EmptySegment(_))));
    }

    #[test]
    fn uniform_quartiles_have_equal_mass_and_harmonic_hazard() {
        let model = fit_dpm(&uniform(100, 3), 4, DEFAULT_APS_FLOOR).unwrap();
        assert_eq!(model.bins.counts, vec![25, 25, 25, 25]);
        assert_eq!(model.p, vec![0.25; 4]);
        let expected = [0.25, 1.0 / 3.0, 0.5, 1.0];
        for (h, e) in model.hazard.iter().zip(expected) {
            assert!((h - e).abs() < 1e-15);
        }
        model.check_invariants().unwrap();
        // Third quartile.
        let third = (model.bins.edges[2] + model.bins.edges[3]) / 2.0;
        assert_eq!(model.aps(third), 0.5);
        assert_eq!(model.aps(1e9), 1.0);
        assert_eq!(model.aps(-5.0), 0.25);
    }

    #[test]
    fn single_bin_is_certain_win() {
        let model = fit_dpm(&[0.3, 0.1, 0.7], 1, DEFAULT_APS_FLOOR).unwrap();
        assert_eq!(model.p, vec![1.0]);
        assert_eq!(model.hazard, vec![1.0]);
    }

    #[test]
    fn constant_scores_collapse_to_one_bin() {
        let model = fit_dpm(&[2.0; 50], 7, DEFAULT_APS_FLOOR).unwrap();
        assert_eq!(model.num_bins(), 1);
        assert_eq!(model.requested_bins, 7);
        model.check_invariants().unwrap();
    }

    #[test]
    fn ties_never_produce_zero_width_bins() {
        let scores = [1.0, 1.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0];
        let model = fit_dpm(&scores, 4, DEFAULT_APS_FLOOR).unwrap();
        assert!(model.bins.edges.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(model.bins.total(), 8);
        model.check_invariants().unwrap();
    }

    #[test]
    fn floor_applies_to_zero_hazard() {
        let bins = BinTable {
            edges: vec![0.0, 1.0, 2.0],
            counts: vec![0, 4],
        };
        let model = DpmModel::from_bins("s".into(), bins, 1e-6).unwrap();
        assert_eq!(model.aps(0.5), 1e-6);
        assert_eq!(model.aps(1.5), 1.0);
    }

    #[test]
    fn binning_strategy_parsing() {
        assert_eq!("adaptive".parse::<BinningStrategy>().unwrap(), BinningStrategy::default());
        assert_eq!(
            "10,000".parse::<BinningStrategy>().unwrap(),
            BinningStrategy::Static { bins: 10_000 }
        );
        assert!("0".parse::<BinningStrategy>().is_err());
        assert!("many".parse::<BinningStrategy>().is_err());
    }

    #[test]
    fn corrupted_model_fails_invariant_check() {
        let mut model = fit_dpm(&uniform(40, 9), 4, DEFAULT_APS_FLOOR).unwrap();
        model.survival[2] += 0.01;
        assert!(matches!(model.check_invariants(), Err(Error::Invariant(_))));
    }
}

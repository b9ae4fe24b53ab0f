//! Seeded winner-takes-all auction worlds with known true CTRs.
//!
//! Every candidate draws a log-normal bid and a true CTR `scale * Beta(α, β)`.
//! A policy scores a candidate as `bid * pCTR`, where `pCTR = ctr * exp(σ g)`
//! and `g` is a standard normal from the policy's own stream. The logging
//! policy's winner is shown and clicked with probability equal to its true
//! CTR. Clicks use common random numbers: candidate `k` in auction `a` is
//! clicked iff `u[a,k] < ctr[a,k]`, whichever policy shows it.
//!
//! `scale` is chosen so the logging winners' mean true CTR equals `base_ctr`.
//! Argmax is invariant to the scale, so a first pass over the Beta draws
//! finds it and a second pass generates the world.

mod truth;

use std::fmt;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logdata::{Dataset, DatasetBuilder, DAY_MS};
use crate::rng::{name_key, StreamKey};

pub use truth::{make_ab_schedule, AbDay, GroundTruth, TruthCell};

pub const WORLD_META_VERSION: u32 = 1;
const CHUNK: usize = 1 << 15;

const PURPOSE_BID: u64 = 1;
const PURPOSE_CTR: u64 = 2;
const PURPOSE_CLICK: u64 = 3;
const PURPOSE_NOISE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// `bid * true_ctr * exp(sigma * g)`.
    #[default]
    PerturbedCtr,
    /// Every candidate scores 1, so the lowest index always wins.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub name: String,
    #[serde(default)]
    pub kind: PolicyKind,
    #[serde(default)]
    pub sigma: f64,
    /// Noise stream label; defaults to the policy name. Two specs sharing a
    /// stream and sigma score identically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<String>,
}

impl PolicySpec {
    pub fn perturbed(name: impl Into<String>, sigma: f64) -> Self {
        PolicySpec {
            name: name.into(),
            kind: PolicyKind::PerturbedCtr,
            sigma,
            stream: None,
        }
    }

    pub fn constant(name: impl Into<String>) -> Self {
        PolicySpec {
            name: name.into(),
            kind: PolicyKind::Constant,
            sigma: 0.0,
            stream: None,
        }
    }

    pub fn with_stream(mut self, stream: impl Into<String>) -> Self {
        self.stream = Some(stream.into());
        self
    }

    fn stream_label(&self) -> &str {
        self.stream.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_auctions: usize,
    pub n_candidates: usize,
    pub n_segments: usize,
    pub n_days: usize,
    /// Target mean true CTR of the logged impressions.
    pub base_ctr: f64,
    pub ctr_alpha: f64,
    pub ctr_beta: f64,
    pub bid_sigma: f64,
    /// Log-bid offset added per segment index.
    pub segment_bid_shift: f64,
    /// pCTR noise of the logging policy.
    pub noise_sigma: f64,
    /// Timestamp of the first auction; must fall on a UTC day boundary.
    pub start_ms: i64,
    pub logging_name: String,
    pub policies: Vec<PolicySpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            n_auctions: 100_000,
            n_candidates: 4,
            n_segments: 4,
            n_days: 14,
            base_ctr: 0.001,
            ctr_alpha: 0.2,
            ctr_beta: 5.0,
            bid_sigma: 0.5,
            segment_bid_shift: 0.25,
            noise_sigma: 2.5,
            start_ms: 1_704_067_200_000,
            logging_name: "logging".into(),
            policies: Vec::new(),
        }
    }
}

fn invalid(key: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("simulation.{key}: {msg}"))
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_auctions == 0 {
            return Err(invalid("n_auctions", "must be positive"));
        }
        if !(2..=u16::MAX as usize).contains(&self.n_candidates) {
            return Err(invalid("n_candidates", "must be between 2 and 65535"));
        }
        if self.n_segments == 0 || self.n_segments > self.n_auctions {
            return Err(invalid("n_segments", "must be in [1, n_auctions]"));
        }
        if self.n_days == 0 || self.n_days > self.n_auctions {
            return Err(invalid("n_days", "must be in [1, n_auctions]"));
        }
        if !(self.base_ctr > 0.0 && self.base_ctr < 1.0) {
            return Err(invalid("base_ctr", "must be in (0, 1)"));
        }
        if !(self.ctr_alpha > 0.0 && self.ctr_beta > 0.0) {
            return Err(invalid("ctr_alpha/ctr_beta", "must be positive"));
        }
        for (key, v) in [
            ("bid_sigma", self.bid_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, "must be finite and nonnegative"));
            }
        }
        if !self.segment_bid_shift.is_finite() {
            return Err(invalid("segment_bid_shift", "must be finite"));
        }
        if self.start_ms.rem_euclid(DAY_MS) != 0 {
            return Err(invalid("start_ms", "must fall on a UTC day boundary"));
        }
        let mut seen = std::collections::HashSet::new();
        seen.insert(self.logging_name.as_str());
        for p in &self.policies {
            if !seen.insert(p.name.as_str()) {
                return Err(invalid("policies", format!("policy `{}` declared more than once", p.name)));
            }
            if !(p.sigma.is_finite() && p.sigma >= 0.0) {
                return Err(invalid("policies", format!("policy `{}` needs a finite sigma >= 0", p.name)));
            }
        }
        Ok(())
    }

    /// The logging policy followed by the evaluation policies.
    pub fn all_policies(&self) -> Vec<PolicySpec> {
        let mut v = vec![PolicySpec::perturbed(self.logging_name.clone(), self.noise_sigma)];
        v.extend(self.policies.iter().cloned());
        v
    }

    pub fn segment_of(&self, auction: usize) -> usize {
        (auction as u128 * self.n_segments as u128 / self.n_auctions as u128) as usize
    }

    pub fn day_of(&self, auction: usize) -> usize {
        (auction as u128 * self.n_days as u128 / self.n_auctions as u128) as usize
    }

    fn first_auction_of_day(&self, day: usize) -> usize {
        (day as u128 * self.n_auctions as u128).div_ceil(self.n_days as u128) as usize
    }

    pub fn timestamp_ms(&self, auction: usize) -> i64 {
        let day = self.day_of(auction);
        let start = self.first_auction_of_day(day);
        let len = self.first_auction_of_day(day + 1) - start;
        let offset = ((auction - start) as i128 * DAY_MS as i128 / len as i128) as i64;
        self.start_ms + day as i64 * DAY_MS + offset
    }

    pub fn segment_label(&self, segment: usize) -> String {
        format!("seg-{segment:02}")
    }
}

/// Every random draw of one auction.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionDraws {
    pub bids: Vec<f64>,
    /// Unscaled Beta draws.
    pub beta_draws: Vec<f64>,
    pub true_ctr: Vec<f64>,
    /// `scores[p][k]` for every policy, logging first.
    pub scores: Vec<Vec<f64>>,
    pub click_uniforms: Vec<f64>,
}

impl AuctionDraws {
    pub fn clicked(&self, candidate: usize) -> bool {
        self.click_uniforms[candidate] < self.true_ctr[candidate]
    }
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = k;
        }
    }
    best
}

/// Highest score among all candidates except `winner`.
fn runner_up(scores: &[f64], winner: usize) -> f64 {
    scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != winner)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max)
}

struct Generator {
    config: SimConfig,
    policies: Vec<PolicySpec>,
    bid: StreamKey,
    ctr: StreamKey,
    click: StreamKey,
    noise: Vec<StreamKey>,
    beta: Beta<f64>,
}

impl Generator {
    fn new(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let root = StreamKey::root(config.seed);
        let policies = config.all_policies();
        let noise_root = root.child(PURPOSE_NOISE);
        Ok(Generator {
            noise: policies
                .iter()
                .map(|p| noise_root.child(name_key(p.stream_label())))
                .collect(),
            bid: root.child(PURPOSE_BID),
            ctr: root.child(PURPOSE_CTR),
            click: root.child(PURPOSE_CLICK),
            beta: Beta::new(config.ctr_alpha, config.ctr_beta)
                .map_err(|e| invalid("ctr_alpha/ctr_beta", e))?,
            policies,
            config: config.clone(),
        })
    }

    fn n_candidates(&self) -> usize {
        self.config.n_candidates
    }

    /// Bids and unscaled Beta draws of auction `a`.
    fn base_draws(&self, a: usize, bids: &mut [f64], x: &mut [f64]) {
        let shift = self.config.segment_bid_shift * self.config.segment_of(a) as f64;
        let (kb, kc) = (self.bid.child(a as u64), self.ctr.child(a as u64));
        for k in 0..self.n_candidates() {
            let z: f64 = kb.child(k as u64).stream().sample(StandardNormal);
            bids[k] = (self.config.bid_sigma * z + shift).exp();
            x[k] = self.beta.sample(&mut kc.child(k as u64).stream());
        }
    }

    /// Scores of policy `p` given bids and (pre-)CTRs.
    fn policy_scores(&self, p: usize, a: usize, bids: &[f64], ctr: &[f64], out: &mut [f64]) {
        let spec = &self.policies[p];
        match spec.kind {
            PolicyKind::Constant => out.fill(1.0),
            PolicyKind::PerturbedCtr => {
                let key = self.noise[p].child(a as u64);
                for k in 0..self.n_candidates() {
                    let g: f64 = if spec.sigma == 0.0 {
                        0.0
                    } else {
                        key.child(k as u64).stream().sample(StandardNormal)
                    };
                    out[k] = bids[k] * ctr[k] * (spec.sigma * g).exp();
                }
            }
        }
    }

    fn click_uniform(&self, a: usize, k: usize) -> f64 {
        self.click.child(a as u64).child(k as u64).stream().random::<f64>()
    }

    /// Sum of the logging winners' unscaled Beta draws over `range`.
    fn pass_one(&self, range: std::ops::Range<usize>) -> f64 {
        let k = self.n_candidates();
        let (mut bids, mut x, mut s) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
        let mut sum = 0.0;
        for a in range {
            self.base_draws(a, &mut bids, &mut x);
            self.policy_scores(0, a, &bids, &x, &mut s);
            sum += x[argmax_lowest(&s)];
        }
        sum
    }

    fn draws(&self, a: usize, scale: f64) -> AuctionDraws {
        let k = self.n_candidates();
        let (mut bids, mut x) = (vec![0.0; k], vec![0.0; k]);
        self.base_draws(a, &mut bids, &mut x);
        let true_ctr: Vec<f64> = x.iter().map(|v| (v * scale).min(1.0)).collect();
        let scores = (0..self.policies.len())
            .map(|p| {
                let mut s = vec![0.0; k];
                self.policy_scores(p, a, &bids, &true_ctr, &mut s);
                s
            })
            .collect();
        AuctionDraws {
            click_uniforms: (0..k).map(|c| self.click_uniform(a, c)).collect(),
            bids,
            beta_draws: x,
            true_ctr,
            scores,
        }
    }

    fn pass_two(&self, range: std::ops::Range<usize>, scale: f64) -> Chunk {
        let n_p = self.policies.len();
        let k = self.n_candidates();
        let len = range.len();
        let mut c = Chunk {
            winners: vec![Vec::with_capacity(len); n_p],
            winner_ctr: vec![Vec::with_capacity(len); n_p],
            rewards: vec![Vec::with_capacity(len); n_p],
            shown_scores: vec![Vec::with_capacity(len); n_p],
            market_price: Vec::with_capacity(len),
        };
        let (mut bids, mut x, mut ctr) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
        let mut scores = vec![vec![0.0; k]; n_p];
        let mut clicked: Vec<Option<bool>> = vec![None; k];
        for a in range {
            self.base_draws(a, &mut bids, &mut x);
            for (c, v) in ctr.iter_mut().zip(&x) {
                *c = (v * scale).min(1.0);
            }
            clicked.fill(None);
            let mut logging_winner = 0;
            for (p, s) in scores.iter_mut().enumerate() {
                self.policy_scores(p, a, &bids, &ctr, s);
                let w = argmax_lowest(s);
                if p == 0 {
                    logging_winner = w;
                    c.market_price.push(runner_up(s, w));
                }
                let r = *clicked[w].get_or_insert_with(|| self.click_uniform(a, w) < ctr[w]);
                c.winners[p].push(w as u16);
                c.winner_ctr[p].push(ctr[w]);
                c.rewards[p].push(r);
            }
            for (p, s) in scores.iter().enumerate() {
                c.shown_scores[p].push(s[logging_winner]);
            }
        }
        c
    }
}

struct Chunk {
    winners: Vec<Vec<u16>>,
    winner_ctr: Vec<Vec<f64>>,
    rewards: Vec<Vec<bool>>,
    shown_scores: Vec<Vec<f64>>,
    market_price: Vec<f64>,
}

fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|i| i * CHUNK..((i + 1) * CHUNK).min(n))
        .collect()
}

/// A generated world. Per-auction candidate arrays are not stored; any
/// auction can be regenerated from its keys with [`SimulationWorld::regenerate_auction`].
pub struct SimulationWorld {
    pub config: SimConfig,
    /// Logging policy first.
    pub policies: Vec<PolicySpec>,
    /// Multiplier taking Beta draws to true CTRs.
    pub scale: f64,
    /// `winners[p][a]`.
    pub winners: Vec<Vec<u16>>,
    /// True CTR of each policy's winner.
    pub winner_ctr: Vec<Vec<f64>>,
    /// Realized click on each policy's winner.
    pub rewards: Vec<Vec<bool>>,
    /// Score of the logging winner under every policy.
    pub shown_scores: Vec<Vec<f64>>,
    /// Second-highest logging score of every auction.
    pub market_price: Vec<f64>,
    generator: Generator,
}

impl fmt::Debug for SimulationWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimulationWorld")
            .field("n_auctions", &self.config.n_auctions)
            .field("policies", &self.policies)
            .field("scale", &self.scale)
            .finish_non_exhaustive()
    }
}

impl SimulationWorld {
    pub fn generate(config: &SimConfig) -> Result<Self> {
        let gen = Generator::new(config)?;
        let ranges = chunks(config.n_auctions);
        let partial: Vec<f64> = ranges.par_iter().map(|r| gen.pass_one(r.clone())).collect();
        let mean_x = partial.iter().sum::<f64>() / config.n_auctions as f64;
        if !(mean_x > 0.0) {
            return Err(Error::Invariant("logging winners have zero mean CTR draw".into()));
        }
        let scale = config.base_ctr / mean_x;

        let parts: Vec<Chunk> = ranges
            .par_iter()
            .map(|r| gen.pass_two(r.clone(), scale))
            .collect();
        let n_p = gen.policies.len();
        let n = config.n_auctions;
        let mut world = SimulationWorld {
            config: config.clone(),
            policies: gen.policies.clone(),
            scale,
            winners: vec![Vec::with_capacity(n); n_p],
            winner_ctr: vec![Vec::with_capacity(n); n_p],
            rewards: vec![Vec::with_capacity(n); n_p],
            shown_scores: vec![Vec::with_capacity(n); n_p],
            market_price: Vec::with_capacity(n),
            generator: gen,
        };
        for c in parts {
            for p in 0..n_p {
                world.winners[p].extend_from_slice(&c.winners[p]);
                world.winner_ctr[p].extend_from_slice(&c.winner_ctr[p]);
                world.rewards[p].extend_from_slice(&c.rewards[p]);
                world.shown_scores[p].extend_from_slice(&c.shown_scores[p]);
            }
            world.market_price.extend_from_slice(&c.market_price);
        }
        Ok(world)
    }

    pub fn n_auctions(&self) -> usize {
        self.config.n_auctions
    }

    pub fn policy_index(&self, name: &str) -> Result<usize> {
        self.policies
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::UnknownPolicy(name.to_string()))
    }

    /// Every draw of auction `a`, recomputed from its stream keys.
    pub fn regenerate_auction(&self, a: usize) -> Result<AuctionDraws> {
        if a >= self.n_auctions() {
            return Err(Error::InvalidInput(format!("auction {a} out of range")));
        }
        Ok(self.generator.draws(a, self.scale))
    }

    /// The logged dataset: the logging winner of every auction, scored by
    /// every evaluation policy, with agreement flags.
    pub fn dataset(&self) -> Result<Dataset> {
        let eval: Vec<String> = self.policies[1..].iter().map(|p| p.name.clone()).collect();
        let n_eval = eval.len();
        let mut b = DatasetBuilder::new(eval, true)?;
        b.reserve(self.n_auctions());
        let labels: Vec<String> = (0..self.config.n_segments)
            .map(|s| self.config.segment_label(s))
            .collect();
        let width = self.n_auctions().saturating_sub(1).to_string().len();
        let mut scores = vec![0.0; n_eval];
        let mut agree = vec![false; n_eval];
        for a in 0..self.n_auctions() {
            for p in 0..n_eval {
                scores[p] = self.shown_scores[p + 1][a];
                agree[p] = self.winners[p + 1][a] == self.winners[0][a];
            }
            b.push_unchecked(
                &format!("a{a:0width$}"),
                self.config.timestamp_ms(a),
                &labels[self.config.segment_of(a)],
                self.rewards[0][a],
                self.shown_scores[0][a],
                &scores,
                Some(self.market_price[a]),
                Some(&agree),
            );
        }
        b.finish()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::from_world(self)
    }

    /// Realized value of `policy`: the mean click of its winners.
    pub fn counterfactual_value(&self, policy: &str) -> Result<f64> {
        let p = self.policy_index(policy)?;
        let clicks = self.rewards[p].iter().filter(|r| **r).count();
        Ok(clicks as f64 / self.n_auctions() as f64)
    }

    /// Mean true CTR of the policy's winners.
    pub fn expected_value(&self, policy: &str) -> Result<f64> {
        let p = self.policy_index(policy)?;
        let ctr = &self.winner_ctr[p];
        Ok(crate::estimators::pairwise_sum(ctr.len(), &|i| ctr[i]) / ctr.len() as f64)
    }

    pub fn meta_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Meta<'a> {
            version: u32,
            generator: &'static str,
            ctr_scale: f64,
            config: &'a SimConfig,
        }
        Ok(serde_json::to_string_pretty(&Meta {
            version: WORLD_META_VERSION,
            generator: "splitmix64-counter",
            ctr_scale: self.scale,
            config: &self.config,
        })?)
    }
}

/// Generates a world and returns its logged dataset and ground truth.
pub fn simulate(config: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    let world = SimulationWorld::generate(config)?;
    Ok((world.dataset()?, world.ground_truth()))
}

/// Relative lift (percent) of the expected CTR of a perturbed-CTR policy with
/// noise `sigma` over the logging policy, on `config`'s world.
pub fn expected_lift(config: &SimConfig, sigma: f64, stream: &str) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.policies = vec![PolicySpec::perturbed("__probe", sigma).with_stream(stream)];
    let world = SimulationWorld::generate(&cfg)?;
    let (v, v0) = (
        world.expected_value("__probe")?,
        world.expected_value(&cfg.logging_name)?,
    );
    crate::metrics::ctr_lift(v, v0)
}

/// Bisects the noise level whose expected CTR lift over logging equals
/// `target_lift` percent. The lift falls as sigma grows.
pub fn calibrate_sigma(config: &SimConfig, target_lift: f64, stream: &str) -> Result<f64> {
    let (mut lo, mut hi) = (0.0_f64, 8.0_f64);
    let (at_lo, at_hi) = (expected_lift(config, lo, stream)?, expected_lift(config, hi, stream)?);
    if !(at_hi <= target_lift && target_lift <= at_lo) {
        return Err(Error::Config(format!(
            "target lift {target_lift}% is outside the reachable range [{at_hi:.2}%, {at_lo:.2}%]"
        )));
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if expected_lift(config, mid, stream)? > target_lift {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

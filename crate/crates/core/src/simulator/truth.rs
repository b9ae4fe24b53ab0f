use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimulationWorld;
use crate::error::{Error, Result};
use crate::metrics::ctr_lift;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TruthCell {
    pub impressions: u64,
    pub clicks: u64,
}

impl TruthCell {
    pub fn value(&self) -> f64 {
        if self.impressions == 0 {
            0.0
        } else {
            self.clicks as f64 / self.impressions as f64
        }
    }

    fn add(&mut self, click: bool) {
        self.impressions += 1;
        self.clicks += u64::from(click);
    }
}

/// Realized value of every policy, overall and per day and segment.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Logging policy first.
    pub policies: Vec<String>,
    pub overall: Vec<TruthCell>,
    /// `by_day[p][d]`.
    pub by_day: Vec<Vec<TruthCell>>,
    /// `by_segment[p][s]`; empty when loaded from CSV.
    pub by_segment: Vec<Vec<TruthCell>>,
}

impl GroundTruth {
    pub(super) fn from_world(world: &SimulationWorld) -> Self {
        let cfg = &world.config;
        let n_p = world.policies.len();
        let mut t = GroundTruth {
            policies: world.policies.iter().map(|p| p.name.clone()).collect(),
            overall: vec![TruthCell::default(); n_p],
            by_day: vec![vec![TruthCell::default(); cfg.n_days]; n_p],
            by_segment: vec![vec![TruthCell::default(); cfg.n_segments]; n_p],
        };
        for a in 0..cfg.n_auctions {
            let (d, s) = (cfg.day_of(a), cfg.segment_of(a));
            for p in 0..n_p {
                let r = world.rewards[p][a];
                t.overall[p].add(r);
                t.by_day[p][d].add(r);
                t.by_segment[p][s].add(r);
            }
        }
        t
    }

    pub fn logging(&self) -> &str {
        &self.policies[0]
    }

    pub fn policy_index(&self, name: &str) -> Result<usize> {
        self.policies
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::UnknownPolicy(name.to_string()))
    }

    pub fn value(&self, policy: &str) -> Result<f64> {
        Ok(self.overall[self.policy_index(policy)?].value())
    }

    pub fn n_days(&self) -> usize {
        self.by_day.first().map_or(0, Vec::len)
    }

    /// True relative lift of `policy` over logging, overall and per day.
    pub fn lifts(&self, policy: &str) -> Result<(f64, Vec<f64>)> {
        let p = self.policy_index(policy)?;
        let overall = ctr_lift(self.overall[p].value(), self.overall[0].value())?;
        let daily = self.by_day[p]
            .iter()
            .zip(&self.by_day[0])
            .map(|(c, c0)| ctr_lift(c.value(), c0.value()))
            .collect::<Result<_>>()?;
        Ok((overall, daily))
    }

    /// `policy,day,impressions,clicks,value`, with a final `all` row per policy.
    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["policy", "day", "impressions", "clicks", "value"])?;
        for (p, name) in self.policies.iter().enumerate() {
            let rows = self.by_day[p]
                .iter()
                .enumerate()
                .map(|(d, c)| (d.to_string(), c))
                .chain(std::iter::once(("all".to_string(), &self.overall[p])));
            for (day, c) in rows {
                w.write_record([
                    name.clone(),
                    day,
                    c.impressions.to_string(),
                    c.clicks.to_string(),
                    c.value().to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file))
    }

    /// Reads a file written by [`GroundTruth::write_csv`]. The first policy
    /// listed is taken as the logging policy.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        struct Row {
            policy: String,
            day: String,
            impressions: u64,
            clicks: u64,
        }
        let mut t = GroundTruth {
            policies: Vec::new(),
            overall: Vec::new(),
            by_day: Vec::new(),
            by_segment: Vec::new(),
        };
        for row in csv::Reader::from_reader(file).deserialize() {
            let row: Row = row?;
            let p = match t.policies.iter().position(|p| *p == row.policy) {
                Some(p) => p,
                None => {
                    t.policies.push(row.policy.clone());
                    t.overall.push(TruthCell::default());
                    t.by_day.push(Vec::new());
                    t.policies.len() - 1
                }
            };
            let cell = TruthCell {
                impressions: row.impressions,
                clicks: row.clicks,
            };
            if row.day == "all" {
                t.overall[p] = cell;
            } else {
                let d: usize = row.day.parse().map_err(|_| {
                    Error::InvalidInput(format!("{}: bad day `{}`", path.display(), row.day))
                })?;
                if d != t.by_day[p].len() {
                    return Err(Error::InvalidInput(format!(
                        "{}: days of `{}` are not consecutive",
                        path.display(),
                        row.policy
                    )));
                }
                t.by_day[p].push(cell);
            }
        }
        if t.policies.is_empty() || t.by_day.iter().any(|d| d.len() != t.by_day[0].len()) {
            return Err(Error::InvalidInput(format!(
                "{}: ground truth is empty or ragged",
                path.display()
            )));
        }
        Ok(t)
    }
}

/// One day of an emulated online test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbDay {
    pub policy: String,
    pub day: usize,
    pub impressions: u64,
    pub logging_clicks: u64,
    pub policy_clicks: u64,
    /// Relative lift in percent.
    pub truth_lift: f64,
}

/// Splits the auctions into `n_days` contiguous blocks and reports every
/// evaluation policy's true lift over logging in each block.
pub fn make_ab_schedule(world: &SimulationWorld, n_days: usize) -> Result<Vec<AbDay>> {
    let n = world.n_auctions();
    if n_days == 0 || n_days > n {
        return Err(Error::Config(format!(
            "n_days must be in [1, {n}], got {n_days}"
        )));
    }
    let day_of = |a: usize| (a as u128 * n_days as u128 / n as u128) as usize;
    let mut out = Vec::new();
    for (p, spec) in world.policies.iter().enumerate().skip(1) {
        let mut cells = vec![(0u64, 0u64, 0u64); n_days];
        for a in 0..n {
            let c = &mut cells[day_of(a)];
            c.0 += 1;
            c.1 += u64::from(world.rewards[0][a]);
            c.2 += u64::from(world.rewards[p][a]);
        }
        for (day, (imps, c0, c1)) in cells.into_iter().enumerate() {
            out.push(AbDay {
                policy: spec.name.clone(),
                day,
                impressions: imps,
                logging_clicks: c0,
                policy_clicks: c1,
                truth_lift: ctr_lift(c1 as f64, c0 as f64)?,
            });
        }
    }
    Ok(out)
}

//! Impression-log data model, CSV ingestion and segment grouping.
//!
//! A [`Dataset`] is stored column-wise so that multi-million-row logs stay
//! compact; [`ImpressionRecord`] is the row view used for construction and
//! inspection.
//!
//! The canonical CSV layout is
//!
//! ```text
//! impression_id,timestamp_ms,segment_key,reward,score_logging,score_eval.<policy>...,market_price[,agree.<policy>...]
//! ```
//!
//! An empty `market_price` field means the runner-up score was not logged.
//! The optional `agree.<policy>` columns (0/1) are written by the simulator
//! and record whether the evaluation policy would have shown the same ad.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAY_MS: i64 = 86_400_000;
const HOUR_MS: i64 = 3_600_000;

/// One logged auction outcome: the ad shown by the logging policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionRecord {
    pub impression_id: String,
    pub timestamp_ms: i64,
    pub segment_key: String,
    pub reward: bool,
    /// Score of the shown ad under the logging policy.
    pub score_logging: f64,
    /// Score of the shown ad under each evaluation policy's scorer.
    pub score_eval: BTreeMap<String, f64>,
    /// Second-highest logging-policy score in the auction.
    pub market_price: Option<f64>,
    /// Whether each evaluation policy would have picked the shown ad.
    /// Empty for external logs.
    pub agreement: BTreeMap<String, bool>,
}

/// Why a row was quarantined during ingestion.
#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    Unparseable { column: String, value: String },
    NonFinite { column: String },
    Negative { column: String },
    InvalidReward(String),
    MissingValue { column: String },
    /// The logged winner scored below its own market price.
    WinnerConsistency { score_logging: f64, market_price: f64 },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Unparseable { column, value } => {
                write!(f, "unparseable value {value:?} in column {column}")
            }
            RejectReason::NonFinite { column } => write!(f, "non-finite value in column {column}"),
            RejectReason::Negative { column } => write!(f, "negative value in column {column}"),
            RejectReason::InvalidReward(v) => write!(f, "reward must be 0 or 1, got {v:?}"),
            RejectReason::MissingValue { column } => write!(f, "missing value in column {column}"),
            RejectReason::WinnerConsistency {
                score_logging,
                market_price,
            } => write!(
                f,
                "winner consistency: score_logging {score_logging} < market_price {market_price}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based line number in the source file (the header is line 1).
    pub line: u64,
    pub reason: RejectReason,
}

/// Maps the canonical fields onto the columns of an external log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub impression_id: String,
    pub timestamp_ms: String,
    pub segment_key: String,
    pub reward: String,
    pub score_logging: String,
    /// Every column starting with this prefix is an evaluation-policy score;
    /// the remainder of the column name is the policy name.
    pub score_eval_prefix: String,
    /// Optional column; when absent from the file every market price is missing.
    pub market_price: String,
    pub agreement_prefix: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            impression_id: "impression_id".into(),
            timestamp_ms: "timestamp_ms".into(),
            segment_key: "segment_key".into(),
            reward: "reward".into(),
            score_logging: "score_logging".into(),
            score_eval_prefix: "score_eval.".into(),
            market_price: "market_price".into(),
            agreement_prefix: "agree.".into(),
        }
    }
}

/// A validated, immutable impression log.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    policy_names: Vec<String>,
    impression_ids: Vec<Box<str>>,
    timestamps_ms: Vec<i64>,
    segment_labels: Vec<String>,
    segment_of: Vec<u32>,
    rewards: Vec<bool>,
    score_logging: Vec<f64>,
    score_eval: Vec<Vec<f64>>,
    market_price: Vec<Option<f64>>,
    agreement: Option<Vec<Vec<bool>>>,
}

impl Dataset {
    pub fn from_records(
        policy_names: Vec<String>,
        records: impl IntoIterator<Item = ImpressionRecord>,
    ) -> Result<Self> {
        let mut records = records.into_iter().peekable();
        let with_agreement = records
            .peek()
            .map(|r| !r.agreement.is_empty())
            .unwrap_or(false);
        let mut builder = DatasetBuilder::new(policy_names, with_agreement)?;
        for record in records {
            builder.push_record(&record)?;
        }
        builder.finish()
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn policy_names(&self) -> &[String] {
        &self.policy_names
    }

    pub fn policy_index(&self, policy: &str) -> Result<usize> {
        self.policy_names
            .iter()
            .position(|p| p == policy)
            .ok_or_else(|| Error::UnknownPolicy(policy.to_string()))
    }

    pub fn impression_id(&self, i: usize) -> &str {
        &self.impression_ids[i]
    }

    pub fn timestamps_ms(&self) -> &[i64] {
        &self.timestamps_ms
    }

    pub fn segment_key(&self, i: usize) -> &str {
        &self.segment_labels[self.segment_of[i] as usize]
    }

    pub fn rewards(&self) -> &[bool] {
        &self.rewards
    }

    pub fn score_logging(&self) -> &[f64] {
        &self.score_logging
    }

    /// Scores of the shown ads under evaluation policy `policy`.
    pub fn score_eval(&self, policy: usize) -> &[f64] {
        &self.score_eval[policy]
    }

    pub fn market_prices(&self) -> &[Option<f64>] {
        &self.market_price
    }

    pub fn has_agreement(&self) -> bool {
        self.agreement.is_some()
    }

    pub fn agreement(&self, policy: usize) -> Option<&[bool]> {
        self.agreement.as_ref().map(|a| a[policy].as_slice())
    }

    pub fn clicks(&self) -> usize {
        self.rewards.iter().filter(|r| **r).count()
    }

    /// Empirical CTR of the logging policy, `clicks / n`.
    pub fn logged_ctr(&self) -> f64 {
        self.clicks() as f64 / self.len() as f64
    }

    /// Day index of every record, counted from the day of the earliest record.
    pub fn day_indices(&self) -> Vec<u32> {
        let first = self
            .timestamps_ms
            .iter()
            .map(|t| t.div_euclid(DAY_MS))
            .min()
            .unwrap_or(0);
        self.timestamps_ms
            .iter()
            .map(|t| (t.div_euclid(DAY_MS) - first) as u32)
            .collect()
    }

    pub fn record(&self, i: usize) -> ImpressionRecord {
        ImpressionRecord {
            impression_id: self.impression_ids[i].to_string(),
            timestamp_ms: self.timestamps_ms[i],
            segment_key: self.segment_key(i).to_string(),
            reward: self.rewards[i],
            score_logging: self.score_logging[i],
            score_eval: self
                .policy_names
                .iter()
                .zip(&self.score_eval)
                .map(|(p, s)| (p.clone(), s[i]))
                .collect(),
            market_price: self.market_price[i],
            agreement: match &self.agreement {
                Some(a) => self
                    .policy_names
                    .iter()
                    .zip(a)
                    .map(|(p, s)| (p.clone(), s[i]))
                    .collect(),
                None => BTreeMap::new(),
            },
        }
    }

    pub fn records(&self) -> impl Iterator<Item = ImpressionRecord> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    /// Per-record segment assignment under `feature`.
    pub fn segment_assignment(&self, feature: SegmentFeature) -> SegmentAssignment {
        match feature {
            SegmentFeature::SegmentKey => {
                // Relabel so segment indices follow sorted key order.
                let mut order: Vec<usize> = (0..self.segment_labels.len()).collect();
                order.sort_by(|a, b| self.segment_labels[*a].cmp(&self.segment_labels[*b]));
                let mut remap = vec![0u32; order.len()];
                for (new, old) in order.iter().enumerate() {
                    remap[*old] = new as u32;
                }
                SegmentAssignment {
                    feature,
                    labels: order.iter().map(|i| self.segment_labels[*i].clone()).collect(),
                    of_record: self.segment_of.iter().map(|s| remap[*s as usize]).collect(),
                }
            }
            SegmentFeature::All => SegmentAssignment {
                feature,
                labels: vec!["all".to_string()],
                of_record: vec![0; self.len()],
            },
            SegmentFeature::Day => {
                let days = self.day_indices();
                SegmentAssignment::from_keys(feature, days.iter().map(|d| format!("day-{d:03}")))
            }
            SegmentFeature::HourOfDay => SegmentAssignment::from_keys(
                feature,
                self.timestamps_ms
                    .iter()
                    .map(|t| format!("hour-{:02}", t.rem_euclid(DAY_MS) / HOUR_MS)),
            ),
        }
    }

    /// Writes the dataset in the canonical CSV layout.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(BufWriter::new(file))
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(writer);
        let mut header: Vec<String> = [
            "impression_id",
            "timestamp_ms",
            "segment_key",
            "reward",
            "score_logging",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.policy_names.iter().map(|p| format!("score_eval.{p}")));
        header.push("market_price".into());
        if self.agreement.is_some() {
            header.extend(self.policy_names.iter().map(|p| format!("agree.{p}")));
        }
        w.write_record(&header)?;

        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            row.clear();
            row.push(self.impression_ids[i].to_string());
            row.push(self.timestamps_ms[i].to_string());
            row.push(self.segment_key(i).to_string());
            row.push(if self.rewards[i] { "1" } else { "0" }.into());
            row.push(self.score_logging[i].to_string());
            for s in &self.score_eval {
                row.push(s[i].to_string());
            }
            row.push(self.market_price[i].map(|m| m.to_string()).unwrap_or_default());
            if let Some(agreement) = &self.agreement {
                for a in agreement {
                    row.push(if a[i] { "1" } else { "0" }.into());
                }
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Incremental, validating constructor for [`Dataset`].
#[derive(Debug)]
pub struct DatasetBuilder {
    data: Dataset,
    segment_index: HashMap<String, u32>,
}

impl DatasetBuilder {
    pub fn new(policy_names: Vec<String>, with_agreement: bool) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for p in &policy_names {
            if !seen.insert(p) {
                return Err(Error::Config(format!("policy `{p}` declared twice")));
            }
        }
        let n_policies = policy_names.len();
        Ok(DatasetBuilder {
            data: Dataset {
                policy_names,
                impression_ids: Vec::new(),
                timestamps_ms: Vec::new(),
                segment_labels: Vec::new(),
                segment_of: Vec::new(),
                rewards: Vec::new(),
                score_logging: Vec::new(),
                score_eval: vec![Vec::new(); n_policies],
                market_price: Vec::new(),
                agreement: with_agreement.then(|| vec![Vec::new(); n_policies]),
            },
            segment_index: HashMap::new(),
        })
    }

    pub fn reserve(&mut self, additional: usize) {
        let d = &mut self.data;
        d.impression_ids.reserve(additional);
        d.timestamps_ms.reserve(additional);
        d.segment_of.reserve(additional);
        d.rewards.reserve(additional);
        d.score_logging.reserve(additional);
        d.market_price.reserve(additional);
        for s in &mut d.score_eval {
            s.reserve(additional);
        }
        if let Some(a) = &mut d.agreement {
            for col in a {
                col.reserve(additional);
            }
        }
    }

    /// Validates the record against the dataset invariants and appends it.
    pub fn push_record(&mut self, record: &ImpressionRecord) -> Result<()> {
        let n_policies = self.data.policy_names.len();
        if record.score_eval.len() != n_policies
            || self
                .data
                .policy_names
                .iter()
                .any(|p| !record.score_eval.contains_key(p))
        {
            return Err(Error::InvalidInput(format!(
                "record {} does not carry exactly the declared evaluation policies",
                record.impression_id
            )));
        }
        let eval: Vec<f64> = self
            .data
            .policy_names
            .iter()
            .map(|p| record.score_eval[p])
            .collect();
        let agreement = match &self.data.agreement {
            Some(_) => Some(
                self.data
                    .policy_names
                    .iter()
                    .map(|p| {
                        record.agreement.get(p).copied().ok_or_else(|| {
                            Error::InvalidInput(format!(
                                "record {} lacks the agreement flag for `{p}`",
                                record.impression_id
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        if let Some(reason) = validate_scores(record.score_logging, &eval, record.market_price) {
            return Err(Error::InvalidInput(format!(
                "record {}: {reason}",
                record.impression_id
            )));
        }
        self.push_unchecked(
            &record.impression_id,
            record.timestamp_ms,
            &record.segment_key,
            record.reward,
            record.score_logging,
            &eval,
            record.market_price,
            agreement.as_deref(),
        );
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push_unchecked(
        &mut self,
        impression_id: &str,
        timestamp_ms: i64,
        segment_key: &str,
        reward: bool,
        score_logging: f64,
        score_eval: &[f64],
        market_price: Option<f64>,
        agreement: Option<&[bool]>,
    ) {
        let seg = match self.segment_index.get(segment_key) {
            Some(s) => *s,
            None => {
                let s = self.data.segment_labels.len() as u32;
                self.data.segment_labels.push(segment_key.to_string());
                self.segment_index.insert(segment_key.to_string(), s);
                s
            }
        };
        let d = &mut self.data;
        d.impression_ids.push(impression_id.into());
        d.timestamps_ms.push(timestamp_ms);
        d.segment_of.push(seg);
        d.rewards.push(reward);
        d.score_logging.push(score_logging);
        for (col, s) in d.score_eval.iter_mut().zip(score_eval) {
            col.push(*s);
        }
        d.market_price.push(market_price);
        if let (Some(cols), Some(flags)) = (&mut d.agreement, agreement) {
            for (col, f) in cols.iter_mut().zip(flags) {
                col.push(*f);
            }
        }
    }

    pub fn finish(self) -> Result<Dataset> {
        if self.data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(self.data)
    }
}

fn validate_scores(
    score_logging: f64,
    eval: &[f64],
    market_price: Option<f64>,
) -> Option<RejectReason> {
    let check = |column: &str, v: f64| {
        if !v.is_finite() {
            Some(RejectReason::NonFinite {
                column: column.to_string(),
            })
        } else if v < 0.0 {
            Some(RejectReason::Negative {
                column: column.to_string(),
            })
        } else {
            None
        }
    };
    if let Some(r) = check("score_logging", score_logging) {
        return Some(r);
    }
    for v in eval {
        if let Some(r) = check("score_eval", *v) {
            return Some(r);
        }
    }
    if let Some(m) = market_price {
        if let Some(r) = check("market_price", m) {
            return Some(r);
        }
        if m > score_logging {
            return Some(RejectReason::WinnerConsistency {
                score_logging,
                market_price: m,
            });
        }
    }
    None
}

/// Result of [`ingest_csv`]: the accepted rows plus every quarantined row.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub rejected: Vec<RejectedRow>,
}

impl Ingested {
    /// Writes the rejected-row report as a `line,reason` CSV sidecar.
    pub fn write_rejections(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["line", "reason"])?;
        for r in &self.rejected {
            w.write_record([r.line.to_string(), r.reason.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

struct ColumnPlan {
    impression_id: usize,
    timestamp_ms: usize,
    segment_key: usize,
    reward: usize,
    score_logging: usize,
    score_eval: Vec<(String, usize)>,
    market_price: Option<usize>,
    agreement: Option<Vec<usize>>,
}

impl ColumnPlan {
    fn resolve(header: &csv::StringRecord, mapping: &ColumnMapping) -> Result<Self> {
        let find = |name: &str| header.iter().position(|h| h == name);
        let require =
            |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
        let score_eval: Vec<(String, usize)> = header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                h.strip_prefix(mapping.score_eval_prefix.as_str())
                    .map(|p| (p.to_string(), i))
            })
            .collect();
        let agreement_cols: Vec<Option<usize>> = score_eval
            .iter()
            .map(|(p, _)| find(&format!("{}{p}", mapping.agreement_prefix)))
            .collect();
        let agreement = if agreement_cols.iter().all(Option::is_some) && !score_eval.is_empty() {
            Some(agreement_cols.into_iter().flatten().collect())
        } else {
            None
        };
        Ok(ColumnPlan {
            impression_id: require(&mapping.impression_id)?,
            timestamp_ms: require(&mapping.timestamp_ms)?,
            segment_key: require(&mapping.segment_key)?,
            reward: require(&mapping.reward)?,
            score_logging: require(&mapping.score_logging)?,
            score_eval,
            market_price: find(&mapping.market_price),
            agreement,
        })
    }
}

/// Reads an impression log. Rows that fail validation are quarantined into
/// [`Ingested::rejected`] with their line number; they never abort ingestion.
pub fn ingest_csv(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<Ingested> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file), mapping)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, mapping: &ColumnMapping) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let plan = ColumnPlan::resolve(&header, mapping)?;
    let policy_names: Vec<String> = plan.score_eval.iter().map(|(p, _)| p.clone()).collect();
    let mut builder = DatasetBuilder::new(policy_names, plan.agreement.is_some())?;
    let mut rejected = Vec::new();

    let mut record = csv::StringRecord::new();
    let mut eval = vec![0.0; plan.score_eval.len()];
    let mut agree = vec![false; plan.score_eval.len()];
    while rdr.read_record(&mut record)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&record, &plan, &mut eval, &mut agree) {
            Ok(row) => builder.push_unchecked(
                &record[plan.impression_id],
                row.timestamp_ms,
                &record[plan.segment_key],
                row.reward,
                row.score_logging,
                &eval,
                row.market_price,
                plan.agreement.as_ref().map(|_| agree.as_slice()),
            ),
            Err(reason) => rejected.push(RejectedRow { line, reason }),
        }
    }
    if !rejected.is_empty() {
        log::warn!("quarantined {} rows during ingestion", rejected.len());
    }
    Ok(Ingested {
        dataset: builder.finish()?,
        rejected,
    })
}

struct ParsedRow {
    timestamp_ms: i64,
    reward: bool,
    score_logging: f64,
    market_price: Option<f64>,
}

fn parse_row(
    record: &csv::StringRecord,
    plan: &ColumnPlan,
    eval: &mut [f64],
    agree: &mut [bool],
) -> std::result::Result<ParsedRow, RejectReason> {
    let real = |idx: usize, column: &str| -> std::result::Result<f64, RejectReason> {
        let raw = record[idx].trim();
        if raw.is_empty() {
            return Err(RejectReason::MissingValue {
                column: column.to_string(),
            });
        }
        let v = f64::from_str(raw).map_err(|_| RejectReason::Unparseable {
            column: column.to_string(),
            value: raw.to_string(),
        })?;
        if !v.is_finite() {
            return Err(RejectReason::NonFinite {
                column: column.to_string(),
            });
        }
        if v < 0.0 {
            return Err(RejectReason::Negative {
                column: column.to_string(),
            });
        }
        Ok(v)
    };
    let flag = |idx: usize, column: &str| match record[idx].trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(RejectReason::Unparseable {
            column: column.to_string(),
            value: other.to_string(),
        }),
    };

    let ts_raw = record[plan.timestamp_ms].trim();
    let timestamp_ms = i64::from_str(ts_raw).map_err(|_| RejectReason::Unparseable {
        column: "timestamp_ms".into(),
        value: ts_raw.to_string(),
    })?;
    let reward = match record[plan.reward].trim() {
        "1" => true,
        "0" => false,
        other => return Err(RejectReason::InvalidReward(other.to_string())),
    };
    let score_logging = real(plan.score_logging, "score_logging")?;
    for (slot, (policy, idx)) in eval.iter_mut().zip(&plan.score_eval) {
        *slot = real(*idx, &format!("score_eval.{policy}"))?;
    }
    let market_price = match plan.market_price {
        Some(idx) if !record[idx].trim().is_empty() => Some(real(idx, "market_price")?),
        _ => None,
    };
    if let Some(m) = market_price {
        if m > score_logging {
            return Err(RejectReason::WinnerConsistency {
                score_logging,
                market_price: m,
            });
        }
    }
    if let Some(cols) = &plan.agreement {
        for ((slot, idx), (policy, _)) in agree.iter_mut().zip(cols).zip(&plan.score_eval) {
            *slot = flag(*idx, &format!("agree.{policy}"))?;
        }
    }
    Ok(ParsedRow {
        timestamp_ms,
        reward,
        score_logging,
        market_price,
    })
}

/// Features a dataset can be segmented by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentFeature {
    SegmentKey,
    Day,
    HourOfDay,
    All,
}

impl FromStr for SegmentFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segment_key" => Ok(SegmentFeature::SegmentKey),
            "day" => Ok(SegmentFeature::Day),
            "hour_of_day" => Ok(SegmentFeature::HourOfDay),
            "all" => Ok(SegmentFeature::All),
            other => Err(Error::UnknownFeature(other.to_string())),
        }
    }
}

impl fmt::Display for SegmentFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            SegmentFeature::SegmentKey => "segment_key",
            SegmentFeature::Day => "day",
            SegmentFeature::HourOfDay => "hour_of_day",
            SegmentFeature::All => "all",
        })
    }
}

/// Per-record segment index under one feature. Labels are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentAssignment {
    pub feature: SegmentFeature,
    pub labels: Vec<String>,
    pub of_record: Vec<u32>,
}

impl SegmentAssignment {
    fn from_keys(feature: SegmentFeature, keys: impl Iterator<Item = String>) -> Self {
        let keys: Vec<String> = keys.collect();
        let labels: Vec<String> = {
            let mut l = keys.clone();
            l.sort();
            l.dedup();
            l
        };
        let index: HashMap<&str, u32> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as u32))
            .collect();
        let of_record = keys.iter().map(|k| index[k.as_str()]).collect();
        SegmentAssignment {
            feature,
            labels,
            of_record,
        }
    }

    pub fn n_segments(&self) -> usize {
        self.labels.len()
    }

    /// Record indices of every segment, in input order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.labels.len()];
        for (i, s) in self.of_record.iter().enumerate() {
            out[*s as usize].push(i);
        }
        out
    }
}

/// Partitions record indices by the segment key under `feature`.
pub fn group_by_segment(data: &Dataset, feature: &str) -> Result<BTreeMap<String, Vec<usize>>> {
    let feature = SegmentFeature::from_str(feature)?;
    let assignment = data.segment_assignment(feature);
    Ok(assignment
        .labels
        .iter()
        .cloned()
        .zip(assignment.members())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "impression_id,timestamp_ms,segment_key,reward,score_logging,score_eval.alt,market_price\n";

    fn ingest(body: &str) -> Result<Ingested> {
        ingest_reader(format!("{HEADER}{body}").as_bytes(), &ColumnMapping::default())
    }

    fn record(id: &str, seg: &str) -> ImpressionRecord {
        ImpressionRecord {
            impression_id: id.into(),
            timestamp_ms: 0,
            segment_key: seg.into(),
            reward: false,
            score_logging: 1.0,
            score_eval: [("alt".to_string(), 0.5)].into(),
            market_price: None,
            agreement: BTreeMap::new(),
        }
    }

    #[test]
    fn well_formed_file_ingests_all_rows() {
        let got = ingest("a,0,A,1,2.0,1.5,1.0\nb,1,A,0,3.0,0.1,\nc,2,B,0,1.0,1.0,0.5\n").unwrap();
        assert_eq!(got.dataset.len(), 3);
        assert!(got.rejected.is_empty());
        assert_eq!(got.dataset.policy_names(), ["alt"]);
        assert_eq!(got.dataset.market_prices()[1], None);
        assert_eq!(got.dataset.clicks(), 1);
    }

    #[test]
    fn negative_score_row_is_quarantined() {
        let got = ingest("a,0,A,1,2.0,1.5,1.0\nb,1,A,0,-3.0,0.1,\nc,2,B,0,1.0,1.0,0.5\n").unwrap();
        assert_eq!(got.dataset.len(), 2);
        assert_eq!(got.rejected.len(), 1);
        assert_eq!(got.rejected[0].line, 3);
    }

    #[test]
    fn winner_consistency_violation_is_rejected() {
        let got = ingest("a,0,A,1,2.0,1.5,2.5\nb,1,A,0,3.0,0.1,\n").unwrap();
        assert_eq!(got.dataset.len(), 1);
        assert!(matches!(
            got.rejected[0].reason,
            RejectReason::WinnerConsistency { .. }
        ));
        assert!(got.rejected[0].reason.to_string().contains("winner consistency"));
    }

    #[test]
    fn non_finite_score_reports_line_number() {
        let got = ingest("a,0,A,1,2.0,1.5,1.0\nb,1,A,0,inf,0.1,\n").unwrap();
        assert_eq!(got.rejected[0].line, 3);
        assert!(matches!(got.rejected[0].reason, RejectReason::NonFinite { .. }));
    }

    #[test]
    fn missing_column_is_named() {
        let err = ingest_reader(
            "impression_id,timestamp_ms,segment_key,score_logging\n".as_bytes(),
            &ColumnMapping::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "reward"));
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = ingest_reader("".as_bytes(), &ColumnMapping::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
        assert!(matches!(ingest("").unwrap_err(), Error::EmptyDataset));
    }

    #[test]
    fn custom_mapping_reads_renamed_columns() {
        let body = "id,ts,day,click,bid_score,cand.new\nx,5,d1,1,0.4,0.9\n";
        let mapping = ColumnMapping {
            impression_id: "id".into(),
            timestamp_ms: "ts".into(),
            segment_key: "day".into(),
            reward: "click".into(),
            score_logging: "bid_score".into(),
            score_eval_prefix: "cand.".into(),
            ..ColumnMapping::default()
        };
        let got = ingest_reader(body.as_bytes(), &mapping).unwrap();
        assert_eq!(got.dataset.policy_names(), ["new"]);
        assert_eq!(got.dataset.market_prices(), [None]);
    }

    #[test]
    fn grouping_partitions_in_input_order() {
        let data = Dataset::from_records(
            vec!["alt".into()],
            ["A", "A", "B", "B"]
                .iter()
                .enumerate()
                .map(|(i, s)| record(&i.to_string(), s)),
        )
        .unwrap();
        let groups = group_by_segment(&data, "segment_key").unwrap();
        assert_eq!(groups["A"], vec![0, 1]);
        assert_eq!(groups["B"], vec![2, 3]);
    }

    #[test]
    fn grouping_degenerate_partitions() {
        let one = Dataset::from_records(vec!["alt".into()], [record("0", "A")]).unwrap();
        assert_eq!(group_by_segment(&one, "segment_key").unwrap().len(), 1);
        let same = Dataset::from_records(
            vec!["alt".into()],
            (0..10).map(|i| record(&i.to_string(), "Z")),
        )
        .unwrap();
        let g = group_by_segment(&same, "segment_key").unwrap();
        assert_eq!(g["Z"].len(), 10);
    }

    #[test]
    fn unknown_feature_is_a_configuration_error() {
        let one = Dataset::from_records(vec!["alt".into()], [record("0", "A")]).unwrap();
        assert!(matches!(
            group_by_segment(&one, "country"),
            Err(Error::UnknownFeature(_))
        ));
    }

    #[test]
    fn day_and_hour_features() {
        let mut a = record("0", "A");
        a.timestamp_ms = DAY_MS + 3 * HOUR_MS;
        let mut b = record("1", "A");
        b.timestamp_ms = 2 * DAY_MS + 5;
        let data = Dataset::from_records(vec!["alt".into()], [a, b]).unwrap();
        let days = group_by_segment(&data, "day").unwrap();
        assert_eq!(days.keys().collect::<Vec<_>>(), ["day-000", "day-001"]);
        let hours = group_by_segment(&data, "hour_of_day").unwrap();
        assert_eq!(hours.keys().collect::<Vec<_>>(), ["hour-00", "hour-03"]);
    }

    #[test]
    fn builder_rejects_inconsistent_records() {
        let mut bad = record("0", "A");
        bad.market_price = Some(5.0);
        assert!(Dataset::from_records(vec!["alt".into()], [bad]).is_err());
        let mut missing = record("0", "A");
        missing.score_eval.clear();
        assert!(Dataset::from_records(vec!["alt".into()], [missing]).is_err());
    }
}

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpm::{quantile_bins, BinTable, BinningStrategy, DpmModel, DEFAULT_APS_FLOOR};
use crate::error::{Error, Result};
use crate::logdata::{Dataset, SegmentAssignment, SegmentFeature};

pub const MODEL_DOCUMENT_VERSION: u32 = 1;

/// Which scorer's values a model is fitted on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ScoreSource {
    Logging,
    Eval(String),
}

impl ScoreSource {
    /// Scores of the logged shown ads under this scorer.
    pub fn scores<'a>(&self, data: &'a Dataset) -> Result<&'a [f64]> {
        match self {
            ScoreSource::Logging => Ok(data.score_logging()),
            ScoreSource::Eval(p) => Ok(data.score_eval(data.policy_index(p)?)),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            ScoreSource::Logging => "logging",
            ScoreSource::Eval(p) => p,
        }
    }
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreSource::Logging => f.write_str("logging"),
            ScoreSource::Eval(p) => write!(f, "eval:{p}"),
        }
    }
}

impl FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logging" => Ok(ScoreSource::Logging),
            _ => match s.strip_prefix("eval:") {
                Some(p) if !p.is_empty() => Ok(ScoreSource::Eval(p.to_string())),
                _ => Err(Error::Config(format!(
                    "invalid score source `{s}` (accepted: logging, eval:<policy>)"
                ))),
            },
        }
    }
}

impl From<ScoreSource> for String {
    fn from(s: ScoreSource) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for ScoreSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Which logged values stand in for the market price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarketPriceMode {
    /// The logged runner-up score, i.e. the highest competing score.
    RunnerUp,
    /// The shown ad's own score.
    #[default]
    WinnerProxy,
}

impl fmt::Display for MarketPriceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            MarketPriceMode::RunnerUp => "runner_up",
            MarketPriceMode::WinnerProxy => "winner_proxy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpmSettings {
    pub market_price_mode: MarketPriceMode,
    pub binning: BinningStrategy,
    pub aps_floor: f64,
}

impl Default for DpmSettings {
    fn default() -> Self {
        DpmSettings {
            market_price_mode: MarketPriceMode::default(),
            binning: BinningStrategy::default(),
            aps_floor: DEFAULT_APS_FLOOR,
        }
    }
}

/// Samples the market-price distribution of `source` is fitted on.
///
/// Runner-up prices are logged in the logging policy's score space only, so
/// `RunnerUp` with an evaluation source is a mode mismatch.
pub fn training_samples<'a>(
    data: &'a Dataset,
    source: &ScoreSource,
    mode: MarketPriceMode,
) -> Result<Cow<'a, [f64]>> {
    match (mode, source) {
        (MarketPriceMode::WinnerProxy, _) => Ok(Cow::Borrowed(source.scores(data)?)),
        (MarketPriceMode::RunnerUp, ScoreSource::Logging) => data
            .market_prices()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m.ok_or_else(|| {
                    Error::ModeMismatch(format!(
                        "runner_up mode needs a market price on every record; record {} has none",
                        data.impression_id(i)
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()
            .map(Cow::Owned),
        (MarketPriceMode::RunnerUp, ScoreSource::Eval(p)) => Err(Error::ModeMismatch(format!(
            "runner-up prices are only logged in the logging policy's score space, not for `{p}`"
        ))),
    }
}

/// Per-segment fitted models for one scorer; the lookup behind `aps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApsTable {
    pub policy_name: String,
    pub source: ScoreSource,
    pub market_price_mode: MarketPriceMode,
    pub binning: BinningStrategy,
    pub feature: SegmentFeature,
    pub models: BTreeMap<String, DpmModel>,
    /// Modelling assumptions carried into every report.
    pub assumptions: Vec<String>,
}

impl ApsTable {
    pub fn model(&self, segment: &str) -> Result<&DpmModel> {
        self.models
            .get(segment)
            .ok_or_else(|| Error::UnknownSegment(segment.to_string()))
    }

    /// Models aligned with the labels of `assignment`.
    pub fn aligned<'a>(&'a self, assignment: &SegmentAssignment) -> Result<Vec<&'a DpmModel>> {
        assignment.labels.iter().map(|l| self.model(l)).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.models.values().try_for_each(DpmModel::check_invariants)
    }

    pub fn to_json(&self) -> Result<String> {
        let aps_floor = self
            .models
            .values()
            .next()
            .map(|m| m.aps_floor)
            .unwrap_or(DEFAULT_APS_FLOOR);
        let doc = DpmDocument {
            version: MODEL_DOCUMENT_VERSION,
            model_type: "dpm".into(),
            policy: self.policy_name.clone(),
            source: self.source.clone(),
            market_price_mode: self.market_price_mode,
            binning: self.binning,
            segment_feature: self.feature,
            aps_floor,
            assumptions: self.assumptions.clone(),
            segments: self
                .models
                .values()
                .map(|m| SegmentDocument {
                    key: m.segment_key.clone(),
                    requested_bins: m.requested_bins,
                    edges: m.bins.edges.clone(),
                    counts: m.bins.counts.clone(),
                    p: m.p.clone(),
                    survival: m.survival.clone(),
                    winning: m.winning.clone(),
                    h: m.hazard.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses a model document and re-validates every invariant.
    pub fn from_json(json: &str) -> Result<Self> {
        let doc: DpmDocument = serde_json::from_str(json)?;
        if doc.version != MODEL_DOCUMENT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model document version {}",
                doc.version
            )));
        }
        if doc.model_type != "dpm" {
            return Err(Error::InvalidInput(format!(
                "expected model_type dpm, found {}",
                doc.model_type
            )));
        }
        let mut models = BTreeMap::new();
        for seg in doc.segments {
            let bins = BinTable {
                edges: seg.edges,
                counts: seg.counts,
            };
            let mut rebuilt = DpmModel::from_bins(seg.key.clone(), bins, doc.aps_floor)?;
            rebuilt.requested_bins = seg.requested_bins;
            let stored = DpmModel {
                segment_key: seg.key.clone(),
                bins: rebuilt.bins.clone(),
                p: seg.p,
                survival: seg.survival,
                winning: seg.winning,
                hazard: seg.h,
                aps_floor: doc.aps_floor,
                requested_bins: seg.requested_bins,
            };
            stored.check_invariants()?;
            let consistent = [
                (&stored.p, &rebuilt.p),
                (&stored.survival, &rebuilt.survival),
                (&stored.winning, &rebuilt.winning),
                (&stored.hazard, &rebuilt.hazard),
            ]
            .iter()
            .all(|(a, b)| a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-12));
            if !consistent {
                return Err(Error::Invariant(format!(
                    "segment {}: stored tables disagree with the bin counts",
                    seg.key
                )));
            }
            models.insert(seg.key, stored);
        }
        if models.is_empty() {
            return Err(Error::InvalidInput("model document has no segments".into()));
        }
        Ok(ApsTable {
            policy_name: doc.policy,
            source: doc.source,
            market_price_mode: doc.market_price_mode,
            binning: doc.binning,
            feature: doc.segment_feature,
            models,
            assumptions: doc.assumptions,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DpmDocument {
    version: u32,
    model_type: String,
    policy: String,
    source: ScoreSource,
    market_price_mode: MarketPriceMode,
    binning: BinningStrategy,
    segment_feature: SegmentFeature,
    aps_floor: f64,
    assumptions: Vec<String>,
    segments: Vec<SegmentDocument>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDocument {
    key: String,
    requested_bins: usize,
    edges: Vec<f64>,
    counts: Vec<u64>,
    p: Vec<f64>,
    #[serde(rename = "S")]
    survival: Vec<f64>,
    #[serde(rename = "W")]
    winning: Vec<f64>,
    h: Vec<f64>,
}

/// Fits one model per segment of `assignment` on the training samples of
/// `source`, sizing each segment's bins with `settings.binning`.
pub fn fit_dpm_segmented(
    data: &Dataset,
    assignment: &SegmentAssignment,
    source: &ScoreSource,
    settings: &DpmSettings,
) -> Result<ApsTable> {
    let samples = training_samples(data, source, settings.market_price_mode)?;
    let members = assignment.members();
    let models = members
        .par_iter()
        .zip(assignment.labels.par_iter())
        .map(|(idx, label)| {
            if idx.is_empty() {
                return Err(Error::EmptySegment(label.clone()));
            }
            let mut sorted: Vec<f64> = idx.iter().map(|i| samples[*i]).collect();
            sorted.sort_unstable_by(f64::total_cmp);
            let requested = settings.binning.bins_for(sorted.len())?;
            let mut model = DpmModel::from_bins(
                label.clone(),
                quantile_bins(&sorted, requested),
                settings.aps_floor,
            )?;
            model.requested_bins = requested;
            if model.num_bins() < requested {
                log::warn!(
                    "segment {label}: {requested} bins requested, {} distinct edges used",
                    model.num_bins()
                );
            }
            Ok((label.clone(), model))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;

    let mut assumptions = vec![match settings.market_price_mode {
        MarketPriceMode::RunnerUp => "market price: logged runner-up scores".to_string(),
        MarketPriceMode::WinnerProxy => "market price: shown-ad scores used as proxy".to_string(),
    }];
    if let ScoreSource::Eval(p) = source {
        assumptions.push(format!(
            "policy `{p}` model fitted on its own scores of the logged shown ads"
        ));
    }
    Ok(ApsTable {
        policy_name: source.label().to_string(),
        source: source.clone(),
        market_price_mode: settings.market_price_mode,
        binning: settings.binning,
        feature: assignment.feature,
        models,
        assumptions,
    })
}

/// Approximate propensity score of a `score` in `segment`.
pub fn aps(table: &ApsTable, segment: &str, score: f64) -> Result<f64> {
    Ok(table.model(segment)?.aps(score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logdata::ImpressionRecord;

    fn dataset(sizes: &[usize], with_price: bool) -> Dataset {
        let mut records = Vec::new();
        for (g, n) in sizes.iter().enumerate() {
            for i in 0..*n {
                let s = (i as f64 + 1.0) / *n as f64;
                records.push(ImpressionRecord {
                    impression_id: format!("{g}-{i}"),
                    timestamp_ms: 0,
                    segment_key: format!("seg{g}"),
                    reward: i % 3 == 0,
                    score_logging: s,
                    score_eval: [("alt".to_string(), s * 2.0)].into(),
                    market_price: with_price.then_some(s / 2.0),
                    agreement: BTreeMap::new(),
                });
            }
        }
        Dataset::from_records(vec!["alt".into()], records).unwrap()
    }

    #[test]
    fn segment_sizes_drive_bin_counts() {
        let data = dataset(&[2_000, 16_000], false);
        let assignment = data.segment_assignment(SegmentFeature::SegmentKey);
        let table =
            fit_dpm_segmented(&data, &assignment, &ScoreSource::Logging, &DpmSettings::default())
                .unwrap();
        assert_eq!(table.models["seg0"].num_bins(), 8);
        assert_eq!(table.models["seg1"].num_bins(), 16);
        table.check_invariants().unwrap();
    }

    #[test]
    fn one_segment_gives_one_model() {
        let data = dataset(&[50], true);
        let assignment = data.segment_assignment(SegmentFeature::SegmentKey);
        let table =
            fit_dpm_segmented(&data, &assignment, &ScoreSource::Logging, &DpmSettings::default())
                .unwrap();
        assert_eq!(table.models.len(), 1);
        assert!(matches!(aps(&table, "nope", 0.5), Err(Error::UnknownSegment(_))));
    }

    #[test]
    fn runner_up_mode_requires_every_market_price() {
        let mut records: Vec<_> = dataset(&[10], true).records().collect();
        records[3].market_price = None;
        let data = Dataset::from_records(vec!["alt".into()], records).unwrap();
        let assignment = data.segment_assignment(SegmentFeature::SegmentKey);
        let settings = DpmSettings {
            market_price_mode: MarketPriceMode::RunnerUp,
            ..DpmSettings::default()
        };
        let err = fit_dpm_segmented(&data, &assignment, &ScoreSource::Logging, &settings);
        assert!(matches!(err, Err(Error::ModeMismatch(_))));
        let err = fit_dpm_segmented(&data, &assignment, &ScoreSource::Eval("alt".into()), &settings);
        assert!(matches!(err, Err(Error::ModeMismatch(_))));
    }

    #[test]
    fn runner_up_mode_trains_on_market_prices() {
        let data = dataset(&[100], true);
        let assignment = data.segment_assignment(SegmentFeature::SegmentKey);
        let settings = DpmSettings {
            market_price_mode: MarketPriceMode::RunnerUp,
            binning: BinningStrategy::Static { bins: 4 },
            ..DpmSettings::default()
        };
        let table = fit_dpm_segmented(&data, &assignment, &ScoreSource::Logging, &settings).unwrap();
        let model = &table.models["seg0"];
        assert_eq!(*model.bins.edges.last().unwrap(), 0.5);
        // Winner scores above every market price land in the certain-win bin.
        assert_eq!(model.aps(0.9), 1.0);
    }

    #[test]
    fn json_round_trip_and_revalidation() {
        let data = dataset(&[300, 700], false);
        let assignment = data.segment_assignment(SegmentFeature::SegmentKey);
        let table = fit_dpm_segmented(
            &data,
            &assignment,
            &ScoreSource::Eval("alt".into()),
            &DpmSettings::default(),
        )
        .unwrap();
        let json = table.to_json().unwrap();
        assert!(json.contains("\"S\"") && json.contains("\"version\": 1"));
        assert_eq!(ApsTable::from_json(&json).unwrap(), table);

        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["segments"][0]["h"][0] = serde_json::json!(0.9);
        assert!(ApsTable::from_json(&doc.to_string()).is_err());
    }

    #[test]
    fn score_source_parsing() {
        assert_eq!("logging".parse::<ScoreSource>().unwrap(), ScoreSource::Logging);
        assert_eq!(
            "eval:bc".parse::<ScoreSource>().unwrap(),
            ScoreSource::Eval("bc".into())
        );
        assert!("eval:".parse::<ScoreSource>().is_err());
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dpm::{BinningStrategy, DpmSettings, MarketPriceMode, DEFAULT_APS_FLOOR, DEFAULT_Z_ALPHA_SQ};
use crate::error::{Error, Result};
use crate::estimators::{CapScope, CapSettings, Estimator, DEFAULT_CAP_PERCENTILE};
use crate::logdata::{ColumnMapping, SegmentFeature};
use crate::metrics::{ErrorMode, LiftMode};
use crate::parametric::Family;
use crate::simulator::SimConfig;

/// A complete experiment description, usually read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub dpm: DpmConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub estimators: EstimatorConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

/// External logs in place of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub logs: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpmConfig {
    pub market_price_mode: MarketPriceMode,
    pub z_alpha_sq: f64,
    pub aps_floor: f64,
    pub segmentation_candidates: Vec<SegmentFeature>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_bins: Option<usize>,
}

impl Default for DpmConfig {
    fn default() -> Self {
        DpmConfig {
            market_price_mode: MarketPriceMode::default(),
            z_alpha_sq: DEFAULT_Z_ALPHA_SQ,
            aps_floor: DEFAULT_APS_FLOOR,
            segmentation_candidates: vec![
                SegmentFeature::SegmentKey,
                SegmentFeature::Day,
                SegmentFeature::HourOfDay,
                SegmentFeature::All,
            ],
            static_bins: None,
        }
    }
}

impl DpmConfig {
    pub fn binning(&self) -> BinningStrategy {
        match self.static_bins {
            Some(bins) => BinningStrategy::Static { bins },
            None => BinningStrategy::Adaptive {
                z_alpha_sq: self.z_alpha_sq,
            },
        }
    }

    pub fn settings(&self) -> DpmSettings {
        DpmSettings {
            market_price_mode: self.market_price_mode,
            binning: self.binning(),
            aps_floor: self.aps_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub enabled: bool,
    pub families: Vec<Family>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            enabled: true,
            families: Family::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Any of `ips`, `snips`, `capped`, `deterministic`.
    pub list: Vec<String>,
    pub cap_percentile: f64,
    pub cap_scope: CapScope,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            list: ["ips", "snips", "capped", "deterministic"]
                .map(String::from)
                .to_vec(),
            cap_percentile: DEFAULT_CAP_PERCENTILE,
            cap_scope: CapScope::Global,
        }
    }
}

impl EstimatorConfig {
    pub fn parsed(&self) -> Result<Vec<Estimator>> {
        let mut out: Vec<Estimator> = Vec::new();
        for name in &self.list {
            let e: Estimator = name
                .parse()
                .map_err(|e: Error| Error::Config(format!("estimators.list: {e}")))?;
            if !out.contains(&e) {
                out.push(e);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("estimators.list: at least one estimator is required".into()));
        }
        Ok(out)
    }

    pub fn cap(&self) -> CapSettings {
        CapSettings {
            percentile: self.cap_percentile,
            scope: self.cap_scope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub lift_mode: LiftMode,
    pub ttest_mode: ErrorMode,
    /// Overall true lifts smaller than this (in percent) are not separable.
    pub min_separable_lift: f64,
    /// Significance level of the daily-lift t-test behind the separability flag.
    pub separability_alpha: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            lift_mode: LiftMode::Relative,
            ttest_mode: ErrorMode::Absolute,
            min_separable_lift: 1.0,
            separability_alpha: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text` after applying `key=value` overrides to dotted keys.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.simulation, &self.data) {
            (Some(sim), None) => sim.validate()?,
            (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "exactly one of [simulation] or [data] must be set".into(),
                ))
            }
        }
        self.estimators.parsed()?;
        let p = self.estimators.cap_percentile;
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::Config("estimators.cap_percentile must be in (0, 100]".into()));
        }
        if !(self.dpm.aps_floor > 0.0 && self.dpm.aps_floor < 1.0) {
            return Err(Error::Config("dpm.aps_floor must be in (0, 1)".into()));
        }
        if !(self.dpm.z_alpha_sq > 0.0) {
            return Err(Error::Config("dpm.z_alpha_sq must be positive".into()));
        }
        if self.dpm.static_bins == Some(0) {
            return Err(Error::Config("dpm.static_bins must be >= 1".into()));
        }
        if self.dpm.segmentation_candidates.is_empty() {
            return Err(Error::Config("dpm.segmentation_candidates must not be empty".into()));
        }
        if self.baseline.enabled && self.baseline.families.is_empty() {
            return Err(Error::Config("baseline.families must not be empty when enabled".into()));
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` in `table`, parsing `value` as a TOML value and
/// falling back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

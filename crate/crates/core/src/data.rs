//! Time-series entities and everything that turns them into training
//! sequences: a synthetic multi-timescale generator, CSV ingestion,
//! period splitting, normalization and sliding-window segmentation.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Matrix;
use crate::memory::SequenceId;

/// One continuous multichannel record: drivers, responses and day-of-year
/// labels sharing the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesEntity {
    pub entity_id: Arc<str>,
    /// Absolute step index of row 0 in the original series.
    pub offset: usize,
    pub inputs: Matrix,
    pub responses: Matrix,
    pub day_of_year: Vec<u16>,
    pub static_attrs: Option<Vec<f64>>,
    pub driver_names: Vec<String>,
    pub response_names: Vec<String>,
}

impl TimeSeriesEntity {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the shared-length and day-of-year invariants.
    pub fn validate(&self, year_length: u16) -> Result<()> {
        let n = self.len();
        if self.responses.rows() != n || self.day_of_year.len() != n {
            return Err(Error::Data(format!(
                "entity {}: inputs ({n}), responses ({}) and day_of_year ({}) differ in length",
                self.entity_id,
                self.responses.rows(),
                self.day_of_year.len()
            )));
        }
        for w in self.day_of_year.windows(2) {
            let expected = if w[0] >= year_length { 1 } else { w[0] + 1 };
            // Leap-year CSV data may legitimately run to day 366 then wrap.
            if w[1] != expected && !(w[1] == 1 && w[0] >= 365) {
                return Err(Error::Data(format!(
                    "entity {}: day_of_year jumps from {} to {}",
                    self.entity_id, w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the listed response channels (the modelling target).
    pub fn select_responses(&self, channels: &[usize]) -> Result<TimeSeriesEntity> {
        let k = self.responses.cols();
        if channels.is_empty() || channels.iter().any(|&c| c >= k) {
            return Err(Error::Config(format!(
                "response channels {channels:?} not available (entity has {k})"
            )));
        }
        let mut responses = Matrix::zeros(self.len(), channels.len());
        for r in 0..self.len() {
            for (j, &c) in channels.iter().enumerate() {
                responses.set(r, j, self.responses.get(r, c));
            }
        }
        Ok(TimeSeriesEntity {
            responses,
            response_names: channels
                .iter()
                .map(|&c| self.response_names[c].clone())
                .collect(),
            ..self.clone()
        })
    }

    /// Rows `range` (entity-relative) as a new entity whose offset keeps
    /// absolute step numbering intact.
    pub fn view(&self, range: Range<usize>) -> TimeSeriesEntity {
        TimeSeriesEntity {
            entity_id: self.entity_id.clone(),
            offset: self.offset + range.start,
            inputs: self.inputs.slice_rows(range.start, range.end),
            responses: self.responses.slice_rows(range.start, range.end),
            day_of_year: self.day_of_year[range].to_vec(),
            static_attrs: self.static_attrs.clone(),
            driver_names: self.driver_names.clone(),
            response_names: self.response_names.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Names of the synthetic response channels, in column order.
pub const SYNTHETIC_RESPONSES: [&str; 3] = ["slow_storage", "snowpack", "outflow"];
pub const SYNTHETIC_DRIVERS: [&str; 6] =
    ["precipitation", "temperature", "radiation", "humidity", "wind", "noise"];

/// Parameters of the three-store bucket model behind the synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub years: usize,
    pub year_length: u16,
    pub entities: usize,
    /// Years simulated and discarded before recording starts.
    pub spinup_years: usize,
    /// Probability of a wet step.
    pub wet_probability: f64,
    /// Mean depth of a wet step (before the interannual factor).
    pub precip_mean: f64,
    /// Lag-one correlation of the yearly log wetness anomaly.
    pub wetness_persistence: f64,
    /// Standard deviation of the yearly log wetness innovation.
    pub wetness_sd: f64,
    pub temp_mean: f64,
    pub temp_amplitude: f64,
    pub temp_noise_sd: f64,
    /// Snowmelt per degree above freezing.
    pub melt_factor: f64,
    /// Fraction of rain routed straight to the fast store.
    pub quickflow_fraction: f64,
    /// Per-step drainage coefficient of the fast store.
    pub fast_recession: f64,
    /// Per-step drainage coefficient of the slow store.
    pub slow_recession: f64,
    /// Evapotranspiration per degree, scaled by relative storage.
    pub et_factor: f64,
    /// Storage at which evapotranspiration runs at half its potential.
    pub et_half_storage: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            years: 40,
            year_length: 120,
            entities: 1,
            spinup_years: 5,
            wet_probability: 0.3,
            precip_mean: 4.0,
            wetness_persistence: 0.5,
            wetness_sd: 0.3,
            temp_mean: 4.0,
            temp_amplitude: 12.0,
            temp_noise_sd: 2.5,
            melt_factor: 0.6,
            quickflow_fraction: 0.5,
            fast_recession: 0.5,
            slow_recession: 0.01,
            et_factor: 0.03,
            et_half_storage: 60.0,
        }
    }
}

/// Generates synthetic daily drivers and three responses with distinct
/// memory scales: a slow soil-like store, a seasonal snowpack and a fast
/// outflow store. Deterministic for a fixed `seed`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Vec<TimeSeriesEntity>> {
    if config.years == 0 || config.entities == 0 {
        return Err(Error::Config(
            "synthetic generator needs years >= 1 and entities >= 1".into(),
        ));
    }
    if config.year_length < 2 {
        return Err(Error::Config("year_length must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&config.wet_probability)
        || !(0.0..=1.0).contains(&config.quickflow_fraction)
        || !(0.0..=1.0).contains(&config.fast_recession)
        || !(0.0..=1.0).contains(&config.slow_recession)
    {
        return Err(Error::Config(
            "probabilities and recession coefficients must lie in [0, 1]".into(),
        ));
    }
    (0..config.entities)
        .map(|e| generate_entity(config, seed, e))
        .collect()
}

fn generate_entity(config: &SyntheticConfig, seed: u64, index: usize) -> Result<TimeSeriesEntity> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let year_len = config.year_length as usize;
    let total_years = config.years + config.spinup_years;
    let n = config.years * year_len;
    let skip = config.spinup_years * year_len;

    let mut inputs = Matrix::zeros(n, SYNTHETIC_DRIVERS.len());
    let mut responses = Matrix::zeros(n, SYNTHETIC_RESPONSES.len());
    let mut doy = Vec::with_capacity(n);

    let mut log_wetness = 0.0_f64;
    let mut temp_anomaly = 0.0_f64;
    let mut snow = 0.0_f64;
    let mut fast = 0.0_f64;
    let mut slow = config.et_half_storage;

    for year in 0..total_years {
        log_wetness = config.wetness_persistence * log_wetness
            + config.wetness_sd * normal.sample(&mut rng);
        let wet_depth = config.precip_mean * log_wetness.exp();
        let depth = if wet_depth > 0.0 {
            Some(Exp::new(1.0 / wet_depth).expect("positive rate"))
        } else {
            None
        };

        for day in 0..year_len {
            let phase = 2.0 * std::f64::consts::PI * day as f64 / year_len as f64;
            temp_anomaly = 0.7 * temp_anomaly + config.temp_noise_sd * normal.sample(&mut rng);
            let temp = config.temp_mean - config.temp_amplitude * phase.cos() + temp_anomaly;

            let wet = rng.random::<f64>() < config.wet_probability;
            let precip = match (&depth, wet) {
                (Some(d), true) => d.sample(&mut rng),
                _ => 0.0,
            };
            let radiation =
                (15.0 - 10.0 * phase.cos() + 3.0 * normal.sample(&mut rng)).max(0.0);
            let humidity = 0.6 + 0.1 * normal.sample(&mut rng) + if wet { 0.2 } else { 0.0 };
            let wind = (2.0 + normal.sample(&mut rng)).abs();
            let noise = normal.sample(&mut rng);

            // Snow accumulates below freezing and melts above it.
            let (rain, snowfall) = if temp < 0.0 { (0.0, precip) } else { (precip, 0.0) };
            let melt = (config.melt_factor * temp.max(0.0)).min(snow + snowfall);
            snow += snowfall - melt;

            // Fast store: a share of rain only, drained within a few steps.
            fast += config.quickflow_fraction * rain;
            let outflow = config.fast_recession * fast;
            fast -= outflow;

            // Slow store: infiltrating rain plus snowmelt, losing water to
            // drainage and temperature-driven evapotranspiration.
            let infiltration = (1.0 - config.quickflow_fraction) * rain + melt;
            let et = config.et_factor * temp.max(0.0) * slow / (slow + config.et_half_storage);
            let drainage = config.slow_recession * slow;
            slow = (slow + infiltration - et - drainage).max(0.0);

            let step = year * year_len + day;
            if step >= skip {
                let r = step - skip;
                let row = inputs.row_mut(r);
                row.copy_from_slice(&[precip, temp, radiation, humidity, wind, noise]);
                responses.row_mut(r).copy_from_slice(&[slow, snow, outflow]);
                doy.push(day as u16 + 1);
            }
        }
    }

    Ok(TimeSeriesEntity {
        entity_id: Arc::from(format!("synthetic-{index}")),
        offset: 0,
        inputs,
        responses,
        day_of_year: doy,
        static_attrs: None,
        driver_names: SYNTHETIC_DRIVERS.iter().map(|s| s.to_string()).collect(),
        response_names: SYNTHETIC_RESPONSES.iter().map(|s| s.to_string()).collect(),
    })
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Column layout expected by [`load_csv`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub drivers: Vec<String>,
    pub responses: Vec<String>,
    #[serde(default)]
    pub statics: Vec<String>,
    /// Reject missing values instead of forward-filling them.
    #[serde(default = "default_true")]
    pub strict: bool,
}

fn default_true() -> bool {
    true
}

/// Reads `entity,date,<driver...>,<response...>,<static...>` rows into one
/// entity per distinct id. Rows must be grouped by entity and sorted by
/// date with daily spacing.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<TimeSeriesEntity>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Vec<TimeSeriesEntity>> {
    if schema.drivers.is_empty() || schema.responses.is_empty() {
        return Err(Error::Config(
            "csv schema needs at least one driver and one response".into(),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}'")))
    };
    let entity_col = find("entity")?;
    let date_col = find("date")?;
    let driver_cols = schema.drivers.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let response_cols = schema.responses.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let static_cols = schema.statics.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut entities = Vec::new();
    let mut seen = HashSet::new();
    let mut current: Option<CsvAccumulator> = None;

    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row_no = i + 2; // 1-based, after the header
        let id = record.get(entity_col).unwrap_or_default().to_string();
        let date_str = record.get(date_col).unwrap_or_default();
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|e| {
            Error::Data(format!("row {row_no}: bad date '{date_str}': {e}"))
        })?;

        let new_entity = current.as_ref().map_or(true, |c| c.id != id);
        if new_entity {
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!(
                    "rows not grouped by entity: '{id}' reappears at row {row_no}"
                )));
            }
            if let Some(done) = current.take() {
                entities.push(done.finish(schema)?);
            }
            current = Some(CsvAccumulator::new(id));
        }
        let acc = current.as_mut().expect("accumulator present");
        if let Some(prev) = acc.last_date {
            if date <= prev {
                return Err(Error::Data(format!(
                    "row {row_no}: non-monotone dates for entity '{}' ({prev} then {date})",
                    acc.id
                )));
            }
            if (date - prev).num_days() != 1 {
                return Err(Error::Data(format!(
                    "row {row_no}: dates for entity '{}' skip from {prev} to {date}",
                    acc.id
                )));
            }
        }
        acc.last_date = Some(date);
        acc.doy.push(date.ordinal() as u16);

        let parse = |cols: &[usize], names: &[String], prev: Option<&[f64]>| -> Result<Vec<f64>> {
            cols.iter()
                .zip(names)
                .enumerate()
                .map(|(j, (&c, name))| {
                    let raw = record.get(c).unwrap_or_default();
                    let v = if raw.is_empty() {
                        f64::NAN
                    } else {
                        raw.parse::<f64>().map_err(|_| {
                            Error::Data(format!("row {row_no}, column '{name}': '{raw}' is not a number"))
                        })?
                    };
                    if v.is_finite() {
                        return Ok(v);
                    }
                    if schema.strict {
                        return Err(Error::Data(format!(
                            "row {row_no}, column '{name}': missing or non-finite value"
                        )));
                    }
                    prev.map(|p| p[j]).ok_or_else(|| {
                        Error::Data(format!(
                            "row {row_no}, column '{name}': cannot forward-fill the first row of an entity"
                        ))
                    })
                })
                .collect()
        };
        let drivers = parse(&driver_cols, &schema.drivers, acc.drivers.last().map(Vec::as_slice))?;
        let responses =
            parse(&response_cols, &schema.responses, acc.responses.last().map(Vec::as_slice))?;
        if acc.statics.is_none() && !static_cols.is_empty() {
            acc.statics = Some(parse(&static_cols, &schema.statics, None)?);
        }
        acc.drivers.push(drivers);
        acc.responses.push(responses);
    }
    if let Some(done) = current.take() {
        entities.push(done.finish(schema)?);
    }
    if entities.is_empty() {
        return Err(Error::Data("csv contains no data rows".into()));
    }
    Ok(entities)
}

struct CsvAccumulator {
    id: String,
    last_date: Option<NaiveDate>,
    doy: Vec<u16>,
    drivers: Vec<Vec<f64>>,
    responses: Vec<Vec<f64>>,
    statics: Option<Vec<f64>>,
}

impl CsvAccumulator {
    fn new(id: String) -> Self {
        Self {
            id,
            last_date: None,
            doy: Vec::new(),
            drivers: Vec::new(),
            responses: Vec::new(),
            statics: None,
        }
    }

    fn finish(self, schema: &CsvSchema) -> Result<TimeSeriesEntity> {
        Ok(TimeSeriesEntity {
            entity_id: Arc::from(self.id),
            offset: 0,
            inputs: Matrix::from_rows(&self.drivers)?,
            responses: Matrix::from_rows(&self.responses)?,
            day_of_year: self.doy,
            static_attrs: self.statics,
            driver_names: schema.drivers.clone(),
            response_names: schema.responses.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Period splitting
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeriodBounds {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl PeriodBounds {
    /// Contiguous bounds from fractions of `len` (test takes the remainder).
    pub fn from_fractions(len: usize, train: f64, val: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 {
            return Err(Error::Config(format!(
                "period fractions train={train}, val={val} do not fit in [0, 1]"
            )));
        }
        let a = (len as f64 * train).round() as usize;
        let b = (len as f64 * (train + val)).round() as usize;
        Ok(Self {
            train: 0..a,
            val: a..b.min(len),
            test: b.min(len)..len,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SplitEntity {
    pub train: TimeSeriesEntity,
    pub val: TimeSeriesEntity,
    pub test: TimeSeriesEntity,
    /// Set when the validation or test period is empty.
    pub empty_period_warning: bool,
}

/// Cuts an entity into train/validation/test views with absolute step
/// indices preserved.
pub fn split_periods(entity: &TimeSeriesEntity, bounds: &PeriodBounds) -> Result<SplitEntity> {
    let PeriodBounds { train, val, test } = bounds;
    for (name, r) in [("train", train), ("val", val), ("test", test)] {
        if r.start > r.end || r.end > entity.len() {
            return Err(Error::Config(format!(
                "{name} bounds {}..{} out of range for length {}",
                r.start,
                r.end,
                entity.len()
            )));
        }
    }
    if train.end > val.start || val.end > test.start {
        return Err(Error::Config(format!(
            "period bounds overlap or are out of order: {train:?} / {val:?} / {test:?}"
        )));
    }
    let empty_period_warning = val.is_empty() || test.is_empty();
    if empty_period_warning {
        log::warn!("entity {}: empty validation or test period", entity.entity_id);
    }
    Ok(SplitEntity {
        train: entity.view(train.clone()),
        val: entity.view(val.clone()),
        test: entity.view(test.clone()),
        empty_period_warning,
    })
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    fn fit<'a>(
        columns: usize,
        rows: impl Iterator<Item = &'a [f64]> + Clone,
        strict: bool,
        what: &str,
    ) -> Result<Self> {
        let mut mean = vec![0.0; columns];
        let mut count = 0usize;
        for row in rows.clone() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data(format!("cannot fit {what} statistics on zero rows")));
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; columns];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut std = Vec::with_capacity(columns);
        for (c, s) in var.into_iter().enumerate() {
            let sd = (s / count as f64).sqrt();
            if sd > 1e-12 && sd.is_finite() {
                std.push(sd);
            } else if strict {
                return Err(Error::Data(format!("{what} channel {c} has zero variance")));
            } else {
                std.push(1.0);
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn invert(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }

    fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(c, x)| (x - self.mean[c]) / self.std[c])
            .collect()
    }

    fn invert_vec(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(c, x)| x * self.std[c] + self.mean[c])
            .collect()
    }
}

/// Per-channel Gaussian normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub inputs: ChannelStats,
    pub responses: ChannelStats,
    pub statics: Option<ChannelStats>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormMode {
    /// Zero-variance channels are an error.
    Strict,
    /// Zero-variance channels get a unit standard deviation.
    #[default]
    Lenient,
}

impl NormStats {
    pub fn fit(entities: &[TimeSeriesEntity], mode: NormMode) -> Result<Self> {
        let first = entities
            .first()
            .ok_or_else(|| Error::Data("cannot fit normalization on no entities".into()))?;
        let strict = mode == NormMode::Strict;
        let inputs = ChannelStats::fit(
            first.inputs.cols(),
            entities.iter().flat_map(|e| (0..e.len()).map(move |r| e.inputs.row(r))),
            strict,
            "input",
        )?;
        let responses = ChannelStats::fit(
            first.responses.cols(),
            entities.iter().flat_map(|e| (0..e.len()).map(move |r| e.responses.row(r))),
            strict,
            "response",
        )?;
        let statics = match &first.static_attrs {
            Some(s) => Some(ChannelStats::fit(
                s.len(),
                entities.iter().filter_map(|e| e.static_attrs.as_deref()),
                false, // a single entity always has zero static variance
                "static",
            )?),
            None => None,
        };
        Ok(Self {
            inputs,
            responses,
            statics,
        })
    }

    pub fn apply(&self, e: &TimeSeriesEntity) -> Result<TimeSeriesEntity> {
        self.check(e)?;
        Ok(TimeSeriesEntity {
            inputs: self.inputs.apply(&e.inputs),
            responses: self.responses.apply(&e.responses),
            static_attrs: match (&self.statics, &e.static_attrs) {
                (Some(s), Some(v)) => Some(s.apply_vec(v)),
                _ => e.static_attrs.clone(),
            },
            ..e.clone()
        })
    }

    pub fn invert(&self, e: &TimeSeriesEntity) -> Result<TimeSeriesEntity> {
        self.check(e)?;
        Ok(TimeSeriesEntity {
            inputs: self.inputs.invert(&e.inputs),
            responses: self.responses.invert(&e.responses),
            static_attrs: match (&self.statics, &e.static_attrs) {
                (Some(s), Some(v)) => Some(s.invert_vec(v)),
                _ => e.static_attrs.clone(),
            },
            ..e.clone()
        })
    }

    fn check(&self, e: &TimeSeriesEntity) -> Result<()> {
        if e.inputs.cols() != self.inputs.mean.len()
            || e.responses.cols() != self.responses.mean.len()
        {
            return Err(Error::Shape(format!(
                "entity {} has {}/{} channels, statistics expect {}/{}",
                e.entity_id,
                e.inputs.cols(),
                e.responses.cols(),
                self.inputs.mean.len(),
                self.responses.mean.len()
            )));
        }
        Ok(())
    }
}

/// Normalizes `entities`, fitting statistics on them when `stats` is `None`.
pub fn normalize(
    entities: &[TimeSeriesEntity],
    stats: Option<&NormStats>,
    mode: NormMode,
) -> Result<(Vec<TimeSeriesEntity>, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(entities, mode)?,
    };
    let out = entities
        .iter()
        .map(|e| stats.apply(e))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}

pub fn denormalize(entities: &[TimeSeriesEntity], stats: &NormStats) -> Result<Vec<TimeSeriesEntity>> {
    entities.iter().map(|e| stats.invert(e)).collect()
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub window: usize,
    pub stride: usize,
}

impl SegmentationConfig {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let s = Self { window, stride };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "segmentation needs window >= 2 and 1 <= stride <= window (got W={}, stride={})",
                self.window, self.stride
            )));
        }
        Ok(())
    }

    pub fn overlap(&self) -> usize {
        self.window - self.stride
    }
}

/// A training or inference window. Its initial step `T` is the step just
/// before the window; the window covers source steps `T+1 ..= T+W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: SequenceId,
    /// W x D driver block (static attributes appended as constant columns).
    pub inputs: Matrix,
    /// W x K response block.
    pub targets: Matrix,
    /// Response at the initial step.
    pub y0: Vec<f64>,
    pub doy: Vec<u16>,
}

impl Sequence {
    pub fn initial_step(&self) -> usize {
        self.id.initial_step
    }

    pub fn window(&self) -> usize {
        self.inputs.rows()
    }
}

/// Slides a window over `entity`, emitting sequences at relative initial
/// steps `start, start + stride, ...`. Row `start` serves as the first
/// boundary response `y0`.
pub fn segment(entity: &TimeSeriesEntity, seg: &SegmentationConfig, start: usize) -> Result<Vec<Sequence>> {
    seg.validate()?;
    let n = entity.len();
    let w = seg.window;
    if n < start + w + 1 {
        return Err(Error::Data(format!(
            "entity {} has {n} steps from offset {start}; window {w} needs at least {}",
            entity.entity_id,
            start + w + 1
        )));
    }
    let count = (n - 1 - w - start) / seg.stride + 1;
    let statics = entity.static_attrs.as_deref().unwrap_or(&[]);
    let d = entity.inputs.cols() + statics.len();

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = start + i * seg.stride;
        let mut inputs = Matrix::zeros(w, d);
        for s in 0..w {
            let row = inputs.row_mut(s);
            row[..entity.inputs.cols()].copy_from_slice(entity.inputs.row(t + 1 + s));
            row[entity.inputs.cols()..].copy_from_slice(statics);
        }
        out.push(Sequence {
            id: SequenceId::new(entity.entity_id.clone(), entity.offset + t),
            inputs,
            targets: entity.responses.slice_rows(t + 1, t + 1 + w),
            y0: entity.responses.row(t).to_vec(),
            doy: entity.day_of_year[t + 1..t + 1 + w].to_vec(),
        });
    }
    Ok(out)
}

/// Segments every entity and returns the sequences sorted by id.
pub fn segment_all(entities: &[TimeSeriesEntity], seg: &SegmentationConfig) -> Result<Vec<Sequence>> {
    let mut all = Vec::new();
    for e in entities {
        all.extend(segment(e, seg, 0)?);
    }
    all.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_entity(n: usize) -> TimeSeriesEntity {
        let inputs = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64 * 0.5).collect()).unwrap();
        let responses = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        TimeSeriesEntity {
            entity_id: Arc::from("a"),
            offset: 0,
            inputs,
            responses,
            day_of_year: (0..n).map(|i| (i % 365) as u16 + 1).collect(),
            static_attrs: None,
            driver_names: vec!["x".into()],
            response_names: vec!["y".into()],
        }
    }

    #[test]
    fn segment_initial_steps_follow_stride() {
        // 9 usable steps after the boundary row.
        let e = ramp_entity(10);
        let seqs = segment(&e, &SegmentationConfig::new(4, 2).unwrap(), 0).unwrap();
        let ts: Vec<_> = seqs.iter().map(|s| s.initial_step()).collect();
        assert_eq!(ts, vec![0, 2, 4]);
        for s in &seqs {
            let t = s.initial_step();
            assert_eq!(s.y0, vec![t as f64]);
            assert_eq!(s.targets.get(0, 0), (t + 1) as f64);
        }
    }

    #[test]
    fn segment_rejects_short_entity() {
        let e = ramp_entity(4);
        assert!(segment(&e, &SegmentationConfig::new(4, 4).unwrap(), 0).is_err());
        assert!(SegmentationConfig::new(1, 1).is_err());
        assert!(SegmentationConfig::new(4, 5).is_err());
    }

    #[test]
    fn non_overlapping_segments_tile_the_series() {
        let e = ramp_entity(23);
        let seqs = segment(&e, &SegmentationConfig::new(5, 5).unwrap(), 0).unwrap();
        let tiled: Vec<f64> = seqs.iter().flat_map(|s| s.targets.column(0)).collect();
        let expected: Vec<f64> = (1..=tiled.len()).map(|i| i as f64).collect();
        assert_eq!(tiled, expected);
    }

    #[test]
    fn statics_are_broadcast() {
        let mut e = ramp_entity(8);
        e.static_attrs = Some(vec![3.0, 4.0]);
        let seqs = segment(&e, &SegmentationConfig::new(3, 3).unwrap(), 0).unwrap();
        assert_eq!(seqs[0].inputs.cols(), 3);
        assert!((0..3).all(|r| seqs[1].inputs.row(r)[1..] == [3.0, 4.0]));
    }

    #[test]
    fn split_lengths_and_offsets() {
        let e = ramp_entity(10);
        let b = PeriodBounds { train: 0..6, val: 6..8, test: 8..10 };
        let s = split_periods(&e, &b).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s.test.offset, 8);
        assert!(!s.empty_period_warning);

        let bad = PeriodBounds { train: 0..6, val: 4..8, test: 8..10 };
        assert!(split_periods(&e, &bad).is_err());
        let reversed = PeriodBounds { train: 6..8, val: 0..6, test: 8..10 };
        assert!(split_periods(&e, &reversed).is_err());
        let too_long = PeriodBounds { train: 0..6, val: 6..8, test: 8..11 };
        assert!(split_periods(&e, &too_long).is_err());

        let full = PeriodBounds { train: 0..10, val: 10..10, test: 10..10 };
        assert!(split_periods(&e, &full).unwrap().empty_period_warning);
    }

    #[test]
    fn segmented_test_period_keeps_absolute_ids() {
        let e = ramp_entity(30);
        let s = split_periods(&e, &PeriodBounds { train: 0..10, val: 10..15, test: 15..30 }).unwrap();
        let seqs = segment(&s.test, &SegmentationConfig::new(4, 4).unwrap(), 0).unwrap();
        assert_eq!(seqs[0].initial_step(), 15);
        assert_eq!(seqs[0].y0, vec![15.0]);
    }

    #[test]
    fn normalize_constant_channel_lenient_and_strict() {
        let mut e = ramp_entity(5);
        e.inputs = Matrix::filled(5, 1, 2.5);
        let (out, stats) = normalize(&[e.clone()], None, NormMode::Lenient).unwrap();
        assert_eq!(stats.inputs.std, vec![1.0]);
        assert!(out[0].inputs.as_slice().iter().all(|&v| v == 0.0));
        assert!(normalize(&[e], None, NormMode::Strict).is_err());
    }

    #[test]
    fn normalize_roundtrip_and_held_out_mean() {
        let e = ramp_entity(50);
        let s = split_periods(&e, &PeriodBounds { train: 0..30, val: 30..35, test: 35..50 }).unwrap();
        let (train, stats) = normalize(&[s.train.clone()], None, NormMode::Lenient).unwrap();
        let m = kernel_mean(train[0].responses.as_slice());
        assert!(m.abs() < 1e-12);
        let back = denormalize(&train, &stats).unwrap();
        for (a, b) in back[0].responses.as_slice().iter().zip(s.train.responses.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let (test, _) = normalize(&[s.test], Some(&stats), NormMode::Lenient).unwrap();
        assert!(kernel_mean(test[0].responses.as_slice()) > 1.0);
    }

    fn kernel_mean(v: &[f64]) -> f64 {
        crate::kernel::mean(v)
    }

    #[test]
    fn synthetic_rejects_empty_configs() {
        let cfg = SyntheticConfig { years: 0, ..Default::default() };
        assert!(generate_synthetic(&cfg, 1).is_err());
        let cfg = SyntheticConfig { entities: 0, ..Default::default() };
        assert!(generate_synthetic(&cfg, 1).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig { years: 3, ..Default::default() };
        let a = generate_synthetic(&cfg, 11).unwrap();
        let b = generate_synthetic(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 12).unwrap();
        assert_ne!(a[0].responses, c[0].responses);
        a[0].validate(cfg.year_length).unwrap();
        assert_eq!(a[0].len(), 3 * cfg.year_length as usize);
    }

    #[test]
    fn synthetic_without_precipitation_drains() {
        let cfg = SyntheticConfig { years: 2, precip_mean: 0.0, ..Default::default() };
        let e = &generate_synthetic(&cfg, 3).unwrap()[0];
        let last = e.len() - 1;
        assert_eq!(e.responses.get(last, 1), 0.0, "snowpack");
        assert!(e.responses.get(last, 2) < 1e-9, "outflow");
        assert!(e.inputs.column(0).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn csv_minimal_and_contract_errors() {
        let schema = CsvSchema {
            drivers: vec!["p".into()],
            responses: vec!["q".into()],
            statics: vec![],
            strict: true,
        };
        let ok = "entity,date,p,q\nA,2001-01-01,1.0,2.0\nA,2001-01-02,3.0,4.0\n";
        let e = read_csv(ok.as_bytes(), &schema).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].len(), 2);
        assert_eq!(e[0].day_of_year, vec![1, 2]);

        let interleaved = "entity,date,p,q\nA,2001-01-01,1,2\nB,2001-01-01,1,2\nA,2001-01-02,1,2\n";
        let err = read_csv(interleaved.as_bytes(), &schema).unwrap_err().to_string();
        assert!(err.contains("rows not grouped by entity"), "{err}");

        let nan = "entity,date,p,q\nA,2001-01-01,1,2\nA,2001-01-02,NaN,2\n";
        let err = read_csv(nan.as_bytes(), &schema).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("'p'"), "{err}");

        let lenient = CsvSchema { strict: false, ..schema.clone() };
        let e = read_csv(nan.as_bytes(), &lenient).unwrap();
        assert_eq!(e[0].inputs.column(0), vec![1.0, 1.0]);

        let backwards = "entity,date,p,q\nA,2001-01-02,1,2\nA,2001-01-01,1,2\n";
        assert!(read_csv(backwards.as_bytes(), &schema).is_err());

        let missing = "entity,date,p\nA,2001-01-01,1\n";
        let err = read_csv(missing.as_bytes(), &schema).unwrap_err().to_string();
        assert!(err.contains("missing column 'q'"), "{err}");
    }
}

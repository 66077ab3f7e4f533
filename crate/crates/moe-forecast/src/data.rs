//! Dataset ingestion, lag embedding, and chronological splits.
//!
//! Two input formats are supported:
//!
//! * `.tsf` files in the Monash repository layout: `#` comment lines, then
//!   `@relation` / `@attribute` / `@frequency` / `@horizon` / `@missing` /
//!   `@equallength` header tags, then `@data` followed by one line per series
//!   of colon-separated attribute values ending in a comma-separated value
//!   list. `?` marks a missing value.
//! * CSV, either wide (header row of series ids, one column per series,
//!   trailing empty cells end a series early) or long (two columns,
//!   `series_id,value`, rows in chronological order within each series).
//!
//! All readers reject non-finite values.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Sampling frequency; drives the default seasonal period used by MASE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frequency {
    Hourly,
    Daily,
    Weekly,
    Monthly,
    Other,
}

impl Frequency {
    /// Map a `.tsf` frequency token. Tokens from the published Monash corpus
    /// that fall outside the four named variants map to `Other`; anything
    /// unrecognized is an error at the caller's line number.
    pub fn from_tsf_token(token: &str) -> Option<Frequency> {
        match token.to_ascii_lowercase().as_str() {
            "hourly" => Some(Frequency::Hourly),
            "daily" => Some(Frequency::Daily),
            "weekly" => Some(Frequency::Weekly),
            "monthly" => Some(Frequency::Monthly),
            "yearly" | "quarterly" | "half_hourly" | "minutely" | "10_minutes" | "4_seconds"
            | "seconds" | "none" | "other" => Some(Frequency::Other),
            _ => None,
        }
    }

    /// Default seasonal period: hourly 24, daily 7, weekly 52, monthly 12,
    /// other 1. Only MASE consumes this; it is overridable everywhere.
    pub fn default_seasonal_period(&self) -> usize {
        match self {
            Frequency::Hourly => 24,
            Frequency::Daily => 7,
            Frequency::Weekly => 52,
            Frequency::Monthly => 12,
            Frequency::Other => 1,
        }
    }

    fn tsf_token(&self) -> &'static str {
        match self {
            Frequency::Hourly => "hourly",
            Frequency::Daily => "daily",
            Frequency::Weekly => "weekly",
            Frequency::Monthly => "monthly",
            Frequency::Other => "none",
        }
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tsf_token())
    }
}

/// One named series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub id: String,
    pub values: Vec<f64>,
    pub start_timestamp: Option<String>,
}

/// A collection of series sharing a frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub series: Vec<Series>,
    pub frequency: Frequency,
    pub seasonal_period: usize,
    /// Forecast horizon declared in the source file, when present.
    pub declared_horizon: Option<usize>,
}

impl TimeSeriesDataset {
    pub fn new(series: Vec<Series>, frequency: Frequency) -> Result<Self> {
        let dataset = TimeSeriesDataset {
            series,
            frequency,
            seasonal_period: frequency.default_seasonal_period(),
            declared_horizon: None,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seasonal_period == 0 {
            return Err(Error::InvalidConfig {
                reason: "seasonal_period must be at least 1".into(),
            });
        }
        for s in &self.series {
            if s.values.is_empty() {
                return Err(Error::SeriesTooShort {
                    series: s.id.clone(),
                    length: 0,
                    required: 1,
                });
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("series '{}'", s.id),
                });
            }
        }
        Ok(())
    }
}

/// Lag/horizon configuration for the Monash datasets used in the forecast
/// studies. Values follow the repository's published global-model setup
/// (lags of 1.25x the seasonal cycle: daily 9, monthly 15, weekly 65,
/// hourly 210) and its fixed horizons. External provenance:
/// Monash Time Series Forecasting Repository, forecastingdata.org.
pub fn monash_lag_horizon(dataset_name: &str) -> Option<(usize, usize)> {
    let name = dataset_name.to_ascii_lowercase();
    let table: [(&str, (usize, usize)); 6] = [
        ("saugeen", (9, 30)),
        ("electricity_weekly", (65, 8)),
        ("m4_hourly", (210, 48)),
        ("car_parts", (15, 12)),
        ("dominick", (65, 8)),
        ("tourism_monthly", (15, 24)),
    ];
    table
        .iter()
        .find(|(key, _)| name.contains(key))
        .map(|(_, v)| *v)
}

// ---------------------------------------------------------------------------
// .tsf reader / writer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct TsfOptions {
    /// Replace `?` by carrying the last observation forward (leading gaps
    /// take the first observed value). Off by default: missing values are
    /// rejected, naming the series.
    pub impute_missing: bool,
}

/// Parse a Monash-layout `.tsf` file.
pub fn parse_tsf(path: &Path, options: TsfOptions) -> Result<TimeSeriesDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_tsf_reader(BufReader::new(file), &path.display().to_string(), options)
}

/// Parse `.tsf` content from any reader; `source` names it in errors.
pub fn parse_tsf_reader<R: Read>(
    reader: BufReader<R>,
    source: &str,
    options: TsfOptions,
) -> Result<TimeSeriesDataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };

    let mut attributes: Vec<(String, String)> = Vec::new();
    let mut frequency = Frequency::Other;
    let mut declared_horizon = None;
    let mut in_data = false;
    let mut series = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }

        if !in_data {
            let lower = trimmed.to_ascii_lowercase();
            if lower == "@data" {
                if attributes.is_empty() {
                    return Err(parse_err(lineno, "@data before any @attribute".into()));
                }
                in_data = true;
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let tag = parts.next().unwrap_or("").to_ascii_lowercase();
            match tag.as_str() {
                "@relation" => {}
                "@attribute" => {
                    let name = parts
                        .next()
                        .ok_or_else(|| parse_err(lineno, "@attribute missing name".into()))?;
                    let kind = parts
                        .next()
                        .ok_or_else(|| parse_err(lineno, "@attribute missing type".into()))?;
                    attributes.push((name.to_string(), kind.to_string()));
                }
                "@frequency" => {
                    let token = parts
                        .next()
                        .ok_or_else(|| parse_err(lineno, "@frequency missing value".into()))?;
                    frequency = Frequency::from_tsf_token(token).ok_or_else(|| {
                        parse_err(lineno, format!("unknown frequency '{token}'"))
                    })?;
                }
                "@horizon" => {
                    let token = parts
                        .next()
                        .ok_or_else(|| parse_err(lineno, "@horizon missing value".into()))?;
                    let h: usize = token
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad horizon '{token}'")))?;
                    declared_horizon = Some(h);
                }
                "@missing" | "@equallength" => {}
                other => {
                    return Err(parse_err(lineno, format!("unknown header tag '{other}'")));
                }
            }
            continue;
        }

        // Data line: attribute fields separated by ':', then the value list.
        let fields: Vec<&str> = trimmed.split(':').collect();
        if fields.len() != attributes.len() + 1 {
            return Err(parse_err(
                lineno,
                format!(
                    "expected {} colon-separated fields ({} attributes + values), found {}",
                    attributes.len() + 1,
                    attributes.len(),
                    fields.len()
                ),
            ));
        }
        let mut id = format!("T{}", series.len() + 1);
        let mut start_timestamp = None;
        for ((name, _), value) in attributes.iter().zip(&fields) {
            match name.as_str() {
                "series_name" => id = value.to_string(),
                "start_timestamp" => start_timestamp = Some(value.to_string()),
                _ => {}
            }
        }

        let raw = fields[attributes.len()];
        let mut values = Vec::new();
        let mut missing = Vec::new();
        for (pos, token) in raw.split(',').enumerate() {
            let token = token.trim();
            if token == "?" {
                missing.push(pos);
                values.push(f64::NAN);
                continue;
            }
            let v: f64 = token.parse().map_err(|_| {
                parse_err(lineno, format!("series '{id}': bad value '{token}' at position {}", pos + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    lineno,
                    format!("series '{id}': non-finite value at position {}", pos + 1),
                ));
            }
            values.push(v);
        }
        if values.is_empty() {
            return Err(parse_err(lineno, format!("series '{id}' has no values")));
        }
        if !missing.is_empty() {
            if !options.impute_missing {
                return Err(Error::MissingValues { series: id });
            }
            impute_locf(&mut values).map_err(|_| Error::MissingValues { series: id.clone() })?;
        }
        series.push(Series {
            id,
            values,
            start_timestamp,
        });
    }

    if !in_data {
        return Err(parse_err(0, "no @data section found".into()));
    }
    if series.is_empty() {
        return Err(parse_err(0, "no series in @data section".into()));
    }

    let mut dataset = TimeSeriesDataset::new(series, frequency)?;
    dataset.declared_horizon = declared_horizon;
    Ok(dataset)
}

/// Last observation carried forward; leading gaps take the first observed
/// value. Errors when nothing is observed at all.
fn impute_locf(values: &mut [f64]) -> std::result::Result<(), ()> {
    let first_observed = values.iter().position(|v| v.is_finite()).ok_or(())?;
    let fill = values[first_observed];
    for v in values.iter_mut().take(first_observed) {
        *v = fill;
    }
    let mut last = fill;
    for v in values.iter_mut() {
        if v.is_finite() {
            last = *v;
        } else {
            *v = last;
        }
    }
    Ok(())
}

/// Write a dataset in the same `.tsf` layout `parse_tsf` reads.
pub fn write_tsf(path: &Path, dataset: &TimeSeriesDataset) -> Result<()> {
    let mut out = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(out, "@relation dataset").map_err(io_err)?;
    writeln!(out, "@attribute series_name string").map_err(io_err)?;
    let with_timestamps = dataset.series.iter().any(|s| s.start_timestamp.is_some());
    if with_timestamps {
        writeln!(out, "@attribute start_timestamp date").map_err(io_err)?;
    }
    writeln!(out, "@frequency {}", dataset.frequency.tsf_token()).map_err(io_err)?;
    if let Some(h) = dataset.declared_horizon {
        writeln!(out, "@horizon {h}").map_err(io_err)?;
    }
    writeln!(out, "@missing false").map_err(io_err)?;
    writeln!(out, "@data").map_err(io_err)?;
    for s in &dataset.series {
        let values: Vec<String> = s.values.iter().map(|v| format!("{v:?}")).collect();
        if with_timestamps {
            let ts = s.start_timestamp.as_deref().unwrap_or("1970-01-01 00-00-00");
            writeln!(out, "{}:{}:{}", s.id, ts, values.join(",")).map_err(io_err)?;
        } else {
            writeln!(out, "{}:{}", s.id, values.join(",")).map_err(io_err)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV reader
// ---------------------------------------------------------------------------

/// CSV layout switch for [`parse_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CsvLayout {
    /// Header row of series ids, one column per series. A series may end
    /// early with empty trailing cells.
    Wide,
    /// Two columns `series_id,value`, rows chronological within a series.
    Long,
}

/// Read series from CSV. The frequency is caller-provided; CSV carries none.
pub fn parse_csv(path: &Path, layout: CsvLayout, frequency: Frequency) -> Result<TimeSeriesDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(layout == CsvLayout::Wide)
        .flexible(true)
        .from_reader(file);
    let path_str = path.display().to_string();

    let mut series: Vec<Series> = Vec::new();
    match layout {
        CsvLayout::Wide => {
            let headers = reader.headers()?.clone();
            for name in headers.iter() {
                series.push(Series {
                    id: name.trim().to_string(),
                    values: Vec::new(),
                    start_timestamp: None,
                });
            }
            for (row_idx, record) in reader.records().enumerate() {
                let record = record?;
                for (col, cell) in record.iter().enumerate() {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        continue;
                    }
                    if col >= series.len() {
                        return Err(Error::Parse {
                            path: path_str,
                            line: row_idx + 2,
                            message: format!("row has more cells than the {} header columns", series.len()),
                        });
                    }
                    let v: f64 = cell.parse().map_err(|_| Error::Parse {
                        path: path_str.clone(),
                        line: row_idx + 2,
                        message: format!("bad value '{cell}' in column '{}'", series[col].id),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("series '{}'", series[col].id),
                        });
                    }
                    series[col].values.push(v);
                }
            }
        }
        CsvLayout::Long => {
            for (row_idx, record) in reader.records().enumerate() {
                let record = record?;
                if record.len() < 2 {
                    return Err(Error::Parse {
                        path: path_str,
                        line: row_idx + 1,
                        message: "long layout needs two columns: series_id,value".into(),
                    });
                }
                let id = record[0].trim().to_string();
                let cell = record[1].trim();
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    path: path_str.clone(),
                    line: row_idx + 1,
                    message: format!("bad value '{cell}' for series '{id}'"),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("series '{id}'"),
                    });
                }
                match series.iter_mut().find(|s| s.id == id) {
                    Some(s) => s.values.push(v),
                    None => series.push(Series {
                        id,
                        values: vec![v],
                        start_timestamp: None,
                    }),
                }
            }
        }
    }
    series.retain(|s| !s.values.is_empty());
    if series.is_empty() {
        return Err(Error::Parse {
            path: path_str,
            line: 0,
            message: "no series found".into(),
        });
    }
    TimeSeriesDataset::new(series, frequency)
}

// ---------------------------------------------------------------------------
// Supervised embedding and splits
// ---------------------------------------------------------------------------

/// Lag-embedded supervised pairs. Row n holds the `m` values immediately
/// preceding its target, oldest first, never crossing series boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedSet {
    pub x: Matrix,
    pub y: Vec<f64>,
    /// Which series each row came from.
    pub series_index: Vec<usize>,
    /// Rows sorted by (series, time).
    pub chronological: bool,
}

impl SupervisedSet {
    pub fn single_series(x: Matrix, y: Vec<f64>) -> Self {
        let n = y.len();
        SupervisedSet {
            x,
            y,
            series_index: vec![0; n],
            chronological: true,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_lags(&self) -> usize {
        self.x.cols()
    }

    /// Copy the chosen rows into a dense batch, preserving the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Matrix, Vec<f64>)> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch {
                context: "SupervisedSet::gather".into(),
            });
        }
        let m = self.x.cols();
        let mut data = Vec::with_capacity(indices.len() * m);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
            y.push(self.y[i]);
        }
        Ok((Matrix::from_vec(indices.len(), m, data)?, y))
    }
}

/// Train rows plus the withheld last-H test pairs per series.
#[derive(Debug, Clone)]
pub struct SupervisedSplit {
    pub train: SupervisedSet,
    /// Teacher-forced pairs for the withheld targets (true lags, true
    /// targets). Multi-step recursive evaluation reads the series instead.
    pub test: SupervisedSet,
    /// Ids of series skipped for being too short (non-strict mode only).
    pub skipped: Vec<String>,
}

/// Slide an m-lag window over every series, withholding the last `horizon`
/// targets per series as test pairs. Series too short to produce at least
/// one training row are skipped with a note, or rejected when `strict`.
pub fn make_supervised(
    dataset: &TimeSeriesDataset,
    num_lags: usize,
    horizon: usize,
    strict: bool,
) -> Result<SupervisedSplit> {
    if num_lags == 0 {
        return Err(Error::InvalidConfig {
            reason: "num_lags must be at least 1".into(),
        });
    }
    let m = num_lags;
    let mut train_rows: Vec<Vec<f64>> = Vec::new();
    let mut train_y = Vec::new();
    let mut train_series = Vec::new();
    let mut test_rows: Vec<Vec<f64>> = Vec::new();
    let mut test_y = Vec::new();
    let mut test_series = Vec::new();
    let mut skipped = Vec::new();

    for (s_idx, s) in dataset.series.iter().enumerate() {
        let len = s.values.len();
        // Need at least one training target before the withheld block.
        let required = m + horizon + 1;
        if len < required {
            if strict {
                return Err(Error::SeriesTooShort {
                    series: s.id.clone(),
                    length: len,
                    required,
                });
            }
            skipped.push(s.id.clone());
            continue;
        }
        let test_start = len - horizon;
        for t in m..test_start {
            train_rows.push(s.values[t - m..t].to_vec());
            train_y.push(s.values[t]);
            train_series.push(s_idx);
        }
        for t in test_start..len {
            test_rows.push(s.values[t - m..t].to_vec());
            test_y.push(s.values[t]);
            test_series.push(s_idx);
        }
    }

    if train_rows.is_empty() {
        return Err(Error::InsufficientData {
            required: m + horizon + 1,
            available: dataset.series.iter().map(|s| s.values.len()).max().unwrap_or(0),
        });
    }

    let train = SupervisedSet {
        x: Matrix::from_rows(&train_rows)?,
        y: train_y,
        series_index: train_series,
        chronological: true,
    };
    let test = if test_rows.is_empty() {
        SupervisedSet {
            x: Matrix::zeros(1, m)?,
            y: vec![0.0],
            series_index: vec![0],
            chronological: true,
        }
    } else {
        SupervisedSet {
            x: Matrix::from_rows(&test_rows)?,
            y: test_y,
            series_index: test_series,
            chronological: true,
        }
    };
    Ok(SupervisedSplit {
        train,
        test,
        skipped,
    })
}

/// Chronological three-way split: per series the last `horizon` values form
/// the test block, the preceding `horizon` the validation block, and the
/// remainder the training block.
pub fn split_validation(
    dataset: &TimeSeriesDataset,
    horizon: usize,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset)> {
    if horizon == 0 {
        return Err(Error::InvalidConfig {
            reason: "horizon must be at least 1".into(),
        });
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for s in &dataset.series {
        let len = s.values.len();
        if len <= 2 * horizon {
            return Err(Error::SeriesTooShort {
                series: s.id.clone(),
                length: len,
                required: 2 * horizon + 1,
            });
        }
        let val_start = len - 2 * horizon;
        let test_start = len - horizon;
        let piece = |range: std::ops::Range<usize>| Series {
            id: s.id.clone(),
            values: s.values[range].to_vec(),
            start_timestamp: s.start_timestamp.clone(),
        };
        train.push(piece(0..val_start));
        validation.push(piece(val_start..test_start));
        test.push(piece(test_start..len));
    }
    let rebuild = |series: Vec<Series>| -> Result<TimeSeriesDataset> {
        let mut d = TimeSeriesDataset::new(series, dataset.frequency)?;
        d.seasonal_period = dataset.seasonal_period;
        d.declared_horizon = dataset.declared_horizon;
        Ok(d)
    };
    Ok((rebuild(train)?, rebuild(validation)?, rebuild(test)?))
}

// ---------------------------------------------------------------------------
// Scaling
// ---------------------------------------------------------------------------

/// Input scaling applied before training; forecasts are inverse-scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleMode {
    /// Divide each series by its in-sample mean absolute value.
    MeanAbs,
    /// No scaling.
    None,
}

/// Mean absolute value of a slice, guarded to 1.0 for all-zero input so the
/// scale is always usable as a divisor.
pub fn mean_abs_scale(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let mean = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
    if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// Per-series scale factors for a dataset under the given mode, computed on
/// everything except the last `withheld` values (the out-of-sample block).
pub fn series_scales(dataset: &TimeSeriesDataset, mode: ScaleMode, withheld: usize) -> Vec<f64> {
    dataset
        .series
        .iter()
        .map(|s| match mode {
            ScaleMode::None => 1.0,
            ScaleMode::MeanAbs => {
                let cut = s.values.len().saturating_sub(withheld).max(1);
                mean_abs_scale(&s.values[..cut])
            }
        })
        .collect()
}

/// Dataset with every series divided by its factor.
pub fn apply_scales(dataset: &TimeSeriesDataset, scales: &[f64]) -> TimeSeriesDataset {
    let series = dataset
        .series
        .iter()
        .zip(scales)
        .map(|(s, &f)| Series {
            id: s.id.clone(),
            values: s.values.iter().map(|v| v / f).collect(),
            start_timestamp: s.start_timestamp.clone(),
        })
        .collect();
    TimeSeriesDataset {
        series,
        frequency: dataset.frequency,
        seasonal_period: dataset.seasonal_period,
        declared_horizon: dataset.declared_horizon,
    }
}

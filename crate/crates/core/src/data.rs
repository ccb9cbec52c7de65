//! Interaction logs: ingestion, chronological splitting and duration binning.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{par, RadError, Result};

/// One watch event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: u64,
    pub video_id: u64,
    /// Milliseconds watched, `>= 0`.
    pub watch_time: f64,
    /// Video length in milliseconds, `> 0`.
    pub duration: f64,
    /// Epoch milliseconds.
    pub timestamp: i64,
    /// Categorical user features, one code per slot. Empty when absent.
    #[serde(default)]
    pub user_features: Vec<u32>,
}

impl InteractionRecord {
    pub fn new(user_id: u64, video_id: u64, watch_time: f64, duration: f64, timestamp: i64) -> Self {
        Self {
            user_id,
            video_id,
            watch_time,
            duration,
            timestamp,
            user_features: Vec::new(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.watch_time.is_finite() || self.watch_time < 0.0 {
            return Err(format!("watch_time {} is negative or not finite", self.watch_time));
        }
        if !self.duration.is_finite() || self.duration <= 0.0 {
            return Err(format!("duration {} is not positive", self.duration));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    /// Chosen from the file extension: `.jsonl`/`.ndjson` read as JSON lines.
    #[default]
    Auto,
    Csv,
    JsonLines,
}

/// Maps logical fields onto input column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub user_id: String,
    pub video_id: String,
    pub watch_time: String,
    pub duration: String,
    pub timestamp: String,
    /// Explicit feature columns. When empty, every `feature_<n>` column is
    /// picked up in index order.
    pub features: Vec<String>,
    pub delimiter: char,
    pub format: LogFormat,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            user_id: "user_id".into(),
            video_id: "video_id".into(),
            watch_time: "watch_time".into(),
            duration: "duration".into(),
            timestamp: "timestamp".into(),
            features: Vec::new(),
            delimiter: ',',
            format: LogFormat::Auto,
        }
    }
}

/// Result of [`ingest`].
#[derive(Debug, Clone)]
pub struct Ingested {
    pub records: Vec<InteractionRecord>,
    pub rows: usize,
    pub malformed: usize,
    /// Up to ten diagnostics for skipped rows.
    pub problems: Vec<String>,
}

const MAX_PROBLEMS: usize = 10;
const PARSE_CHUNK: usize = 8192;

struct Columns {
    user_id: usize,
    video_id: usize,
    watch_time: usize,
    duration: usize,
    timestamp: usize,
    features: Vec<usize>,
}

fn feature_index(name: &str) -> Option<usize> {
    name.strip_prefix("feature_")?.parse().ok()
}

fn resolve_columns(headers: &[String], schema: &Schema) -> Result<Columns> {
    let find = |field: &str, column: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| RadError::MissingColumn {
                field: field.into(),
                column: column.into(),
            })
    };
    let features = if schema.features.is_empty() {
        let mut found: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| feature_index(h).map(|slot| (slot, i)))
            .collect();
        found.sort_unstable();
        found.into_iter().map(|(_, i)| i).collect()
    } else {
        schema
            .features
            .iter()
            .map(|c| find(c, c))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Columns {
        user_id: find("user_id", &schema.user_id)?,
        video_id: find("video_id", &schema.video_id)?,
        watch_time: find("watch_time", &schema.watch_time)?,
        duration: find("duration", &schema.duration)?,
        timestamp: find("timestamp", &schema.timestamp)?,
        features,
    })
}

fn parse_field<T: std::str::FromStr>(row: &[String], idx: usize, name: &str) -> std::result::Result<T, String> {
    let raw = row.get(idx).ok_or_else(|| format!("missing {name}"))?.trim();
    raw.parse::<T>().map_err(|_| format!("bad {name} `{raw}`"))
}

fn parse_integer_like(row: &[String], idx: usize, name: &str) -> std::result::Result<i64, String> {
    // KuaiRand exports some integer columns as floats ("15000.0").
    match parse_field::<i64>(row, idx, name) {
        Ok(v) => Ok(v),
        Err(e) => {
            let f: f64 = parse_field(row, idx, name).map_err(|_| e.clone())?;
            if f.fract() == 0.0 && f.is_finite() {
                Ok(f as i64)
            } else {
                Err(e)
            }
        }
    }
}

fn parse_row(row: &[String], cols: &Columns) -> std::result::Result<InteractionRecord, String> {
    let user_id = parse_integer_like(row, cols.user_id, "user_id")?;
    let video_id = parse_integer_like(row, cols.video_id, "video_id")?;
    if user_id < 0 || video_id < 0 {
        return Err("negative id".into());
    }
    let rec = InteractionRecord {
        user_id: user_id as u64,
        video_id: video_id as u64,
        watch_time: parse_field(row, cols.watch_time, "watch_time")?,
        duration: parse_field(row, cols.duration, "duration")?,
        timestamp: parse_integer_like(row, cols.timestamp, "timestamp")?,
        user_features: cols
            .features
            .iter()
            .map(|&i| parse_integer_like(row, i, "feature").and_then(|v| u32::try_from(v).map_err(|_| "feature code out of range".to_string())))
            .collect::<std::result::Result<Vec<_>, _>>()?,
    };
    rec.validate()?;
    Ok(rec)
}

fn finish(rows: Vec<std::result::Result<InteractionRecord, String>>, path: &Path) -> Result<Ingested> {
    let total = rows.len();
    let mut records = Vec::with_capacity(total);
    let mut problems = Vec::new();
    let mut malformed = 0;
    for (line, row) in rows.into_iter().enumerate() {
        match row {
            Ok(r) => records.push(r),
            Err(e) => {
                malformed += 1;
                if problems.len() < MAX_PROBLEMS {
                    problems.push(format!("row {}: {e}", line + 1));
                }
            }
        }
    }
    if total == 0 {
        log::warn!("{} contains no interaction rows", path.display());
    } else if malformed * 2 > total {
        return Err(RadError::TooManyMalformed {
            malformed,
            total,
            sample: problems,
        });
    } else if malformed > 0 {
        log::warn!("{}: skipped {malformed} of {total} malformed rows", path.display());
    }
    Ok(Ingested {
        records,
        rows: total,
        malformed,
        problems,
    })
}

/// Reads and validates an interaction log.
///
/// Malformed rows are counted and skipped; more than half malformed aborts.
pub fn ingest(path: &Path, schema: &Schema) -> Result<Ingested> {
    let format = match schema.format {
        LogFormat::Auto => match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => LogFormat::JsonLines,
            _ => LogFormat::Csv,
        },
        f => f,
    };
    match format {
        LogFormat::JsonLines => ingest_jsonl(path, schema),
        _ => ingest_csv(path, schema),
    }
}

fn ingest_csv(path: &Path, schema: &Schema) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| RadError::io(path, e))?;
    if file.metadata().map(|m| m.len() == 0).unwrap_or(false) {
        log::warn!("{} is empty", path.display());
        return Ok(Ingested {
            records: Vec::new(),
            rows: 0,
            malformed: 0,
            problems: Vec::new(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let cols = resolve_columns(&headers, schema)?;
    let mut raw: Vec<Vec<String>> = Vec::new();
    for row in reader.records() {
        match row {
            Ok(r) => raw.push(r.iter().map(str::to_string).collect()),
            // Undecodable rows count as malformed.
            Err(e) => raw.push(vec![format!("\u{0}{e}")]),
        }
    }
    let parsed: Vec<_> = par::map_chunks(&raw, PARSE_CHUNK, |chunk| {
        chunk.iter().map(|r| parse_row(r, &cols)).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    finish(parsed, path)
}

fn json_row(line: &str, schema: &Schema) -> std::result::Result<InteractionRecord, String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("bad json: {e}"))?;
    let obj = v.as_object().ok_or("json row is not an object")?;
    let num = |key: &str| -> std::result::Result<f64, String> {
        match obj.get(key) {
            Some(serde_json::Value::Number(n)) => n.as_f64().ok_or_else(|| format!("bad {key}")),
            Some(serde_json::Value::String(s)) => s.trim().parse().map_err(|_| format!("bad {key} `{s}`")),
            _ => Err(format!("missing {key}")),
        }
    };
    let int = |key: &str| -> std::result::Result<i64, String> {
        let f = num(key)?;
        if f.fract() == 0.0 {
            Ok(f as i64)
        } else {
            Err(format!("{key} is not an integer"))
        }
    };
    let feature_keys: Vec<String> = if schema.features.is_empty() {
        let mut keys: Vec<(usize, &String)> = obj.keys().filter_map(|k| feature_index(k).map(|i| (i, k))).collect();
        keys.sort_unstable();
        keys.into_iter().map(|(_, k)| k.clone()).collect()
    } else {
        schema.features.clone()
    };
    let (u, i) = (int(&schema.user_id)?, int(&schema.video_id)?);
    if u < 0 || i < 0 {
        return Err("negative id".into());
    }
    let rec = InteractionRecord {
        user_id: u as u64,
        video_id: i as u64,
        watch_time: num(&schema.watch_time)?,
        duration: num(&schema.duration)?,
        timestamp: int(&schema.timestamp)?,
        user_features: feature_keys
            .iter()
            .map(|k| int(k).and_then(|v| u32::try_from(v).map_err(|_| "feature code out of range".into())))
            .collect::<std::result::Result<_, String>>()?,
    };
    rec.validate()?;
    Ok(rec)
}

fn ingest_jsonl(path: &Path, schema: &Schema) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| RadError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| RadError::io(path, e))?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    if let Some(first) = lines.first() {
        // A missing required key on the first row is a schema problem, not a bad row.
        if let Ok(serde_json::Value::Object(obj)) = serde_json::from_str::<serde_json::Value>(first) {
            for (field, col) in [
                ("user_id", &schema.user_id),
                ("video_id", &schema.video_id),
                ("watch_time", &schema.watch_time),
                ("duration", &schema.duration),
                ("timestamp", &schema.timestamp),
            ] {
                if !obj.contains_key(col.as_str()) {
                    return Err(RadError::MissingColumn {
                        field: field.into(),
                        column: col.clone(),
                    });
                }
            }
        }
    }
    let parsed: Vec<_> = par::map_chunks(&lines, PARSE_CHUNK, |chunk| {
        chunk.iter().map(|l| json_row(l, schema)).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    finish(parsed, path)
}

/// Writes records as CSV with the default schema column names.
pub fn write_csv(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| RadError::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let slots = records.first().map_or(0, |r| r.user_features.len());
    if let Some(r) = records.iter().find(|r| r.user_features.len() != slots) {
        return Err(RadError::invalid(format!(
            "record ({}, {}) has {} feature slots, expected {slots}",
            r.user_id,
            r.video_id,
            r.user_features.len()
        )));
    }
    let mut header: Vec<String> = ["user_id", "video_id", "watch_time", "duration", "timestamp"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..slots).map(|i| format!("feature_{i}")));
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for r in records {
        row.clear();
        row.push(r.user_id.to_string());
        row.push(r.video_id.to_string());
        row.push(r.watch_time.to_string());
        row.push(r.duration.to_string());
        row.push(r.timestamp.to_string());
        row.extend(r.user_features.iter().map(|f| f.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| RadError::io(path, e))?;
    Ok(())
}

/// Chronological cut-offs. A record belongs to training when
/// `timestamp <= train_end`, to validation when `train_end < timestamp <=
/// validation_end`, and to test otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: i64,
    pub validation_end: i64,
    /// Drop validation/test records whose user or video never appears in training.
    #[serde(default = "default_true")]
    pub filter_unseen: bool,
}

fn default_true() -> bool {
    true
}

impl SplitSpec {
    pub fn new(train_end: i64, validation_end: i64) -> Self {
        Self {
            train_end,
            validation_end,
            filter_unseen: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub retained: usize,
    pub dropped_unseen_user: usize,
    pub dropped_unseen_video: usize,
    pub min_timestamp: Option<i64>,
    pub max_timestamp: Option<i64>,
    /// Share of all retained records.
    pub fraction: f64,
}

/// Partition manifest for a split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub input_records: usize,
    pub train: PartitionStats,
    pub validation: PartitionStats,
    pub test: PartitionStats,
    pub train_users: usize,
    pub train_videos: usize,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<InteractionRecord>,
    pub validation: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub report: SplitReport,
}

fn record_order(a: &InteractionRecord, b: &InteractionRecord) -> std::cmp::Ordering {
    a.timestamp
        .cmp(&b.timestamp)
        .then(a.user_id.cmp(&b.user_id))
        .then(a.video_id.cmp(&b.video_id))
        .then(a.watch_time.total_cmp(&b.watch_time))
        .then(a.duration.total_cmp(&b.duration))
}

fn time_range(part: &[InteractionRecord]) -> (Option<i64>, Option<i64>) {
    (part.first().map(|r| r.timestamp), part.last().map(|r| r.timestamp))
}

/// Splits records by time and filters held-out partitions to ids seen in training.
///
/// Partitions come back sorted by timestamp (ties broken by ids), so the
/// output does not depend on input order.
pub fn chrono_split(records: &[InteractionRecord], spec: &SplitSpec) -> Result<Split> {
    if records.is_empty() {
        return Err(RadError::EmptyInput("no records to split".into()));
    }
    if spec.train_end >= spec.validation_end {
        return Err(RadError::invalid(format!(
            "train_end {} must precede validation_end {}",
            spec.train_end, spec.validation_end
        )));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(record_order);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for r in sorted {
        if r.timestamp <= spec.train_end {
            train.push(r);
        } else if r.timestamp <= spec.validation_end {
            validation.push(r);
        } else {
            test.push(r);
        }
    }
    if train.is_empty() {
        return Err(RadError::EmptyInput(format!(
            "no records at or before train_end {}",
            spec.train_end
        )));
    }
    let users: HashSet<u64> = train.iter().map(|r| r.user_id).collect();
    let videos: HashSet<u64> = train.iter().map(|r| r.video_id).collect();

    let filter = |part: Vec<InteractionRecord>| -> (Vec<InteractionRecord>, PartitionStats) {
        let mut stats = PartitionStats::default();
        let kept: Vec<_> = part
            .into_iter()
            .filter(|r| {
                if !spec.filter_unseen {
                    return true;
                }
                if !users.contains(&r.user_id) {
                    stats.dropped_unseen_user += 1;
                    false
                } else if !videos.contains(&r.video_id) {
                    stats.dropped_unseen_video += 1;
                    false
                } else {
                    true
                }
            })
            .collect();
        stats.retained = kept.len();
        (kept, stats)
    };
    let (validation, mut val_stats) = filter(validation);
    let (test, mut test_stats) = filter(test);
    let mut train_stats = PartitionStats {
        retained: train.len(),
        ..Default::default()
    };
    let total = (train.len() + validation.len() + test.len()) as f64;
    for (stats, part) in [
        (&mut train_stats, &train),
        (&mut val_stats, &validation),
        (&mut test_stats, &test),
    ] {
        let (lo, hi) = time_range(part);
        stats.min_timestamp = lo;
        stats.max_timestamp = hi;
        stats.fraction = part.len() as f64 / total;
    }
    if validation.is_empty() && test.is_empty() {
        log::warn!("split left validation and test partitions empty");
    }
    let dropped = val_stats.dropped_unseen_user
        + val_stats.dropped_unseen_video
        + test_stats.dropped_unseen_user
        + test_stats.dropped_unseen_video;
    if dropped > 0 {
        log::info!("seen-id filter dropped {dropped} held-out records");
    }
    let report = SplitReport {
        input_records: records.len(),
        train: train_stats,
        validation: val_stats,
        test: test_stats,
        train_users: users.len(),
        train_videos: videos.len(),
    };
    Ok(Split {
        train,
        validation,
        test,
        report,
    })
}

/// Near-equal-mass partition of video durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationBinner {
    /// Bin count that was requested.
    pub requested_bins: usize,
    /// Strictly ascending thresholds; a duration equal to a threshold falls in the lower bin.
    pub boundaries: Vec<f64>,
    /// Share of training records per bin.
    pub masses: Vec<f64>,
}

impl DurationBinner {
    pub fn bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn bin_of(&self, duration: f64) -> usize {
        self.boundaries.partition_point(|&b| b < duration)
    }
}

/// Hyndman–Fan type-2 sample quantile of sorted data at `j/d`, computed with
/// integer arithmetic so that ties between order statistics are detected exactly.
pub(crate) fn type2_quantile(sorted: &[f64], j: usize, d: usize) -> f64 {
    let n = sorted.len();
    let num = n * j;
    if num.is_multiple_of(d) {
        let idx = num / d;
        if idx == 0 {
            return sorted[0];
        }
        if idx >= n {
            return sorted[n - 1];
        }
        0.5 * (sorted[idx - 1] + sorted[idx])
    } else {
        sorted[(num / d).min(n - 1)]
    }
}

/// Fits `bins` near-equal-mass duration bins over the training records.
///
/// Repeated quantiles (heavy duration ties) collapse, so the fitted binner
/// can have fewer bins than requested; masses are reported either way.
pub fn fit_duration_binner(train: &[InteractionRecord], bins: usize) -> Result<DurationBinner> {
    if bins < 1 {
        return Err(RadError::invalid("duration bin count must be at least 1"));
    }
    if train.is_empty() {
        return Err(RadError::EmptyInput("no training records for duration binning".into()));
    }
    let mut durations: Vec<f64> = train.iter().map(|r| r.duration).collect();
    durations.sort_by(f64::total_cmp);
    let mut boundaries: Vec<f64> = Vec::with_capacity(bins.saturating_sub(1));
    for j in 1..bins {
        let b = type2_quantile(&durations, j, bins);
        if boundaries.last().is_none_or(|&last| b > last) {
            boundaries.push(b);
        }
    }
    let mut binner = DurationBinner {
        requested_bins: bins,
        boundaries,
        masses: Vec::new(),
    };
    if binner.bins() < bins {
        log::warn!("duration ties collapsed {bins} requested bins to {}", binner.bins());
    }
    let mut counts = vec![0usize; binner.bins()];
    for d in &durations {
        counts[binner.bin_of(*d)] += 1;
    }
    binner.masses = counts.iter().map(|&c| c as f64 / durations.len() as f64).collect();
    Ok(binner)
}

/// Per-user feature vectors, taken from the first record seen for each user.
pub fn user_features(records: &[InteractionRecord]) -> BTreeMap<u64, Vec<u32>> {
    let mut out = BTreeMap::new();
    for r in records {
        out.entry(r.user_id).or_insert_with(|| r.user_features.clone());
    }
    out
}

/// Writes a JSON document, pretty-printed, with a trailing newline.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| RadError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| RadError::io(path, e))?;
    w.flush().map_err(|e| RadError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| RadError::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;


    fn rec(u: u64, i: u64, s: f64, d: f64, t: i64) -> InteractionRecord {
        InteractionRecord::new(u, i, s, d, t)
    }

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_default_schema_row() {
        let f = write_tmp(
            "user_id,video_id,watch_time,duration,timestamp\n7,42,15000,30000,1650000000000\n",
            ".csv",
        );
        let got = ingest(f.path(), &Schema::default()).unwrap();
        assert_eq!(got.records, vec![rec(7, 42, 15000.0, 30000.0, 1_650_000_000_000)]);
        assert_eq!(got.malformed, 0);
    }

    #[test]
    fn negative_watch_time_is_skipped() {
        let f = write_tmp(
            "user_id,video_id,watch_time,duration,timestamp\n7,42,-5,30000,1\n7,43,10,30000,2\n8,1,5,10,3\n",
            ".csv",
        );
        let got = ingest(f.path(), &Schema::default()).unwrap();
        assert_eq!(got.records.len(), 2);
        assert_eq!(got.malformed, 1);
        assert!(got.problems[0].contains("watch_time"));
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let f = write_tmp("", ".csv");
        let got = ingest(f.path(), &Schema::default()).unwrap();
        assert!(got.records.is_empty());
        let f = write_tmp("user_id,video_id,watch_time,duration,timestamp\n", ".csv");
        assert!(ingest(f.path(), &Schema::default()).unwrap().records.is_empty());
    }

    #[test]
    fn missing_column_and_missing_file() {
        let f = write_tmp("user_id,video_id,watch_time,timestamp\n1,2,3,4\n", ".csv");
        assert!(matches!(
            ingest(f.path(), &Schema::default()),
            Err(RadError::MissingColumn { ref field, .. }) if field == "duration"
        ));
        assert!(matches!(
            ingest(Path::new("/nonexistent/log.csv"), &Schema::default()),
            Err(RadError::Io { .. })
        ));
    }

    #[test]
    fn mostly_malformed_aborts() {
        let f = write_tmp(
            "user_id,video_id,watch_time,duration,timestamp\n1,2,x,4,5\n1,2,3,0,5\n1,2,3,4,5\n",
            ".csv",
        );
        match ingest(f.path(), &Schema::default()) {
            Err(RadError::TooManyMalformed { malformed, total, sample }) => {
                assert_eq!((malformed, total), (2, 3));
                assert_eq!(sample.len(), 2);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn custom_schema_delimiter_and_features() {
        let f = write_tmp(
            "uid;vid;play_ms;dur_ms;ts;feature_1;feature_0\n1;2;300;1000;9;5;4\n",
            ".csv",
        );
        let schema = Schema {
            user_id: "uid".into(),
            video_id: "vid".into(),
            watch_time: "play_ms".into(),
            duration: "dur_ms".into(),
            timestamp: "ts".into(),
            delimiter: ';',
            ..Schema::default()
        };
        let got = ingest(f.path(), &schema).unwrap();
        assert_eq!(got.records[0].user_features, vec![4, 5]);
        assert_eq!(got.records[0].watch_time, 300.0);
    }

    #[test]
    fn jsonl_ingest() {
        let f = write_tmp(
            "{\"user_id\":7,\"video_id\":42,\"watch_time\":15000,\"duration\":30000,\"timestamp\":1650000000000,\"feature_0\":3}\n\
             {\"user_id\":7,\"video_id\":42,\"watch_time\":-1,\"duration\":30000,\"timestamp\":1}\n\
             {\"user_id\":8,\"video_id\":1,\"watch_time\":1,\"duration\":2,\"timestamp\":3}\n",
            ".jsonl",
        );
        let got = ingest(f.path(), &Schema::default()).unwrap();
        assert_eq!(got.records.len(), 2);
        assert_eq!(got.malformed, 1);
        assert_eq!(got.records[0].user_features, vec![3]);
    }

    #[test]
    fn csv_round_trip() {
        let mut r = rec(1, 2, 3.5, 10.0, 99);
        r.user_features = vec![1, 0, 7];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        assert!(write_csv(&p, &[r.clone(), rec(3, 4, 0.0, 1.0, -5)]).is_err());
        let mut second = rec(3, 4, 0.0, 1.0, -5);
        second.user_features = vec![0, 0, 0];
        write_csv(&p, &[r.clone(), second]).unwrap();
        let back = ingest(&p, &Schema::default()).unwrap();
        assert_eq!(back.records[0], r);
        assert_eq!(back.records.len(), 2);
    }

    #[test]
    fn split_by_time() {
        let records = vec![rec(1, 1, 1.0, 2.0, 3), rec(1, 1, 1.0, 2.0, 1), rec(1, 1, 1.0, 2.0, 2)];
        let s = chrono_split(&records, &SplitSpec::new(1, 2)).unwrap();
        assert_eq!(s.train.len(), 1);
        assert_eq!(s.train[0].timestamp, 1);
        assert_eq!(s.validation[0].timestamp, 2);
        assert_eq!(s.test[0].timestamp, 3);
        assert_eq!(s.report.train.fraction, 1.0 / 3.0);
    }

    #[test]
    fn unseen_video_dropped_from_test() {
        let records = vec![rec(1, 1, 1.0, 2.0, 1), rec(1, 9, 1.0, 2.0, 3), rec(5, 1, 1.0, 2.0, 3)];
        let s = chrono_split(&records, &SplitSpec::new(1, 2)).unwrap();
        assert!(s.test.is_empty());
        assert_eq!(s.report.test.dropped_unseen_video, 1);
        assert_eq!(s.report.test.dropped_unseen_user, 1);

        let mut keep = SplitSpec::new(1, 2);
        keep.filter_unseen = false;
        assert_eq!(chrono_split(&records, &keep).unwrap().test.len(), 2);
    }

    #[test]
    fn degenerate_splits() {
        let records = vec![rec(1, 1, 1.0, 2.0, 1), rec(1, 1, 1.0, 2.0, 0)];
        let s = chrono_split(&records, &SplitSpec::new(5, 6)).unwrap();
        assert!(s.validation.is_empty() && s.test.is_empty());
        assert!(matches!(
            chrono_split(&records, &SplitSpec::new(-1, 6)),
            Err(RadError::EmptyInput(_))
        ));
        assert!(chrono_split(&[], &SplitSpec::new(1, 2)).is_err());
        assert!(chrono_split(&records, &SplitSpec::new(2, 2)).is_err());
    }

    #[test]
    fn binner_midpoint_boundary() {
        let train: Vec<_> = [10.0, 20.0, 30.0, 40.0]
            .iter()
            .map(|&d| rec(1, 1, 1.0, d, 0))
            .collect();
        let b = fit_duration_binner(&train, 2).unwrap();
        assert_eq!(b.boundaries, vec![25.0]);
        assert_eq!(b.bin_of(10.0), 0);
        assert_eq!(b.bin_of(30.0), 1);
        assert_eq!(b.bin_of(25.0), 0);
        assert_eq!(b.masses, vec![0.5, 0.5]);
    }

    #[test]
    fn binner_single_bin_and_errors() {
        let train = vec![rec(1, 1, 1.0, 5.0, 0), rec(1, 1, 1.0, 50.0, 0)];
        let b = fit_duration_binner(&train, 1).unwrap();
        assert!(b.boundaries.is_empty());
        assert_eq!(b.bin_of(1e9), 0);
        assert!(fit_duration_binner(&train, 0).is_err());
        assert!(fit_duration_binner(&[], 2).is_err());
    }

    #[test]
    fn binner_collapses_tied_boundaries() {
        let train: Vec<_> = (0..10).map(|_| rec(1, 1, 1.0, 7.0, 0)).collect();
        let b = fit_duration_binner(&train, 4).unwrap();
        assert_eq!(b.boundaries, vec![7.0]);
        assert_eq!(b.masses, vec![1.0, 0.0]);
    }

    #[test]
    fn type2_quantile_hand_values() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(type2_quantile(&x, 1, 2), 2.0);
        assert_eq!(type2_quantile(&x, 1, 3), 1.5);
        assert_eq!(type2_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 1, 4), 2.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn binner_is_monotone(durs in prop::collection::vec(1.0f64..1e6, 1..200), d in 1usize..8,
                                  a in 0.0f64..2e6, b in 0.0f64..2e6) {
                let train: Vec<_> = durs.iter().map(|&x| rec(1, 1, 0.0, x, 0)).collect();
                let binner = fit_duration_binner(&train, d).unwrap();
                prop_assert!(binner.boundaries.windows(2).all(|w| w[0] < w[1]));
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(binner.bin_of(lo) <= binner.bin_of(hi));
                prop_assert!(binner.bin_of(hi) < binner.bins());
            }

            #[test]
            fn split_is_disjoint_and_closed(ts in prop::collection::vec((0u64..6, 0u64..6, 0i64..30), 1..120)) {
                let records: Vec<_> = ts.iter().map(|&(u, i, t)| rec(u, i, 1.0, 2.0, t)).collect();
                let spec = SplitSpec::new(10, 20);
                if let Ok(s) = chrono_split(&records, &spec) {
                    let users: HashSet<_> = s.train.iter().map(|r| r.user_id).collect();
                    let videos: HashSet<_> = s.train.iter().map(|r| r.video_id).collect();
                    for r in s.validation.iter().chain(&s.test) {
                        prop_assert!(users.contains(&r.user_id) && videos.contains(&r.video_id));
                    }
                    prop_assert!(s.train.iter().all(|r| r.timestamp <= 10));
                    prop_assert!(s.validation.iter().all(|r| r.timestamp > 10 && r.timestamp <= 20));
                    prop_assert!(s.test.iter().all(|r| r.timestamp > 20));
                    let r = &s.report;
                    prop_assert_eq!(
                        r.train.retained + r.validation.retained + r.test.retained
                            + r.validation.dropped_unseen_user + r.validation.dropped_unseen_video
                            + r.test.dropped_unseen_user + r.test.dropped_unseen_video,
                        records.len()
                    );
                }
            }
        }
    }
}

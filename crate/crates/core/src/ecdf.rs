//! Per-cohort empirical watch-time distributions and quantile labels.
//!
//! Each cohort (a video, a user within a duration bin, a duration bin, or a
//! user cluster within a duration bin) keeps its sorted training watch
//! times. A watch time is labelled by its midrank position inside its
//! cohort, clamped to `[1/(2n), 1 - 1/(2n)]` so that the probit transform
//! used by fusion stays finite.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DurationBinner, InteractionRecord};
use crate::{par, RadError, Result};

/// User id to cluster id.
pub type ClusterMap = BTreeMap<u64, u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortKind {
    Video,
    UserXDurationbin,
    DurationBin,
    UserClusterXDurationbin,
}

impl CohortKind {
    pub fn uses_bins(self) -> bool {
        !matches!(self, CohortKind::Video)
    }

    pub fn name(self) -> &'static str {
        match self {
            CohortKind::Video => "video",
            CohortKind::UserXDurationbin => "user_x_durationbin",
            CohortKind::DurationBin => "duration_bin",
            CohortKind::UserClusterXDurationbin => "user_cluster_x_durationbin",
        }
    }
}

/// Conditioning cohort of a watch time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CohortKey {
    pub kind: CohortKind,
    /// Video id, user id, cluster id, or 0 for pure duration bins.
    pub id: u64,
    pub bin: Option<u32>,
}

impl fmt::Display for CohortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bin {
            Some(b) => write!(f, "{}:{}:{}", self.kind.name(), self.id, b),
            None => write!(f, "{}:{}", self.kind.name(), self.id),
        }
    }
}

impl CohortKey {
    pub fn video(id: u64) -> Self {
        Self {
            kind: CohortKind::Video,
            id,
            bin: None,
        }
    }

    /// Cohort of `record` under `kind`. `None` when the record's user has no
    /// cluster, or when a binned kind is requested without a binner.
    pub fn for_record(
        kind: CohortKind,
        record: &InteractionRecord,
        binner: Option<&DurationBinner>,
        clusters: Option<&ClusterMap>,
    ) -> Option<Self> {
        let bin = match (kind.uses_bins(), binner) {
            (false, _) => None,
            (true, Some(b)) => Some(b.bin_of(record.duration) as u32),
            (true, None) => return None,
        };
        let id = match kind {
            CohortKind::Video => record.video_id,
            CohortKind::UserXDurationbin => record.user_id,
            CohortKind::DurationBin => 0,
            CohortKind::UserClusterXDurationbin => *clusters?.get(&record.user_id)? as u64,
        };
        Some(Self { kind, id, bin })
    }
}

/// How ties between a watch time and cohort samples are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// `(#less + 0.5 * #equal) / n`.
    #[default]
    Midrank,
    /// `#{x <= s} / n`.
    AtOrBelow,
    /// `#{x < s} / n`.
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    pub cohort: CohortKey,
    samples: Vec<f64>,
}

impl EmpiricalCdf {
    /// Builds a CDF from unsorted samples. Returns `None` for an empty sample.
    pub fn new(cohort: CohortKey, mut samples: Vec<f64>) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_by(f64::total_cmp);
        Some(Self { cohort, samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn count_less(&self, s: f64) -> usize {
        self.samples.partition_point(|&x| x < s)
    }

    pub fn count_at_or_below(&self, s: f64) -> usize {
        self.samples.partition_point(|&x| x <= s)
    }

    /// Quantile of `s` within the cohort, clamped to `[1/(2n), 1 - 1/(2n)]`.
    pub fn quantile_of(&self, s: f64, rule: TieRule) -> f64 {
        let n = self.n() as f64;
        let less = self.count_less(s);
        let raw = match rule {
            TieRule::Midrank => {
                let equal = self.count_at_or_below(s) - less;
                (less as f64 + 0.5 * equal as f64) / n
            }
            TieRule::AtOrBelow => self.count_at_or_below(s) as f64 / n,
            TieRule::Below => less as f64 / n,
        };
        let lo = 0.5 / n;
        raw.clamp(lo, 1.0 - lo)
    }

    /// Watch time at quantile `q`, interpolating linearly between order
    /// statistics placed at plotting positions `(k - 0.5)/n`.
    pub fn inverse_quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(RadError::invalid(format!("quantile {q} outside (0, 1)")));
        }
        let n = self.n();
        let pos = q * n as f64 - 0.5; // zero-based fractional order statistic
        if pos <= 0.0 {
            return Ok(self.samples[0]);
        }
        if pos >= (n - 1) as f64 {
            return Ok(self.samples[n - 1]);
        }
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        Ok(self.samples[k] + frac * (self.samples[k + 1] - self.samples[k]))
    }
}

/// Something that can place a watch time in a cohort distribution and map back.
pub trait QuantileSource: Sync {
    /// Quantile of `s` in cohort `key` and the cohort's sample support, if known.
    fn quantile(&self, key: &CohortKey, s: f64) -> Option<(f64, usize)>;
    /// Watch time at quantile `q` of cohort `key`, if known.
    fn inverse(&self, key: &CohortKey, q: f64) -> Option<f64>;
}

const CDF_STORE_FORMAT: &str = "rad-cdf-store";
const CDF_STORE_VERSION: u32 = 1;

/// All cohorts of one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    pub kind: CohortKind,
    pub tie_rule: TieRule,
    pub cdfs: BTreeMap<CohortKey, EmpiricalCdf>,
}

#[derive(Serialize, Deserialize)]
struct StoredCohort {
    key: CohortKey,
    samples: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CdfStore {
    format: String,
    version: u32,
    kind: CohortKind,
    tie_rule: TieRule,
    cohorts: Vec<StoredCohort>,
}

impl CdfTable {
    pub fn get(&self, key: &CohortKey) -> Option<&EmpiricalCdf> {
        self.cdfs.get(key)
    }

    pub fn len(&self) -> usize {
        self.cdfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdfs.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.cdfs.values().map(EmpiricalCdf::n).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let store = CdfStore {
            format: CDF_STORE_FORMAT.into(),
            version: CDF_STORE_VERSION,
            kind: self.kind,
            tie_rule: self.tie_rule,
            cohorts: self
                .cdfs
                .values()
                .map(|c| StoredCohort {
                    key: c.cohort,
                    samples: c.samples.clone(),
                })
                .collect(),
        };
        crate::data::write_json(path, &store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store: CdfStore = crate::data::read_json(path)?;
        if store.format != CDF_STORE_FORMAT || store.version != CDF_STORE_VERSION {
            return Err(RadError::BadArtifact {
                path: path.into(),
                reason: format!("unsupported cdf store {} v{}", store.format, store.version),
            });
        }
        let mut cdfs = BTreeMap::new();
        for c in store.cohorts {
            let cdf = EmpiricalCdf::new(c.key, c.samples).ok_or_else(|| RadError::BadArtifact {
                path: path.into(),
                reason: format!("cohort {} has no samples", c.key),
            })?;
            cdfs.insert(c.key, cdf);
        }
        Ok(Self {
            kind: store.kind,
            tie_rule: store.tie_rule,
            cdfs,
        })
    }
}

impl QuantileSource for CdfTable {
    fn quantile(&self, key: &CohortKey, s: f64) -> Option<(f64, usize)> {
        self.cdfs.get(key).map(|c| (c.quantile_of(s, self.tie_rule), c.n()))
    }

    fn inverse(&self, key: &CohortKey, q: f64) -> Option<f64> {
        self.cdfs.get(key).and_then(|c| c.inverse_quantile(q).ok())
    }
}

/// Groups training watch times into one [`EmpiricalCdf`] per non-empty cohort.
pub fn build_cdfs(
    train: &[InteractionRecord],
    kind: CohortKind,
    binner: Option<&DurationBinner>,
    clusters: Option<&ClusterMap>,
    tie_rule: TieRule,
) -> Result<CdfTable> {
    if kind.uses_bins() && binner.is_none() {
        return Err(RadError::invalid(format!("cohort kind {} needs a duration binner", kind.name())));
    }
    if kind == CohortKind::UserClusterXDurationbin && clusters.is_none() {
        return Err(RadError::invalid("cluster cohorts need a cluster assignment"));
    }
    let mut groups: BTreeMap<CohortKey, Vec<f64>> = BTreeMap::new();
    let mut unassigned = 0usize;
    for r in train {
        match CohortKey::for_record(kind, r, binner, clusters) {
            Some(key) => groups.entry(key).or_default().push(r.watch_time),
            None => unassigned += 1,
        }
    }
    if unassigned > 0 {
        log::warn!("{unassigned} training records had no {} cohort", kind.name());
    }
    let groups: Vec<(CohortKey, Vec<f64>)> = groups.into_iter().collect();
    let cdfs = par::map(&groups, |(key, samples)| EmpiricalCdf::new(*key, samples.clone()));
    Ok(CdfTable {
        kind,
        tie_rule,
        cdfs: cdfs.into_iter().flatten().map(|c| (c.cohort, c)).collect(),
    })
}

/// Stage-1 labels of one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordLabels {
    /// Video-side quantile (RAD-V).
    pub q_video: f64,
    /// User-side quantile within the duration bin (RAD-U).
    pub q_user: f64,
    /// Quantile within the duration bin alone (D2Q-style).
    pub q_d2q: f64,
    /// Play completion rate.
    pub pcr: f64,
    /// Raw watch time, milliseconds.
    pub raw: f64,
    /// Sample support of the video and user cohorts (0 when cold).
    pub n_video: usize,
    pub n_user: usize,
    pub cold_video: bool,
    pub cold_user: bool,
    pub cold_d2q: bool,
}

/// Cohort definitions and sources used by [`label_records`].
pub struct LabelSources<'a> {
    pub video: &'a dyn QuantileSource,
    pub user: &'a dyn QuantileSource,
    pub user_kind: CohortKind,
    pub d2q: &'a dyn QuantileSource,
    pub binner: &'a DurationBinner,
    pub clusters: Option<&'a ClusterMap>,
    /// Cap play completion at 1.
    pub clip_pcr: bool,
}

/// Label returned for a record whose cohort was never seen in training.
pub const COLD_FALLBACK: f64 = 0.5;

fn lookup(src: &dyn QuantileSource, key: Option<CohortKey>, s: f64) -> (f64, usize, bool) {
    match key.and_then(|k| src.quantile(&k, s)) {
        Some((q, n)) => (q, n, false),
        None => (COLD_FALLBACK, 0, true),
    }
}

pub fn label_record(r: &InteractionRecord, src: &LabelSources<'_>) -> RecordLabels {
    let binner = Some(src.binner);
    let (q_video, n_video, cold_video) = lookup(src.video, Some(CohortKey::video(r.video_id)), r.watch_time);
    let (q_user, n_user, cold_user) = lookup(
        src.user,
        CohortKey::for_record(src.user_kind, r, binner, src.clusters),
        r.watch_time,
    );
    let (q_d2q, _, cold_d2q) = lookup(
        src.d2q,
        CohortKey::for_record(CohortKind::DurationBin, r, binner, None),
        r.watch_time,
    );
    let ratio = r.watch_time / r.duration;
    RecordLabels {
        q_video,
        q_user,
        q_d2q,
        pcr: if src.clip_pcr { ratio.min(1.0) } else { ratio },
        raw: r.watch_time,
        n_video,
        n_user,
        cold_video,
        cold_user,
        cold_d2q,
    }
}

/// Labels every record against cohort distributions built from training data.
pub fn label_records(records: &[InteractionRecord], src: &LabelSources<'_>) -> Vec<RecordLabels> {
    par::map(records, |r| label_record(r, src))
}

/// Writes the input columns followed by the label columns.
pub fn write_labels_csv(path: &Path, records: &[InteractionRecord], labels: &[RecordLabels]) -> Result<()> {
    let file = File::create(path).map_err(|e| RadError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let slots = records.iter().map(|r| r.user_features.len()).max().unwrap_or(0);
    let mut header = String::from("user_id,video_id,watch_time,duration,timestamp");
    for i in 0..slots {
        header.push_str(&format!(",feature_{i}"));
    }
    header.push_str(",q_video,q_user,q_d2q,pcr,raw,n_video,n_user,cold_video,cold_user,cold_d2q\n");
    let io = |e| RadError::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    for (r, l) in records.iter().zip(labels) {
        let mut line = format!("{},{},{},{},{}", r.user_id, r.video_id, r.watch_time, r.duration, r.timestamp);
        for f in &r.user_features {
            line.push_str(&format!(",{f}"));
        }
        line.push_str(&format!(
            ",{},{},{},{},{},{},{},{},{},{}\n",
            l.q_video,
            l.q_user,
            l.q_d2q,
            l.pcr,
            l.raw,
            l.n_video,
            l.n_user,
            l.cold_video as u8,
            l.cold_user as u8,
            l.cold_d2q as u8
        ));
        w.write_all(line.as_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a file written by [`write_labels_csv`].
pub fn read_labels_csv(path: &Path) -> Result<(Vec<InteractionRecord>, Vec<RecordLabels>)> {
    let file = File::open(path).map_err(|e| RadError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(file));
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| RadError::MissingColumn {
            field: name.into(),
            column: name.into(),
        })
    };
    let features: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("feature_"))
        .map(|(i, _)| i)
        .collect();
    let idx: Vec<usize> = [
        "user_id", "video_id", "watch_time", "duration", "timestamp", "q_video", "q_user", "q_d2q", "pcr", "raw",
        "n_video", "n_user", "cold_video", "cold_user", "cold_d2q",
    ]
    .iter()
    .map(|c| col(c))
    .collect::<Result<_>>()?;
    let bad = |what: &str| RadError::BadArtifact {
        path: path.into(),
        reason: format!("unparsable {what}"),
    };
    let mut records = Vec::new();
    let mut labels = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| -> Result<f64> { row[idx[i]].parse::<f64>().map_err(|_| bad(&headers[idx[i]])) };
        let u = |i: usize| -> Result<u64> { row[idx[i]].parse::<u64>().map_err(|_| bad(&headers[idx[i]])) };
        let mut rec = InteractionRecord::new(u(0)?, u(1)?, f(2)?, f(3)?, row[idx[4]].parse().map_err(|_| bad("timestamp"))?);
        rec.user_features = features
            .iter()
            .map(|&i| row[i].parse::<u32>().map_err(|_| bad("feature")))
            .collect::<Result<_>>()?;
        labels.push(RecordLabels {
            q_video: f(5)?,
            q_user: f(6)?,
            q_d2q: f(7)?,
            pcr: f(8)?,
            raw: f(9)?,
            n_video: u(10)? as usize,
            n_user: u(11)? as usize,
            cold_video: u(12)? != 0,
            cold_user: u(13)? != 0,
            cold_d2q: u(14)? != 0,
        });
        records.push(rec);
    }
    Ok((records, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fit_duration_binner;

    fn cdf(xs: &[f64]) -> EmpiricalCdf {
        EmpiricalCdf::new(CohortKey::video(1), xs.to_vec()).unwrap()
    }

    fn rec(u: u64, i: u64, s: f64, d: f64) -> InteractionRecord {
        InteractionRecord::new(u, i, s, d, 0)
    }

    #[test]
    fn midrank_hand_values() {
        assert_eq!(cdf(&[10.0, 20.0, 30.0, 40.0]).quantile_of(25.0, TieRule::Midrank), 0.5);
        assert_eq!(cdf(&[10.0, 20.0, 20.0, 40.0]).quantile_of(20.0, TieRule::Midrank), 0.5);
        assert_eq!(cdf(&[10.0, 20.0, 30.0, 40.0]).quantile_of(5.0, TieRule::Midrank), 0.125);
        assert_eq!(cdf(&[10.0, 20.0, 30.0, 40.0]).quantile_of(99.0, TieRule::Midrank), 0.875);
    }

    #[test]
    fn tie_rule_variants() {
        let c = cdf(&[10.0, 20.0, 20.0, 40.0]);
        assert_eq!(c.quantile_of(20.0, TieRule::AtOrBelow), 0.75);
        assert_eq!(c.quantile_of(20.0, TieRule::Below), 0.25);
        // At-or-below would give exactly 1 for the maximum; the clamp keeps it inside.
        assert_eq!(c.quantile_of(40.0, TieRule::AtOrBelow), 0.875);
    }

    #[test]
    fn single_sample_cohort_is_half() {
        let c = cdf(&[7.0]);
        for s in [0.0, 7.0, 100.0] {
            assert_eq!(c.quantile_of(s, TieRule::Midrank), 0.5);
        }
    }

    #[test]
    fn unique_max_of_ten() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(cdf(&xs).quantile_of(10.0, TieRule::Midrank), 0.95);
    }

    #[test]
    fn inverse_hand_values() {
        let c = cdf(&[10.0, 20.0, 30.0, 40.0]);
        assert_eq!(c.inverse_quantile(0.5).unwrap(), 25.0);
        assert_eq!(c.inverse_quantile(0.01).unwrap(), 10.0);
        assert_eq!(c.inverse_quantile(0.99).unwrap(), 40.0);
        assert_eq!(c.inverse_quantile(0.375).unwrap(), 20.0);
        assert!(c.inverse_quantile(0.0).is_err());
        assert!(c.inverse_quantile(1.0).is_err());
        assert!(c.inverse_quantile(f64::NAN).is_err());
    }

    #[test]
    fn build_video_cohorts() {
        let train = vec![rec(1, 1, 10.0, 50.0), rec(2, 1, 20.0, 50.0)];
        let t = build_cdfs(&train, CohortKind::Video, None, None, TieRule::Midrank).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(&CohortKey::video(1)).unwrap().samples(), &[10.0, 20.0]);
    }

    #[test]
    fn user_cohorts_split_by_duration_bin() {
        let train = vec![
            rec(1, 1, 5.0, 10.0),
            rec(1, 2, 6.0, 20.0),
            rec(1, 3, 25.0, 30.0),
            rec(1, 4, 35.0, 40.0),
        ];
        let binner = fit_duration_binner(&train, 2).unwrap();
        let t = build_cdfs(&train, CohortKind::UserXDurationbin, Some(&binner), None, TieRule::Midrank).unwrap();
        assert_eq!(t.len(), 2);
        let low = CohortKey {
            kind: CohortKind::UserXDurationbin,
            id: 1,
            bin: Some(0),
        };
        assert_eq!(t.get(&low).unwrap().samples(), &[5.0, 6.0]);
        assert_eq!(t.total_samples(), train.len());
        assert!(build_cdfs(&train, CohortKind::UserXDurationbin, None, None, TieRule::Midrank).is_err());
        assert!(build_cdfs(&train, CohortKind::UserClusterXDurationbin, Some(&binner), None, TieRule::Midrank).is_err());
    }

    #[test]
    fn cluster_cohorts() {
        let train = vec![rec(1, 1, 5.0, 10.0), rec(2, 2, 6.0, 10.0), rec(3, 3, 7.0, 10.0)];
        let binner = fit_duration_binner(&train, 1).unwrap();
        let clusters: ClusterMap = [(1, 0), (2, 0), (3, 1)].into_iter().collect();
        let t = build_cdfs(
            &train,
            CohortKind::UserClusterXDurationbin,
            Some(&binner),
            Some(&clusters),
            TieRule::Midrank,
        )
        .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.total_samples(), 3);
    }

    #[test]
    fn labels_and_cold_fallback() {
        let train: Vec<_> = (0..10).map(|k| rec(k, 1, 1000.0 * (k + 1) as f64, 30000.0)).collect();
        let binner = fit_duration_binner(&train, 1).unwrap();
        let video = build_cdfs(&train, CohortKind::Video, None, None, TieRule::Midrank).unwrap();
        let user = build_cdfs(&train, CohortKind::UserXDurationbin, Some(&binner), None, TieRule::Midrank).unwrap();
        let d2q = build_cdfs(&train, CohortKind::DurationBin, Some(&binner), None, TieRule::Midrank).unwrap();
        let src = LabelSources {
            video: &video,
            user: &user,
            user_kind: CohortKind::UserXDurationbin,
            d2q: &d2q,
            binner: &binner,
            clusters: None,
            clip_pcr: true,
        };
        let l = label_record(&rec(9, 1, 10000.0, 30000.0), &src);
        assert_eq!(l.q_video, 0.95);
        assert_eq!(l.n_video, 10);
        let l = label_record(&rec(3, 1, 15000.0, 30000.0), &src);
        assert_eq!(l.pcr, 0.5);
        assert_eq!(l.raw, 15000.0);
        let cold = label_record(&rec(77, 5, 15000.0, 10000.0), &src);
        assert!(cold.cold_video && cold.cold_user && !cold.cold_d2q);
        assert_eq!(cold.q_video, COLD_FALLBACK);
        assert_eq!(cold.pcr, 1.0);
        let all = label_records(&train, &src);
        assert!(all.iter().all(|l| l.q_video > 0.0 && l.q_video < 1.0));
    }

    #[test]
    fn d2q_median_is_half() {
        let train: Vec<_> = (0..21).map(|k| rec(k, k, k as f64, 10.0)).collect();
        let binner = fit_duration_binner(&train, 1).unwrap();
        let d2q = build_cdfs(&train, CohortKind::DurationBin, Some(&binner), None, TieRule::Midrank).unwrap();
        let key = CohortKey::for_record(CohortKind::DurationBin, &train[10], Some(&binner), None).unwrap();
        let (q, n) = d2q.quantile(&key, 10.0).unwrap();
        assert!((q - 0.5).abs() <= 0.5 / n as f64);
    }

    #[test]
    fn store_round_trip() {
        let train = vec![rec(1, 1, 10.0, 50.0), rec(2, 1, 20.0, 50.0), rec(2, 3, 5.0, 50.0)];
        let t = build_cdfs(&train, CohortKind::Video, None, None, TieRule::AtOrBelow).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cdf.json");
        t.save(&p).unwrap();
        assert_eq!(CdfTable::load(&p).unwrap(), t);
    }

    #[test]
    fn labels_csv_round_trip() {
        let train = vec![rec(1, 1, 10.0, 50.0), rec(2, 1, 20.0, 50.0)];
        let binner = fit_duration_binner(&train, 1).unwrap();
        let video = build_cdfs(&train, CohortKind::Video, None, None, TieRule::Midrank).unwrap();
        let src = LabelSources {
            video: &video,
            user: &video,
            user_kind: CohortKind::UserXDurationbin,
            d2q: &video,
            binner: &binner,
            clusters: None,
            clip_pcr: true,
        };
        let labels = label_records(&train, &src);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        write_labels_csv(&p, &train, &labels).unwrap();
        let (r2, l2) = read_labels_csv(&p).unwrap();
        assert_eq!(r2, train);
        assert_eq!(l2, labels);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantile_monotone_and_bounded(xs in prop::collection::vec(0.0f64..1000.0, 1..80),
                                             a in -10.0f64..1100.0, b in -10.0f64..1100.0) {
                let c = cdf(&xs);
                let n = xs.len() as f64;
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                for rule in [TieRule::Midrank, TieRule::AtOrBelow, TieRule::Below] {
                    let (qa, qb) = (c.quantile_of(lo, rule), c.quantile_of(hi, rule));
                    prop_assert!(qa <= qb);
                    prop_assert!(qa >= 0.5 / n && qb <= 1.0 - 0.5 / n);
                    prop_assert!(qa > 0.0 && qb < 1.0);
                }
            }

            #[test]
            fn inverse_round_trip_within_gap(xs in prop::collection::vec(0.0f64..1000.0, 2..60), pick in 0usize..60) {
                let c = cdf(&xs);
                let s = c.samples()[pick % c.n()];
                let back = c.inverse_quantile(c.quantile_of(s, TieRule::Midrank)).unwrap();
                let k = c.samples().partition_point(|&x| x < s);
                let lo = c.samples()[k.saturating_sub(1)];
                let hi = c.samples()[(c.count_at_or_below(s)).min(c.n() - 1)];
                prop_assert!(back >= lo && back <= hi, "s={s} back={back} lo={lo} hi={hi}");
            }

            #[test]
            fn distinct_samples_round_trip_exactly(n in 1usize..50) {
                let xs: Vec<f64> = (0..n).map(|k| (k * 7 % 101) as f64 + k as f64 * 1000.0).collect();
                let c = cdf(&xs);
                for &s in c.samples() {
                    let back = c.inverse_quantile(c.quantile_of(s, TieRule::Midrank)).unwrap();
                    prop_assert!((back - s).abs() <= 1e-9 * s.abs().max(1.0));
                }
            }

            #[test]
            fn inverse_is_monotone(xs in prop::collection::vec(0.0f64..1000.0, 1..40), a in 0.001f64..0.999, b in 0.001f64..0.999) {
                let c = cdf(&xs);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(c.inverse_quantile(lo).unwrap() <= c.inverse_quantile(hi).unwrap());
            }
        }
    }
}

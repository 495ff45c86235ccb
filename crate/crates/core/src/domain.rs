//! Identifiers, features, match records, sessions and datasets.
//!
//! On disk a dataset is a directory with three files:
//!
//! - `events.jsonl`: one physical match per line, fields in this order:
//!   `end_time_ms`, `user_a`, `user_b`, `duration_ms`, `features_a`,
//!   `features_b`. Each features object carries `gender`, `country`,
//!   `match_count`, `mean_log_duration`, `last_log_duration`.
//! - `users.csv`: header `user_id,gender,country`, one row per user.
//! - `meta.json`: format version, categorical schema, split boundaries and
//!   a provenance blob (the generating config).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl std::fmt::Display for UserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// `ln(1 + y)` for a duration in milliseconds.
pub fn log_scale(duration_ms: f64) -> Result<f64> {
    if !(duration_ms.is_finite() && duration_ms >= 0.0) {
        return Err(Error::InvalidValue(format!("duration {duration_ms} ms")));
    }
    Ok(duration_ms.ln_1p())
}

/// Inverse of [`log_scale`].
pub fn unlog(value: f64) -> Result<f64> {
    if !(value.is_finite() && value >= 0.0) {
        return Err(Error::InvalidValue(format!("log duration {value}")));
    }
    Ok(value.exp_m1())
}

fn log_ms(duration_ms: u64) -> f64 {
    (duration_ms as f64).ln_1p()
}

/// Categorical cardinalities. Indices must be below their field's cardinality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub gender_cardinality: u32,
    pub country_cardinality: u32,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            gender_cardinality: 3,
            country_cardinality: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: u32,
    pub country: u32,
}

/// Statistics over the matches completed so far in the current session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RollingStats {
    pub match_count: u32,
    /// Mean of `log_scale(duration_ms)`; 0 when `match_count == 0`.
    pub mean_log_duration: f64,
    pub last_log_duration: f64,
}

impl RollingStats {
    /// O(1) update after one more completed match.
    pub fn push(&mut self, duration_ms: u64) {
        self.push_log(log_ms(duration_ms));
    }

    /// Same as [`RollingStats::push`] for an already log-scaled duration.
    pub fn push_log(&mut self, l: f64) {
        let n = self.match_count as f64;
        self.mean_log_duration = (self.mean_log_duration * n + l) / (n + 1.0);
        self.match_count += 1;
        self.last_log_duration = l;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    #[serde(flatten)]
    pub demographics: Demographics,
    #[serde(flatten)]
    pub stats: RollingStats,
}

impl FeatureVector {
    pub const NUMERIC_LEN: usize = 3;

    pub fn categorical(&self) -> [(&'static str, u32); 2] {
        [
            ("gender", self.demographics.gender),
            ("country", self.demographics.country),
        ]
    }

    pub fn numeric(&self) -> [f64; Self::NUMERIC_LEN] {
        [
            self.stats.match_count as f64,
            self.stats.mean_log_duration,
            self.stats.last_log_duration,
        ]
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let d = self.demographics;
        if d.gender >= schema.gender_cardinality {
            return Err(Error::UnknownCategory {
                field: "gender",
                index: d.gender,
                cardinality: schema.gender_cardinality,
            });
        }
        if d.country >= schema.country_cardinality {
            return Err(Error::UnknownCategory {
                field: "country",
                index: d.country,
                cardinality: schema.country_cardinality,
            });
        }
        if !self.numeric().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(())
    }
}

/// One completed match seen from `self_id`'s side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    #[serde(rename = "self")]
    pub self_id: UserId,
    pub counterpart: UserId,
    pub duration_ms: u64,
    pub end_time_ms: u64,
    /// Snapshot taken when the match started.
    pub self_features: FeatureVector,
    pub counterpart_features: FeatureVector,
}

impl MatchRecord {
    pub fn start_time_ms(&self) -> u64 {
        self.end_time_ms.saturating_sub(self.duration_ms)
    }

    pub fn log_duration(&self) -> f64 {
        log_ms(self.duration_ms)
    }

    pub fn mirrored(&self) -> MatchRecord {
        MatchRecord {
            self_id: self.counterpart,
            counterpart: self.self_id,
            duration_ms: self.duration_ms,
            end_time_ms: self.end_time_ms,
            self_features: self.counterpart_features,
            counterpart_features: self.self_features,
        }
    }
}

/// Ordered matching histories of one platform visit.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    owner: UserId,
    records: Vec<MatchRecord>,
}

impl Session {
    pub fn new(owner: UserId, records: Vec<MatchRecord>) -> Result<Self> {
        for r in &records {
            if r.self_id != owner {
                return Err(Error::Data(format!("record of {} in session of {owner}", r.self_id)));
            }
            if r.self_id == r.counterpart {
                return Err(Error::Data(format!("{owner} matched with itself")));
            }
        }
        if records.windows(2).any(|w| w[0].end_time_ms >= w[1].end_time_ms) {
            return Err(Error::Data(format!("session of {owner} not strictly time-ordered")));
        }
        Ok(Self { owner, records })
    }

    pub fn empty(owner: UserId) -> Self {
        Self {
            owner,
            records: Vec::new(),
        }
    }

    pub fn owner(&self) -> UserId {
        self.owner
    }

    pub fn records(&self) -> &[MatchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: MatchRecord) -> Result<()> {
        if record.self_id != self.owner || record.counterpart == self.owner {
            return Err(Error::Data("record does not belong to this session".into()));
        }
        if let Some(last) = self.records.last() {
            if last.end_time_ms >= record.end_time_ms {
                return Err(Error::Data("session records must be strictly time-ordered".into()));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Number of records that ended at or before `time_ms`.
    pub fn count_ended_by(&self, time_ms: u64) -> usize {
        self.records.partition_point(|r| r.end_time_ms <= time_ms)
    }

    /// Number of records that ended strictly before `time_ms`.
    pub fn count_ended_before(&self, time_ms: u64) -> usize {
        self.records.partition_point(|r| r.end_time_ms < time_ms)
    }
}

/// Features of `session`'s owner using only records `[0, upto)`.
pub fn rolling_features(session: &Session, upto: usize, demographics: Demographics) -> Result<FeatureVector> {
    if upto > session.len() {
        return Err(Error::IndexOutOfRange {
            index: upto,
            len: session.len(),
        });
    }
    let mut stats = RollingStats::default();
    for r in &session.records()[..upto] {
        stats.push(r.duration_ms);
    }
    Ok(FeatureVector { demographics, stats })
}

/// Users available for matching at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingPool {
    pub time_ms: u64,
    members: Vec<UserId>,
}

impl MatchingPool {
    pub fn new(time_ms: u64, members: Vec<UserId>) -> Result<Self> {
        let unique: BTreeSet<_> = members.iter().collect();
        if unique.len() != members.len() {
            return Err(Error::Data("duplicate pool member".into()));
        }
        Ok(Self { time_ms, members })
    }

    pub fn members(&self) -> &[UserId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Time boundaries: train is `[0, train_end)`, validation is
/// `[train_end, validation_end)`, test is `[validation_end, ..)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMarkers {
    pub train_end_ms: u64,
    pub validation_end_ms: u64,
}

impl SplitMarkers {
    pub fn new(train_end_ms: u64, validation_end_ms: u64) -> Result<Self> {
        if train_end_ms > validation_end_ms {
            return Err(Error::Data("validation window must follow the training window".into()));
        }
        Ok(Self {
            train_end_ms,
            validation_end_ms,
        })
    }

    /// Everything is training data.
    pub fn all_train() -> Self {
        Self {
            train_end_ms: u64::MAX,
            validation_end_ms: u64::MAX,
        }
    }

    pub fn split_of(&self, end_time_ms: u64) -> Split {
        if end_time_ms < self.train_end_ms {
            Split::Train
        } else if end_time_ms < self.validation_end_ms {
            Split::Validation
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Warmth {
    Warm,
    Cold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchType {
    WarmWarm,
    WarmCold,
    ColdCold,
}

impl MatchType {
    pub fn of(a: Warmth, b: Warmth) -> Self {
        match (a, b) {
            (Warmth::Warm, Warmth::Warm) => MatchType::WarmWarm,
            (Warmth::Cold, Warmth::Cold) => MatchType::ColdCold,
            _ => MatchType::WarmCold,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MatchType::WarmWarm => "Warm-Warm",
            MatchType::WarmCold => "Warm-Cold",
            MatchType::ColdCold => "Cold-Cold",
        }
    }
}

/// One line of `events.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalMatch {
    pub end_time_ms: u64,
    pub user_a: UserId,
    pub user_b: UserId,
    pub duration_ms: u64,
    pub features_a: FeatureVector,
    pub features_b: FeatureVector,
}

impl PhysicalMatch {
    pub fn records(&self) -> [MatchRecord; 2] {
        let a = MatchRecord {
            self_id: self.user_a,
            counterpart: self.user_b,
            duration_ms: self.duration_ms,
            end_time_ms: self.end_time_ms,
            self_features: self.features_a,
            counterpart_features: self.features_b,
        };
        let b = a.mirrored();
        [a, b]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    schema: FeatureSchema,
    split: SplitMarkers,
    #[serde(default)]
    provenance: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UserRow {
    user_id: u32,
    gender: u32,
    country: u32,
}

/// Match log with static demographics and time-based split markers.
///
/// `events` holds two mirrored records per physical match, ordered by
/// `(end_time_ms, self_id)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub static_features: BTreeMap<UserId, Demographics>,
    matches: Vec<PhysicalMatch>,
    events: Vec<MatchRecord>,
    pub split: SplitMarkers,
    pub provenance: serde_json::Value,
}

impl Dataset {
    pub fn new(
        schema: FeatureSchema,
        static_features: BTreeMap<UserId, Demographics>,
        mut matches: Vec<PhysicalMatch>,
        split: SplitMarkers,
    ) -> Result<Self> {
        matches.sort_by_key(|m| (m.end_time_ms, m.user_a, m.user_b));
        let mut events = Vec::with_capacity(matches.len() * 2);
        for m in &matches {
            if m.user_a == m.user_b {
                return Err(Error::Data(format!("{} matched with itself", m.user_a)));
            }
            for u in [m.user_a, m.user_b] {
                if !static_features.contains_key(&u) {
                    return Err(Error::Data(format!("{u} has no static features")));
                }
            }
            m.features_a.validate(&schema)?;
            m.features_b.validate(&schema)?;
            events.extend(m.records());
        }
        events.sort_by_key(|r| (r.end_time_ms, r.self_id));
        Ok(Self {
            schema,
            static_features,
            matches,
            events,
            split,
            provenance: serde_json::Value::Null,
        })
    }

    pub fn with_provenance(mut self, provenance: serde_json::Value) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn matches(&self) -> &[PhysicalMatch] {
        &self.matches
    }

    pub fn events(&self) -> &[MatchRecord] {
        &self.events
    }

    pub fn split_of(&self, record: &MatchRecord) -> Split {
        self.split.split_of(record.end_time_ms)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &MatchRecord> {
        self.events.iter().filter(move |r| self.split_of(r) == split)
    }

    /// Users with at least one training record.
    pub fn training_users(&self) -> BTreeSet<UserId> {
        self.records_in(Split::Train).map(|r| r.self_id).collect()
    }

    /// Warm iff the user appears in at least one training record.
    pub fn classify_user(&self, user: UserId) -> Warmth {
        if self.records_in(Split::Train).any(|r| r.self_id == user) {
            Warmth::Warm
        } else {
            Warmth::Cold
        }
    }

    /// Every user's visits as sessions. A new session starts at each record
    /// whose snapshot has `match_count == 0`.
    pub fn sessions(&self) -> Result<Vec<Session>> {
        let mut by_user: BTreeMap<UserId, Vec<&MatchRecord>> = BTreeMap::new();
        for r in &self.events {
            by_user.entry(r.self_id).or_default().push(r);
        }
        let mut sessions = Vec::new();
        for (user, records) in by_user {
            let mut current: Vec<MatchRecord> = Vec::new();
            for r in records {
                if r.self_features.stats.match_count == 0 && !current.is_empty() {
                    sessions.push(Session::new(user, std::mem::take(&mut current))?);
                }
                current.push(r.clone());
            }
            if !current.is_empty() {
                sessions.push(Session::new(user, current)?);
            }
        }
        Ok(sessions)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("events.jsonl"))?);
        for m in &self.matches {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;

        let mut users = csv::Writer::from_path(dir.join("users.csv"))?;
        for (id, d) in &self.static_features {
            users.serialize(UserRow {
                user_id: id.0,
                gender: d.gender,
                country: d.country,
            })?;
        }
        users.flush()?;

        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            schema: self.schema,
            split: self.split,
            provenance: self.provenance.clone(),
        };
        let mut mw = BufWriter::new(File::create(dir.join("meta.json"))?);
        serde_json::to_writer_pretty(&mut mw, &meta)?;
        mw.write_all(b"\n")?;
        mw.flush()?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let need = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::MissingInput(p))
            }
        };
        let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(need("meta.json")?)?))?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "dataset format version {}, expected {DATASET_FORMAT_VERSION}",
                meta.format_version
            )));
        }
        let mut static_features = BTreeMap::new();
        let mut rdr = csv::Reader::from_path(need("users.csv")?)?;
        for row in rdr.deserialize() {
            let row: UserRow = row?;
            static_features.insert(
                UserId(row.user_id),
                Demographics {
                    gender: row.gender,
                    country: row.country,
                },
            );
        }
        let mut matches = Vec::new();
        for (i, line) in BufReader::new(File::open(need("events.jsonl")?)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: PhysicalMatch =
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("events.jsonl line {}: {e}", i + 1)))?;
            matches.push(m);
        }
        Ok(Self::new(meta.schema, static_features, matches, meta.split)?.with_provenance(meta.provenance))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(country: u32, stats: RollingStats) -> FeatureVector {
        FeatureVector {
            demographics: Demographics { gender: 0, country },
            stats,
        }
    }

    fn rec(owner: u32, other: u32, duration_ms: u64, end: u64) -> MatchRecord {
        MatchRecord {
            self_id: UserId(owner),
            counterpart: UserId(other),
            duration_ms,
            end_time_ms: end,
            self_features: FeatureVector::default(),
            counterpart_features: FeatureVector::default(),
        }
    }

    #[test]
    fn log_scale_examples() {
        assert_eq!(log_scale(0.0).unwrap(), 0.0);
        assert!((log_scale(std::f64::consts::E - 1.0).unwrap() - 1.0).abs() < 1e-15);
        for y in [0.0, 1.0, 1e6] {
            let back = unlog(log_scale(y).unwrap()).unwrap();
            assert!((back - y).abs() <= 1e-9 * y.max(1.0));
            assert_eq!(back.round(), y);
        }
        assert!(log_scale(-1.0).is_err());
        assert!(unlog(-0.5).is_err());
    }

    #[test]
    fn rolling_features_examples() {
        let demo = Demographics { gender: 1, country: 4 };
        let s = Session::new(UserId(1), vec![rec(1, 2, 500, 10), rec(1, 3, 900, 20)]).unwrap();
        let f0 = rolling_features(&s, 0, demo).unwrap();
        assert_eq!(f0.stats.match_count, 0);
        assert_eq!(f0.stats.mean_log_duration, 0.0);
        assert_eq!(f0.demographics, demo);

        let s = Session::new(UserId(1), vec![rec(1, 2, 0, 10), rec(1, 3, 0, 20)]).unwrap();
        assert_eq!(rolling_features(&s, 1, demo).unwrap().stats.match_count, 1);
        assert_eq!(rolling_features(&s, 2, demo).unwrap().stats.match_count, 2);
        assert!(rolling_features(&s, 3, demo).is_err());
    }

    #[test]
    fn mean_and_last_of_log_durations() {
        let mut stats = RollingStats::default();
        stats.push_log(1.0);
        stats.push_log(3.0);
        assert_eq!(stats.mean_log_duration, 2.0);

        let mut stats = RollingStats::default();
        stats.push_log(log_scale(std::f64::consts::E - 1.0).unwrap());
        assert!((stats.last_log_duration - 1.0).abs() < 1e-15);

        let mut stats = RollingStats::default();
        stats.push(1);
        stats.push(3);
        assert!((stats.mean_log_duration - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_category_rejected() {
        let schema = FeatureSchema::default();
        assert!(fv(31, RollingStats::default()).validate(&schema).is_ok());
        assert!(matches!(
            fv(32, RollingStats::default()).validate(&schema),
            Err(Error::UnknownCategory { field: "country", .. })
        ));
    }

    #[test]
    fn session_invariants() {
        assert!(Session::new(UserId(1), vec![rec(1, 2, 5, 20), rec(1, 3, 5, 10)]).is_err());
        assert!(Session::new(UserId(1), vec![rec(2, 1, 5, 20)]).is_err());
        assert!(Session::new(UserId(1), vec![rec(1, 1, 5, 20)]).is_err());
        assert!(MatchingPool::new(0, vec![UserId(1), UserId(1)]).is_err());
    }

    fn small_dataset() -> Dataset {
        let schema = FeatureSchema::default();
        let statics: BTreeMap<_, _> = (0..4).map(|i| (UserId(i), Demographics::default())).collect();
        let m = |a: u32, b: u32, end: u64, ca: u32, cb: u32| PhysicalMatch {
            end_time_ms: end,
            user_a: UserId(a),
            user_b: UserId(b),
            duration_ms: 1000,
            features_a: fv(
                0,
                RollingStats {
                    match_count: ca,
                    ..Default::default()
                },
            ),
            features_b: fv(
                0,
                RollingStats {
                    match_count: cb,
                    ..Default::default()
                },
            ),
        };
        let matches = vec![m(0, 1, 5_000, 0, 0), m(0, 2, 20_000, 1, 0), m(3, 2, 70_000, 0, 1)];
        Dataset::new(schema, statics, matches, SplitMarkers::new(30_000, 60_000).unwrap()).unwrap()
    }

    #[test]
    fn classify_by_training_presence() {
        let ds = small_dataset();
        assert_eq!(ds.classify_user(UserId(0)), Warmth::Warm);
        assert_eq!(ds.classify_user(UserId(3)), Warmth::Cold);
        assert_eq!(MatchType::of(Warmth::Warm, Warmth::Cold), MatchType::WarmCold);
        assert_eq!(MatchType::of(Warmth::Cold, Warmth::Warm).label(), "Warm-Cold");
    }

    #[test]
    fn mirrored_events_and_sessions() {
        let ds = small_dataset();
        assert_eq!(ds.events().len(), 6);
        let sessions = ds.sessions().unwrap();
        let s0: Vec<_> = sessions.iter().filter(|s| s.owner() == UserId(0)).collect();
        assert_eq!(s0.len(), 1);
        assert_eq!(s0[0].len(), 2);
        let s2: Vec<_> = sessions.iter().filter(|s| s.owner() == UserId(2)).collect();
        assert_eq!(s2.len(), 1);
        assert_eq!(s2[0].len(), 2);
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let ds = small_dataset().with_provenance(serde_json::json!({"seed": 7}));
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::read_dir(dir.path()).unwrap();
        assert_eq!(back.matches(), ds.matches());
        assert_eq!(back.split, ds.split);
        assert_eq!(back.provenance["seed"], 7);
        let line = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
        let first = line.lines().next().unwrap();
        let order: Vec<_> = [
            "end_time_ms",
            "user_a",
            "user_b",
            "duration_ms",
            "features_a",
            "features_b",
        ]
        .iter()
        .map(|k| first.find(k).unwrap())
        .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn missing_dataset_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        match Dataset::read_dir(dir.path()) {
            Err(Error::MissingInput(p)) => assert!(p.ends_with("meta.json")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
